"""
Dice/IoU evaluation and per-dataset aggregation.

Predictions are made on the letterboxed canvas and mapped back to the
source resolution before they are compared with the ground-truth label map.
"""
import logging
from collections import defaultdict

import numpy as np

from app.exceptions import InputValidationError
from app.schemas.corpus import ConceptDictionary, SampleRecord
from app.schemas.evaluation import DatasetScore, EvalRecord, Report
from app.services.corpus import letterbox, load_sample_arrays, unletterbox_mask
from app.services.inference import predict_semantic_map

logger = logging.getLogger(__name__)

SPLIT_KINDS = ("internal", "external")


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def iou(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(pred, gt).sum()) / union


def split_kinds(records: list[SampleRecord], train_ids: set[str]) -> dict[str, str]:
    """A dataset is internal when any of its samples was trained on."""
    kinds = {record.dataset_name: "external" for record in records}
    for record in records:
        if record.id in train_ids:
            kinds[record.dataset_name] = "internal"
    return kinds


def evaluate_sample(
    model,
    record: SampleRecord,
    dictionary: ConceptDictionary,
    canvas: int,
    split_kind: str = "internal",
) -> list[EvalRecord]:
    image, label_map = load_sample_arrays(record)
    boxed, info = letterbox(image, canvas)
    concepts = dictionary.concepts_for_dataset(record.dataset_name)
    if not concepts:
        return []
    semantic = predict_semantic_map(model, boxed, concepts)
    labels = unletterbox_mask(semantic.labels, info)

    out = []
    for concept in concepts:
        gt = np.isin(label_map, dictionary.label_ids_for(record.dataset_name, concept))
        pred = np.isin(labels, [i for i, c in semantic.legend.items() if c == concept])
        if not gt.any() and not pred.any():
            continue
        out.append(
            EvalRecord(
                dataset=record.dataset_name,
                concept=concept,
                dice=dice(pred, gt),
                iou=iou(pred, gt),
                sample_id=record.id,
                split_kind=split_kind,
            )
        )
    return out


def evaluate_samples(
    model,
    records: list[SampleRecord],
    dictionary: ConceptDictionary,
    canvas: int,
    train_ids: set[str] | None = None,
) -> list[EvalRecord]:
    kinds = split_kinds(records, train_ids or set())
    out = []
    for record in sorted(records, key=lambda r: r.id):
        out.extend(evaluate_sample(model, record, dictionary, canvas, kinds[record.dataset_name]))
    logger.info("Evaluated %d samples -> %d records", len(records), len(out))
    return sorted(out, key=lambda r: (r.sample_id, r.concept))


def mean_dice(records: list[EvalRecord]) -> float:
    if not records:
        return 0.0
    return float(np.mean([r.dice for r in records]))


def aggregate(records: list[EvalRecord]) -> Report:
    """
    Per-dataset means over records (percent, unrounded), then an unweighted
    mean over datasets within each split kind.
    """
    if not records:
        raise InputValidationError("No evaluation records to aggregate")

    by_dataset: dict[str, list[EvalRecord]] = defaultdict(list)
    for record in records:
        by_dataset[record.dataset].append(record)

    datasets = []
    for name in sorted(by_dataset):
        rows = by_dataset[name]
        datasets.append(
            DatasetScore(
                dataset=name,
                split_kind=rows[0].split_kind,
                dice=100.0 * float(np.mean([r.dice for r in rows])),
                iou=100.0 * float(np.mean([r.iou for r in rows])),
                n_records=len(rows),
            )
        )

    averages = {}
    for kind in SPLIT_KINDS:
        members = [d for d in datasets if d.split_kind == kind]
        if not members:
            continue
        averages[kind] = DatasetScore(
            dataset=f"Avg. ({kind.capitalize()})",
            split_kind=kind,
            dice=float(np.mean([d.dice for d in members])),
            iou=float(np.mean([d.iou for d in members])),
            n_records=sum(d.n_records for d in members),
        )
    return Report(datasets=datasets, averages=averages)
