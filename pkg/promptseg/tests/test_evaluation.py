import numpy as np
import pytest
import torch

from app.commands.evaluate import evaluate_to_dir
from app.exceptions import InputValidationError
from app.models.segmenter import SegmenterOutput
from app.models.text_embedding import embed_concept
from app.schemas.corpus import SampleRecord
from app.schemas.evaluation import EvalRecord
from app.services.corpus import build_concept_dictionary, load_manifest
from app.services.evaluation import aggregate, dice, evaluate_samples, iou, split_kinds
from app.services.report import load_records

LABEL_OF = {"polyp": 1, "instrument": 2, "lung": 1}


class MaskStub:
    """
    Reads the label map back out of the fixture image (red = label * 60) and
    answers each concept with it. With oracle=False every query is background.
    """

    def __init__(self, oracle=True, embed_dim=64):
        self.oracle = oracle
        self.cfg = type("Cfg", (), {"embed_dim": embed_dim})()

    def _concept(self, vector):
        for concept in LABEL_OF:
            if torch.allclose(vector, embed_concept(concept, vector.shape[0]).as_tensor()):
                return concept
        raise AssertionError("unexpected concept embedding")

    def __call__(self, images, text):
        batch, _, height, width = images.shape
        labels = torch.round(images[:, 0] * 255.0 / 60.0).long()
        masks = torch.full((batch, 1, height, width), -10.0)
        if self.oracle:
            for b in range(batch):
                hit = labels[b] == LABEL_OF[self._concept(text[b])]
                masks[b, 0][hit] = 10.0
        return SegmenterOutput(
            class_logits=torch.full((batch, 1), 5.0),
            presence_logits=torch.full((batch, 1), 5.0),
            boxes=torch.full((batch, 1, 4), 0.5),
            mask_logits=masks,
            image_presence_logits=torch.zeros(batch),
        )


def _record(dataset, dice_value, iou_value=None, sample_id="s", split_kind="internal"):
    return EvalRecord(
        dataset=dataset, concept="c", dice=dice_value, iou=dice_value if iou_value is None else iou_value,
        sample_id=sample_id, split_kind=split_kind,
    )


# ── Metrics ──

def test_dice_and_iou_examples():
    a = np.zeros((4, 4), dtype=bool)
    a[0] = True
    b = np.zeros((4, 4), dtype=bool)
    b[0, 2:] = True
    b[1, :2] = True
    assert dice(a, a) == 1.0 and iou(a, a) == 1.0
    assert dice(a, b) == pytest.approx(0.5)
    assert iou(a, b) == pytest.approx(1 / 3)
    assert dice(~a, a) == 0.0 and iou(~a, a) == 0.0
    empty = np.zeros((4, 4), dtype=bool)
    assert dice(empty, empty) == 1.0 and iou(empty, empty) == 1.0
    assert dice(empty, a) == 0.0 and iou(a, empty) == 0.0


def test_shape_mismatch_is_an_error():
    with pytest.raises(ValueError, match="shape mismatch"):
        dice(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError, match="shape mismatch"):
        iou(np.zeros((2, 2)), np.zeros((3, 2)))


def test_dice_dominates_iou_and_both_are_symmetric():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        p = rng.uniform(size=(6, 6)) > rng.uniform(0.2, 0.9)
        g = rng.uniform(size=(6, 6)) > rng.uniform(0.2, 0.9)
        if not p.any() or not g.any():
            continue
        d, j = dice(p, g), iou(p, g)
        assert d >= j
        if d not in (0.0, 1.0):
            assert d > j
        assert d == dice(g, p) and j == iou(g, p)


# ── Aggregation ──

def test_aggregate_examples():
    report = aggregate([_record("A", 0.5, sample_id="1"), _record("A", 0.7, sample_id="2")])
    assert report.score_for("A").dice == pytest.approx(60.0)
    assert report.averages["internal"].dice == pytest.approx(60.0)

    report = aggregate([_record("A", 0.8), _record("B", 0.6), _record("C", 0.2, split_kind="external")])
    assert report.averages["internal"].dice == pytest.approx(70.0)
    assert report.averages["internal"].dataset == "Avg. (Internal)"
    assert report.averages["external"].dice == pytest.approx(20.0)


def test_aggregate_weights_datasets_equally():
    records = [_record("big", 1.0, sample_id=str(i)) for i in range(9)] + [_record("small", 0.0)]
    assert aggregate(records).averages["internal"].dice == pytest.approx(50.0)


def test_constant_records_average_to_the_constant():
    records = [_record(name, 0.42, 0.3, sample_id=str(i)) for i, name in enumerate("ABCD")]
    report = aggregate(records)
    assert report.averages["internal"].dice == pytest.approx(42.0)
    assert report.averages["internal"].iou == pytest.approx(30.0)


def test_aggregate_needs_records():
    with pytest.raises(InputValidationError):
        aggregate([])


def test_dataset_is_internal_when_any_sample_was_trained_on():
    records = [
        SampleRecord(id=i, image="x.png", mask="x.png", dataset=d, labels={1: "lung"})
        for i, d in (("a", "A"), ("b", "A"), ("c", "B"))
    ]
    assert split_kinds(records, {"a"}) == {"A": "internal", "B": "external"}
    assert split_kinds(records, set()) == {"A": "external", "B": "external"}


# ── Evaluation harness ──

def test_oracle_scores_full_marks(tiny_corpus, tmp_path):
    records = load_manifest(tiny_corpus)
    dictionary = build_concept_dictionary(records)

    out = evaluate_to_dir(MaskStub(), records, dictionary, 16, {"colon_0"}, tmp_path / "eval", name="oracle")

    results = load_records(out / "records.jsonl")
    assert len(results) == 3 * 2 + 1
    assert all(r.dice == 1.0 and r.iou == 1.0 for r in results)
    assert {r.dataset: r.split_kind for r in results} == {"colon": "internal", "chest": "external"}
    table = (out / "report.txt").read_text(encoding="utf-8")
    assert "100.0" in table and "Avg. (Internal)" in table


def test_all_background_scores_zero(tiny_corpus, tmp_path):
    records = load_manifest(tiny_corpus)
    results = evaluate_samples(MaskStub(oracle=False), records, build_concept_dictionary(records), 16)
    assert results
    assert all(r.dice == 0.0 and r.iou == 0.0 for r in results)
    report = aggregate(results)
    assert report.score_for("colon").dice == 0.0
    assert report.score_for("chest").dice == 0.0


def test_records_are_in_sample_then_concept_order(tiny_corpus):
    records = load_manifest(tiny_corpus)
    results = evaluate_samples(MaskStub(), list(reversed(records)), build_concept_dictionary(records), 16)
    keys = [(r.sample_id, r.concept) for r in results]
    assert keys == sorted(keys)


def test_evaluation_output_is_byte_identical(tiny_corpus, tmp_path):
    records = load_manifest(tiny_corpus)
    dictionary = build_concept_dictionary(records)
    first = evaluate_to_dir(MaskStub(), records, dictionary, 16, set(), tmp_path / "one")
    second = evaluate_to_dir(MaskStub(), records, dictionary, 16, set(), tmp_path / "two")
    for name in ("records.jsonl", "report.txt", "report.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes()
