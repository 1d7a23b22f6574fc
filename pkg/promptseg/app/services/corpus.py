"""
Corpus ingestion: manifest records -> canonical (image, mask, text) triplets.

- load_manifest: newline-delimited JSON records, paths relative to the manifest
- build_concept_dictionary: (dataset, label id) -> canonical concept
- expand_to_triplets: one instance per 8-connected region per label id
- split_train_val: SplitMix64 + Fisher–Yates over sorted ids
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from pydantic import ValidationError
from scipy import ndimage

from app.exceptions import InputValidationError, ManifestParseError
from app.schemas.corpus import ConceptDictionary, SampleRecord, SplitSpec
from app.services.prng import SplitMix64, fisher_yates

logger = logging.getLogger(__name__)

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class TripletSample:
    image: np.ndarray  # H×W×C float32 in [0, 1]
    instance_masks: list[np.ndarray]  # H×W bool, one per instance
    concepts: list[str]
    source_id: str
    label_ids: list[int] = field(default_factory=list)

    def instances_of(self, concept: str) -> list[np.ndarray]:
        return [m for m, c in zip(self.instance_masks, self.concepts) if c == concept]


@dataclass(frozen=True)
class LetterboxInfo:
    source_size: tuple[int, int]  # (H, W) before resizing
    resized_size: tuple[int, int]  # (H, W) of the content inside the canvas
    canvas: int


@dataclass(frozen=True)
class PromptItem:
    record_id: str
    concept: str


def canonicalize(concept: str) -> str:
    return " ".join(concept.strip().lower().split())


# ── Manifest ──────────────────────────────────────────────────────────────────

def load_manifest(path: str | Path) -> list[SampleRecord]:
    path = Path(path)
    base = path.parent
    records: list[SampleRecord] = []
    seen: set[str] = set()

    with path.open("r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestParseError(line_number, f"invalid JSON ({e.msg})") from e
            if not isinstance(raw, dict):
                raise ManifestParseError(line_number, "record must be a flat object")
            try:
                record = SampleRecord.model_validate(raw)
            except ValidationError as e:
                first = e.errors()[0]
                loc = ".".join(str(p) for p in first["loc"])
                raise ManifestParseError(line_number, f"{loc}: {first['msg']}") from e

            if record.id in seen:
                raise InputValidationError(f"Duplicate sample id '{record.id}' (line {line_number})")
            seen.add(record.id)

            records.append(
                record.model_copy(update={
                    "image_path": base / record.image_path,
                    "mask_path": base / record.mask_path,
                })
            )

    logger.info("Loaded %d manifest records from %s", len(records), path)
    return records


# ── Concept dictionary ────────────────────────────────────────────────────────

def build_concept_dictionary(records: list[SampleRecord]) -> ConceptDictionary:
    if not records:
        raise InputValidationError("Cannot build a concept dictionary from zero records")

    entries: dict[str, dict[int, str]] = {}
    for record in records:
        per_dataset = entries.setdefault(record.dataset_name, {})
        for label_id, concept in record.label_map.items():
            canonical = canonicalize(concept)
            existing = per_dataset.get(label_id)
            if existing is not None and existing != canonical:
                raise InputValidationError(
                    f"Conflicting concepts for dataset '{record.dataset_name}' label {label_id}: "
                    f"'{existing}' vs '{canonical}' (record '{record.id}')"
                )
            per_dataset[label_id] = canonical

    ordered = {
        dataset: {label_id: entries[dataset][label_id] for label_id in sorted(entries[dataset])}
        for dataset in sorted(entries)
    }
    vocabulary = sorted({c for per_dataset in ordered.values() for c in per_dataset.values()})
    return ConceptDictionary(entries=ordered, vocabulary=vocabulary)


def write_dictionary(dictionary: ConceptDictionary, path: str | Path) -> None:
    Path(path).write_text(dictionary.model_dump_json(indent=2) + "\n", encoding="utf-8")


def read_dictionary(path: str | Path) -> ConceptDictionary:
    return ConceptDictionary.model_validate_json(Path(path).read_text(encoding="utf-8"))


# ── Triplets ──────────────────────────────────────────────────────────────────

def load_sample_arrays(record: SampleRecord) -> tuple[np.ndarray, np.ndarray]:
    """Read (image float32 H×W×3 in [0,1], label map int H×W) for a record."""
    with Image.open(record.image_path) as im:
        image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    with Image.open(record.mask_path) as m:
        if m.mode not in ("L", "P", "I", "I;16", "1"):
            raise InputValidationError(
                f"Mask for '{record.id}' must be single-channel, got mode {m.mode}"
            )
        label_map = np.asarray(m, dtype=np.int64)
    if label_map.ndim != 2:
        raise InputValidationError(f"Mask for '{record.id}' is not a 2-D label map")
    if label_map.shape != image.shape[:2]:
        raise InputValidationError(
            f"Image {image.shape[:2]} and mask {label_map.shape} sizes differ for '{record.id}'"
        )
    return image, label_map


def instances_from_label_map(
    label_map: np.ndarray,
    record: SampleRecord,
    dictionary: ConceptDictionary,
) -> tuple[list[np.ndarray], list[str], list[int]]:
    masks: list[np.ndarray] = []
    concepts: list[str] = []
    label_ids: list[int] = []

    for label_id in (int(v) for v in np.unique(label_map)):
        if label_id == 0:
            continue
        if label_id not in record.label_map:
            raise InputValidationError(
                f"Mask of '{record.id}' contains label {label_id} missing from its label map"
            )
        concept = dictionary.concept_for(record.dataset_name, label_id)
        if concept is None:
            raise InputValidationError(
                f"Dataset '{record.dataset_name}' label {label_id} is not in the concept dictionary"
            )

        components, count = ndimage.label(label_map == label_id, structure=_EIGHT_CONNECTED)
        found = []
        for k in range(1, count + 1):
            component = components == k
            first_pixel = int(np.argmax(component.ravel()))
            found.append((first_pixel, component))
        for _, component in sorted(found, key=lambda item: item[0]):
            masks.append(component)
            concepts.append(concept)
            label_ids.append(label_id)

    return masks, concepts, label_ids


def expand_to_triplets(record: SampleRecord, dictionary: ConceptDictionary) -> TripletSample:
    image, label_map = load_sample_arrays(record)
    masks, concepts, label_ids = instances_from_label_map(label_map, record, dictionary)
    return TripletSample(
        image=image,
        instance_masks=masks,
        concepts=concepts,
        source_id=record.id,
        label_ids=label_ids,
    )


# ── Letterboxing ──────────────────────────────────────────────────────────────

def _letterbox_info(height: int, width: int, canvas: int) -> LetterboxInfo:
    scale = canvas / max(height, width)
    resized = (
        min(canvas, max(1, round(height * scale))),
        min(canvas, max(1, round(width * scale))),
    )
    return LetterboxInfo(source_size=(height, width), resized_size=resized, canvas=canvas)


def letterbox(image: np.ndarray, canvas: int) -> tuple[np.ndarray, LetterboxInfo]:
    """Bilinear resize so the long side equals `canvas`, top-left aligned, zero padded."""
    info = _letterbox_info(image.shape[0], image.shape[1], canvas)
    rh, rw = info.resized_size
    out = np.zeros((canvas, canvas, image.shape[2]), dtype=np.float32)
    if (rh, rw) == info.source_size:
        out[:rh, :rw] = image
        return out, info
    for c in range(image.shape[2]):
        channel = Image.fromarray(np.ascontiguousarray(image[:, :, c], dtype=np.float32))
        out[:rh, :rw, c] = np.asarray(channel.resize((rw, rh), Image.BILINEAR))
    return np.clip(out, 0.0, 1.0), info


def letterbox_mask(mask: np.ndarray, canvas: int) -> tuple[np.ndarray, LetterboxInfo]:
    """Nearest-neighbour counterpart of letterbox for label maps and binary masks."""
    info = _letterbox_info(mask.shape[0], mask.shape[1], canvas)
    rh, rw = info.resized_size
    out = np.zeros((canvas, canvas), dtype=mask.dtype)
    if (rh, rw) == info.source_size:
        out[:rh, :rw] = mask
        return out, info
    resized = Image.fromarray(mask.astype(np.uint8)).resize((rw, rh), Image.NEAREST)
    out[:rh, :rw] = np.asarray(resized).astype(mask.dtype)
    return out, info


def unletterbox_mask(mask: np.ndarray, info: LetterboxInfo) -> np.ndarray:
    rh, rw = info.resized_size
    cropped = mask[:rh, :rw]
    if (rh, rw) == info.source_size:
        return cropped.copy()
    sh, sw = info.source_size
    resized = Image.fromarray(cropped.astype(np.uint8)).resize((sw, sh), Image.NEAREST)
    return np.asarray(resized).astype(mask.dtype)


def to_canvas(sample: TripletSample, canvas: int) -> tuple[TripletSample, LetterboxInfo]:
    image, info = letterbox(sample.image, canvas)
    masks, concepts, label_ids = [], [], []
    for mask, concept, label_id in zip(sample.instance_masks, sample.concepts, sample.label_ids):
        boxed, _ = letterbox_mask(mask.astype(np.uint8), canvas)
        if not boxed.any():
            logger.warning("Instance of '%s' in %s vanished at canvas %d", concept, sample.source_id, canvas)
            continue
        masks.append(boxed.astype(bool))
        concepts.append(concept)
        label_ids.append(label_id)
    return (
        TripletSample(image=image, instance_masks=masks, concepts=concepts,
                      source_id=sample.source_id, label_ids=label_ids),
        info,
    )


# ── Splits and prompt items ───────────────────────────────────────────────────

def split_train_val(ids: list[str], spec: SplitSpec) -> tuple[list[str], list[str]]:
    if not ids:
        raise InputValidationError("Cannot split an empty id list")
    shuffled = fisher_yates(sorted(ids), SplitMix64(spec.seed))
    # Tolerance keeps e.g. 0.85 * 20 from landing on 16.999...
    n_train = math.floor(spec.train_fraction * len(shuffled) + 1e-9)
    return shuffled[:n_train], shuffled[n_train:]


def write_split(ids: list[str], path: str | Path) -> None:
    Path(path).write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")


def read_split(path: str | Path) -> list[str]:
    return [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def build_prompt_items(records: list[SampleRecord], dictionary: ConceptDictionary) -> list[PromptItem]:
    """
    One item per (record, concept of its dataset). Whether the concept is present
    is decided when the mask is read, so absent concepts become negative prompts.
    """
    items = []
    for record in records:
        for concept in dictionary.concepts_for_dataset(record.dataset_name):
            items.append(PromptItem(record_id=record.id, concept=concept))
    return items
