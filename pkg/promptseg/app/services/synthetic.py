"""
Synthetic colored-shape corpus for desk-scale training runs.

Every image holds 1..max_shapes non-touching shapes on a noisy textured
background. Each shape kind has its own colour and label id, so the label map
decodes directly into (instance, concept) pairs. By default a kind appears at
most once per image, so one mask per prompt covers the whole concept.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

logger = logging.getLogger(__name__)

DATASET_NAME = "synthetic-shapes"


@dataclass(frozen=True)
class ShapeKind:
    concept: str
    label_id: int
    color: tuple[int, int, int]


SHAPE_KINDS = (
    ShapeKind("circle", 1, (220, 40, 40)),
    ShapeKind("square", 2, (40, 200, 60)),
    ShapeKind("triangle", 3, (50, 70, 230)),
)

# Shapes keep this many pixels between each other so 8-connected regions never merge.
_GAP = 3


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(60, 140, size=3)
    gy, gx = np.mgrid[0:size, 0:size] / size
    tilt = rng.uniform(-30, 30, size=(2, 3))
    image = base + gy[..., None] * tilt[0] + gx[..., None] * tilt[1]
    image = image + rng.normal(0, 12, size=(size, size, 3))
    return np.clip(image, 0, 255)


def _draw(draw: ImageDraw.ImageDraw, kind: ShapeKind, box: tuple[int, int, int, int], fill) -> None:
    x0, y0, x1, y1 = box
    if kind.concept == "circle":
        draw.ellipse(box, fill=fill)
    elif kind.concept == "square":
        draw.rectangle(box, fill=fill)
    else:
        draw.polygon([((x0 + x1) / 2, y0), (x1, y1), (x0, y1)], fill=fill)


def _place(rng: np.random.Generator, size: int, taken: list[tuple[int, int, int, int]], attempts: int = 50):
    low, high = max(6, size // 8), max(8, size // 4)
    for _ in range(attempts):
        extent = int(rng.integers(low, high + 1))
        x0 = int(rng.integers(1, size - extent - 1))
        y0 = int(rng.integers(1, size - extent - 1))
        box = (x0, y0, x0 + extent, y0 + extent)
        if all(
            box[2] + _GAP < t[0] or t[2] + _GAP < box[0] or box[3] + _GAP < t[1] or t[3] + _GAP < box[1]
            for t in taken
        ):
            return box
    return None


def render_sample(
    rng: np.random.Generator, size: int, max_shapes: int, repeat_kinds: bool = False
) -> tuple[Image.Image, Image.Image]:
    """Returns (RGB image, 8-bit label map). Without repeat_kinds each kind appears at most once."""
    pixels = _background(rng, size)
    labels = Image.new("L", (size, size), 0)
    label_draw = ImageDraw.Draw(labels)
    overlay = Image.new("L", (size, size), 0)

    taken: list[tuple[int, int, int, int]] = []
    if repeat_kinds:
        count = int(rng.integers(1, max_shapes + 1))
        kinds = [SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))] for _ in range(count)]
    else:
        count = int(rng.integers(1, min(max_shapes, len(SHAPE_KINDS)) + 1))
        kinds = [SHAPE_KINDS[i] for i in rng.permutation(len(SHAPE_KINDS))[:count]]
    for kind in kinds:
        box = _place(rng, size, taken)
        if box is None:
            break
        taken.append(box)
        _draw(label_draw, kind, box, kind.label_id)
        jitter = rng.normal(0, 10, size=3)
        color = np.clip(np.array(kind.color) + jitter, 0, 255)
        overlay.paste(0, (0, 0, size, size))
        _draw(ImageDraw.Draw(overlay), kind, box, 255)
        inside = np.asarray(overlay) > 0
        pixels[inside] = color + rng.normal(0, 6, size=(int(inside.sum()), 3))

    image = Image.fromarray(np.clip(pixels, 0, 255).astype(np.uint8))
    return image, labels


def generate_synthetic_corpus(
    out_dir: str | Path,
    n_images: int = 200,
    size: int = 128,
    seed: int = 0,
    max_shapes: int = 3,
    repeat_kinds: bool = False,
) -> Path:
    """Writes images/, masks/ and manifest.jsonl under out_dir; returns the manifest path."""
    if n_images < 1 or max_shapes < 1:
        raise ValueError("n_images and max_shapes must be positive")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    labels = {kind.label_id: kind.concept for kind in SHAPE_KINDS}

    lines = []
    for i in range(n_images):
        sample_id = f"shape_{i:04d}"
        image, label_map = render_sample(rng, size, max_shapes, repeat_kinds)
        image.save(out / "images" / f"{sample_id}.png")
        label_map.save(out / "masks" / f"{sample_id}.png")
        lines.append(
            json.dumps(
                {
                    "id": sample_id,
                    "image": f"images/{sample_id}.png",
                    "mask": f"masks/{sample_id}.png",
                    "dataset": DATASET_NAME,
                    "modality": "synthetic",
                    "labels": labels,
                },
                sort_keys=True,
            )
        )
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("Wrote %d synthetic samples to %s", n_images, out)
    return manifest
