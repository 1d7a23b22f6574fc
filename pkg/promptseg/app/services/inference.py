"""
Text-only inference.

Each concept is queried independently; the highest-confidence query supplies
the concept's mask, and overlapping claims are resolved per pixel by
confidence x probability.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from app.models.text_embedding import embed_batch

logger = logging.getLogger(__name__)

MASK_THRESHOLD = 0.5


@dataclass
class PromptResult:
    concept: str
    confidence: float
    mask: np.ndarray  # H×W bool, raw_probs >= 0.5
    raw_probs: np.ndarray  # H×W float in [0, 1]
    query_index: int = 0


@dataclass
class SemanticMap:
    labels: np.ndarray  # H×W int, 0 = background
    legend: dict[int, str] = field(default_factory=dict)

    def mask_for(self, concept: str) -> np.ndarray:
        label_ids = [i for i, c in self.legend.items() if c == concept]
        return np.isin(self.labels, label_ids)


def _embed_dim(model) -> int:
    return model.cfg.embed_dim


def _as_image_tensor(image) -> torch.Tensor:
    """Accepts H×W×3 arrays in [0, 1] or [3, H, W] tensors."""
    if isinstance(image, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()
    return image.float()


def confidences(class_logits: torch.Tensor, presence_logits: torch.Tensor) -> np.ndarray:
    """Per-query confidence sigmoid(class) * sigmoid(presence), float64."""
    return (class_logits.double().sigmoid() * presence_logits.double().sigmoid()).cpu().numpy()


@torch.no_grad()
def predict_concepts(model, image, concepts: list[str]) -> list[PromptResult]:
    """One forward pass over the image repeated once per concept."""
    if not concepts:
        return []
    pixels = _as_image_tensor(image)
    height, width = pixels.shape[-2:]
    text = embed_batch(concepts, _embed_dim(model))
    images = pixels[None].expand(len(concepts), -1, -1, -1)
    output = model(images, text)

    results = []
    for b, concept in enumerate(concepts):
        conf = confidences(output.class_logits[b], output.presence_logits[b])
        # np.argmax returns the first maximum, so ties go to the lowest query index.
        best = int(np.argmax(conf))
        logits = output.mask_logits[b, best]
        if tuple(logits.shape) != (height, width):
            logits = F.interpolate(logits[None, None], size=(height, width), mode="bilinear", align_corners=False)[0, 0]
        probs = logits.double().sigmoid().cpu().numpy()
        results.append(
            PromptResult(
                concept=concept,
                confidence=float(conf[best]),
                mask=probs >= MASK_THRESHOLD,
                raw_probs=probs,
                query_index=best,
            )
        )
    return results


def predict_concept(model, image, concept: str) -> PromptResult:
    return predict_concepts(model, image, [concept])[0]


def resolve_semantic_map(results: list[PromptResult]) -> SemanticMap:
    """
    Per pixel, among concepts with raw_prob >= 0.5, keep the one with the
    highest confidence * raw_prob; earlier concepts win ties.
    """
    if not results:
        raise ValueError("at least one concept is required")
    scores = np.stack(
        [np.where(r.mask, r.confidence * r.raw_probs, -np.inf) for r in results]
    )
    claimed = np.isfinite(scores).any(axis=0)
    winner = np.argmax(scores, axis=0)
    labels = np.where(claimed, winner + 1, 0).astype(np.int32)
    legend = {i + 1: r.concept for i, r in enumerate(results)}
    return SemanticMap(labels=labels, legend=legend)


def predict_semantic_map(model, image, concepts: list[str]) -> SemanticMap:
    return resolve_semantic_map(predict_concepts(model, image, concepts))
