from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from app.services.prng import SplitMix64, seed_from_text


@dataclass(frozen=True)
class ConceptEmbedding:
    concept: str
    vector: tuple[float, ...]  # unit norm

    @property
    def dim(self) -> int:
        return len(self.vector)

    def as_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.tensor(self.vector, dtype=dtype)


@lru_cache(maxsize=4096)
def embed_concept(concept: str, dim: int = 64) -> ConceptEmbedding:
    """
    Deterministic text embedding: SHA-256 of the concept seeds a SplitMix64
    stream, `dim` uniforms in [-1, 1) are drawn and scaled to unit length.
    Callers pass canonical concepts.
    """
    if not concept or not concept.strip():
        raise ValueError("concept must be a non-empty string")
    rng = SplitMix64(seed_from_text(concept))
    values = np.array([2.0 * rng.next_float() - 1.0 for _ in range(dim)], dtype=np.float64)
    values /= np.linalg.norm(values)
    return ConceptEmbedding(concept=concept, vector=tuple(values.tolist()))


def embed_batch(concepts: list[str], dim: int) -> torch.Tensor:
    return torch.stack([embed_concept(c, dim).as_tensor() for c in concepts])
