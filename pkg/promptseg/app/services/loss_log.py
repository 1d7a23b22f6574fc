"""Append-only JSONL log with one StepRecord per optimizer step."""
import json
import logging
from pathlib import Path
from typing import Any

import numpy as np
import torch

from app.schemas.training import StepRecord

logger = logging.getLogger(__name__)


def _serialize(value: Any) -> Any:
    """Recursively convert tensors and numpy scalars to plain JSON values."""
    if isinstance(value, dict):
        return {k: _serialize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_serialize(v) for v in value]
    if torch.is_tensor(value):
        return value.item() if value.numel() == 1 else value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


class LossLog:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: StepRecord) -> None:
        line = json.dumps(_serialize(record.model_dump()), sort_keys=True)
        with self.path.open("a", encoding="utf-8") as f:
            f.write(line + "\n")

    def truncate_after(self, step: int) -> int:
        """Drop records past `step` (left over from an interrupted run). Returns how many were kept."""
        if not self.path.exists():
            return 0
        kept = [r for r in read_loss_log(self.path) if r.step <= step]
        self.path.write_text(
            "".join(json.dumps(r.model_dump(), sort_keys=True) + "\n" for r in kept), encoding="utf-8"
        )
        if kept:
            logger.info("Loss log resumes after step %d (%d records kept)", step, len(kept))
        return len(kept)


def read_loss_log(path: str | Path) -> list[StepRecord]:
    path = Path(path)
    if not path.exists():
        return []
    return [
        StepRecord.model_validate_json(line)
        for line in path.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
