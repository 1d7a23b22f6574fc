import logging
import os
from pathlib import Path
from typing import Any

import torch

from app.exceptions import InputValidationError
from app.schemas.training import CheckpointMeta

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
ARCHIVE_KEYS = ("model", "optimizer", "scheduler", "meta")


def _scheduler_state(scheduler) -> dict[str, Any]:
    # The schedule spec is rebuilt from config on load; only counters and rates are stored.
    return {k: v for k, v in scheduler.state_dict().items() if k != "spec"}


def save_checkpoint(path: str | Path, model, optimizer=None, scheduler=None, meta: CheckpointMeta | None = None) -> int:
    """Write a single archive {model, optimizer, scheduler, meta}. Returns its size in bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = meta or CheckpointMeta()
    archive = {
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": _scheduler_state(scheduler) if scheduler is not None else None,
        "meta": meta.model_dump(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(archive, tmp)
    os.replace(tmp, path)
    size = path.stat().st_size
    logger.info("Saved checkpoint %s (step %d, %d bytes)", path, meta.step, size)
    return size


def load_checkpoint(path: str | Path, map_location: str = "cpu") -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    try:
        archive = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as e:
        logger.error("Checkpoint %s is unreadable: %s", path, e)
        raise InputValidationError(f"Checkpoint {path} is unreadable: {e}") from e

    missing = [k for k in ARCHIVE_KEYS if k not in archive]
    if missing:
        raise InputValidationError(f"Checkpoint {path} is missing {', '.join(missing)}")
    meta = CheckpointMeta.model_validate(archive["meta"])
    if meta.format_version != FORMAT_VERSION:
        raise InputValidationError(
            f"Checkpoint {path} has format version {meta.format_version}, expected {FORMAT_VERSION}"
        )
    archive["meta"] = meta
    return archive


def restore(archive: dict[str, Any], model, optimizer=None, scheduler=None) -> CheckpointMeta:
    """Load state into live objects; returns the archive metadata."""
    model.load_state_dict(archive["model"])
    if optimizer is not None and archive.get("optimizer") is not None:
        optimizer.load_state_dict(archive["optimizer"])
    if scheduler is not None and archive.get("scheduler") is not None:
        scheduler.load_state_dict(archive["scheduler"])
    meta: CheckpointMeta = archive["meta"]
    if meta.torch_rng_state is not None:
        torch.set_rng_state(torch.tensor(meta.torch_rng_state, dtype=torch.uint8))
    return meta


def parameter_count(archive: dict[str, Any]) -> int:
    return sum(t.numel() for t in archive["model"].values() if torch.is_tensor(t))
