"""
Text-prompted training loop.

Each item is one (record, concept) prompt; concepts absent from the image are
negative prompts with no targets. Batches follow a per-epoch permutation
seeded by seed + epoch, so a run is fully determined by its config.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset, Sampler

from app.config import RunConfig, render_config
from app.exceptions import InputValidationError, TrainingDivergedError
from app.models.segmenter import Segmenter
from app.models.text_embedding import embed_concept
from app.schemas.corpus import ConceptDictionary, SampleRecord
from app.schemas.training import CheckpointMeta, StepRecord
from app.services.checkpoint import load_checkpoint, restore, save_checkpoint
from app.services.corpus import (
    TripletSample,
    build_prompt_items,
    expand_to_triplets,
    load_manifest,
    read_dictionary,
    read_split,
    to_canvas,
)
from app.services.evaluation import evaluate_samples, mean_dice
from app.services.geometry import boxes_from_masks
from app.services.loss_log import LossLog
from app.services.objective import InstanceTargets, SetCriterion
from app.services.schedule import InverseSqrtWarmup, build_optimizer, current_rates

logger = logging.getLogger(__name__)

TRAIN_IDS_FILE = "train_ids.txt"
VAL_IDS_FILE = "val_ids.txt"
DICTIONARY_FILE = "dictionary.json"


# ── Data ──────────────────────────────────────────────────────────────────────

class PromptDataset(Dataset):
    def __init__(self, records: list[SampleRecord], dictionary: ConceptDictionary, canvas: int, embed_dim: int):
        self.records = {r.id: r for r in records}
        self.dictionary = dictionary
        self.canvas = canvas
        self.embed_dim = embed_dim
        self.items = build_prompt_items(records, dictionary)
        self._cache: dict[str, tuple[torch.Tensor, TripletSample]] = {}

    def __len__(self):
        return len(self.items)

    def _sample(self, record_id: str):
        if record_id not in self._cache:
            sample = expand_to_triplets(self.records[record_id], self.dictionary)
            boxed, _ = to_canvas(sample, self.canvas)
            image = torch.from_numpy(np.ascontiguousarray(boxed.image.transpose(2, 0, 1))).float()
            self._cache[record_id] = (image, boxed)
        return self._cache[record_id]

    def __getitem__(self, index: int) -> dict:
        item = self.items[index]
        image, sample = self._sample(item.record_id)
        selected = sample.instances_of(item.concept)
        if selected:
            mask_tensor = torch.from_numpy(np.stack(selected))
        else:
            mask_tensor = torch.zeros((0, self.canvas, self.canvas), dtype=torch.bool)
        return {
            "image": image,
            "text": embed_concept(item.concept, self.embed_dim).as_tensor(),
            "masks": mask_tensor,
            "boxes": boxes_from_masks(mask_tensor),
            "concept": item.concept,
            "record_id": item.record_id,
        }


def collate(batch: list[dict]) -> dict:
    return {
        "images": torch.stack([b["image"] for b in batch]),
        "text": torch.stack([b["text"] for b in batch]),
        "targets": [
            InstanceTargets(boxes=b["boxes"], masks=b["masks"], concept=b["concept"], record_id=b["record_id"])
            for b in batch
        ],
        "batch_ids": [f"{b['record_id']}:{b['concept']}" for b in batch],
    }


class EpochPermutationSampler(Sampler[int]):
    """Permutation of range(n) seeded by seed + epoch; `skip` drops the first indices (for resume)."""

    def __init__(self, n: int, seed: int):
        self.n = n
        self.seed = seed
        self.epoch = 0
        self.skip = 0

    def set_epoch(self, epoch: int, skip: int = 0) -> None:
        self.epoch = epoch
        self.skip = skip

    def order(self) -> list[int]:
        generator = torch.Generator().manual_seed(self.seed + self.epoch)
        return torch.randperm(self.n, generator=generator).tolist()

    def __iter__(self):
        return iter(self.order()[self.skip:])

    def __len__(self):
        return self.n - self.skip


# ── Loop ──────────────────────────────────────────────────────────────────────

@dataclass
class TrainResult:
    step: int
    epoch: int
    best_val_dice: float | None
    last_checkpoint: Path
    best_checkpoint: Path | None
    loss_log: Path


@dataclass
class PreparedData:
    records: list[SampleRecord]
    dictionary: ConceptDictionary
    train_records: list[SampleRecord]
    val_records: list[SampleRecord]

    @property
    def train_ids(self) -> set[str]:
        return {r.id for r in self.train_records}


def load_prepared(cfg: RunConfig) -> PreparedData:
    if not cfg.manifest:
        raise InputValidationError("manifest is not set")
    records = load_manifest(cfg.manifest)
    splits = cfg.resolved_splits_dir()
    dictionary = read_dictionary(splits / DICTIONARY_FILE)
    by_id = {r.id: r for r in records}
    train_ids = read_split(splits / TRAIN_IDS_FILE)
    val_ids = read_split(splits / VAL_IDS_FILE)
    missing = [i for i in train_ids + val_ids if i not in by_id]
    if missing:
        raise InputValidationError(f"Split ids missing from manifest: {', '.join(missing[:5])}")
    return PreparedData(
        records=records,
        dictionary=dictionary,
        train_records=[by_id[i] for i in train_ids],
        val_records=[by_id[i] for i in val_ids],
    )


def _dump_batch(out_dir: Path, step: int, batch_ids: list[str], losses) -> Path:
    path = out_dir / "nan_batch.json"
    payload = {"step": step, "batch_ids": batch_ids, "losses": losses.as_floats()}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def validate(model: Segmenter, data: PreparedData, canvas: int) -> float | None:
    if not data.val_records:
        return None
    model.eval()
    records = evaluate_samples(model, data.val_records, data.dictionary, canvas, data.train_ids)
    model.train()
    return mean_dice(records)


def train(cfg: RunConfig, data: PreparedData | None = None) -> TrainResult:
    data = data or load_prepared(cfg)
    if not data.train_records:
        raise InputValidationError("Train split is empty")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.env").write_text(render_config(cfg), encoding="utf-8")

    torch.manual_seed(cfg.seed)
    model_cfg = cfg.model_config_view()
    model = Segmenter(model_cfg)
    criterion = SetCriterion(cfg.matcher_weights(), cfg.o2m_config(), cfg.find_weights(), cfg.seg_weights())
    optimizer = build_optimizer(model, cfg.group_rates(), cfg.llrd_spec(), cfg.schedule_spec())
    scheduler = InverseSqrtWarmup(optimizer, cfg.schedule_spec())

    dataset = PromptDataset(data.train_records, data.dictionary, model_cfg.canvas, model_cfg.embed_dim)
    sampler = EpochPermutationSampler(len(dataset), cfg.seed)
    loader = DataLoader(
        dataset,
        batch_size=cfg.batch_size,
        sampler=sampler,
        collate_fn=collate,
        num_workers=cfg.num_workers,
    )
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)

    loss_log = LossLog(out_dir / "loss_log.jsonl")
    step, start_epoch, skip_batches = 0, 0, 0
    best: float | None = None
    if cfg.resume:
        meta = restore(load_checkpoint(cfg.resume), model, optimizer, scheduler)
        step, start_epoch, best = meta.step, meta.epoch, meta.best_val_dice
        skip_batches = step - start_epoch * steps_per_epoch
        if skip_batches >= steps_per_epoch:
            start_epoch, skip_batches = start_epoch + 1, 0
        loss_log.truncate_after(step)
        logger.info("Resumed from %s at step %d (epoch %d, batch %d)", cfg.resume, step, start_epoch, skip_batches)
    elif loss_log.path.exists():
        loss_log.path.unlink()

    last_path = out_dir / "last.pt"
    best_path = out_dir / "best.pt"
    epoch = start_epoch

    def meta_now() -> CheckpointMeta:
        return CheckpointMeta(
            config=cfg.model_dump(),
            step=step,
            epoch=epoch,
            best_val_dice=best,
            torch_rng_state=torch.get_rng_state().tolist(),
        )

    def run_validation() -> None:
        nonlocal best
        score = validate(model, data, model_cfg.canvas)
        if score is None:
            return
        logger.info("Step %d: validation mean Dice %.4f", step, score)
        if best is None or score > best:
            best = score
            save_checkpoint(best_path, model, optimizer, scheduler, meta_now())

    model.train()
    done = cfg.max_steps and step >= cfg.max_steps
    while not done and epoch < cfg.max_epochs:
        sampler.set_epoch(epoch, skip=skip_batches * cfg.batch_size)
        for batch in loader:
            step += 1
            outputs = model(batch["images"], batch["text"])
            losses = criterion(outputs, batch["targets"])
            if not torch.isfinite(losses.total):
                dump = _dump_batch(out_dir, step, batch["batch_ids"], losses)
                logger.error("Non-finite loss at step %d; batch written to %s", step, dump)
                raise TrainingDivergedError(step, batch["batch_ids"], str(dump))

            optimizer.zero_grad(set_to_none=True)
            losses.total.backward()
            if cfg.grad_clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
            rates = current_rates(optimizer)
            optimizer.step()
            scheduler.step()

            values = losses.as_floats()
            loss_log.append(StepRecord(step=step, epoch=epoch, lr=rates, batch_ids=batch["batch_ids"], **values))
            if step % cfg.log_every == 0 or step == 1:
                logger.info(
                    "step %d epoch %d loss %.4f (find %.4f, o2m %.4f, seg %.4f) lr_decoder %.3g",
                    step, epoch, values["total"], values["find_o2o"], values["find_o2m"],
                    values["seg_focal"] + values["dice"] + values["seg_pres"], rates.get("decoder_seg_dot", 0.0),
                )
            if cfg.eval_every and step % cfg.eval_every == 0:
                run_validation()
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(last_path, model, optimizer, scheduler, meta_now())
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
                break
        else:
            epoch += 1
        skip_batches = 0

    run_validation()
    save_checkpoint(last_path, model, optimizer, scheduler, meta_now())
    logger.info("Training finished at step %d; best validation Dice %s", step, best)
    return TrainResult(
        step=step,
        epoch=epoch,
        best_val_dice=best,
        last_checkpoint=last_path,
        best_checkpoint=best_path if best_path.exists() else None,
        loss_log=loss_log.path,
    )


def load_model(checkpoint: str | Path) -> tuple[Segmenter, RunConfig]:
    """Rebuild a model from a checkpoint's own stored config."""
    archive = load_checkpoint(checkpoint)
    cfg = RunConfig(**archive["meta"].config)
    model = Segmenter(cfg.model_config_view())
    model.load_state_dict(archive["model"])
    model.eval()
    return model, cfg
