"""`prepare`: concept dictionary plus train/val id lists for a manifest."""
import logging
from pathlib import Path

from app.config import load_run_config
from app.services.corpus import (
    build_concept_dictionary,
    load_manifest,
    split_train_val,
    write_dictionary,
    write_split,
)
from app.services.training import DICTIONARY_FILE, TRAIN_IDS_FILE, VAL_IDS_FILE

logger = logging.getLogger(__name__)


def prepare(manifest: str | Path, out_dir: str | Path, seed: int, train_fraction: float) -> tuple[list[str], list[str]]:
    cfg = load_run_config(overrides={"manifest": str(manifest), "split_seed": seed, "train_fraction": train_fraction})
    records = load_manifest(manifest)
    dictionary = build_concept_dictionary(records)
    train_ids, val_ids = split_train_val([r.id for r in records], cfg.split_spec())

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_split(train_ids, out / TRAIN_IDS_FILE)
    write_split(val_ids, out / VAL_IDS_FILE)
    write_dictionary(dictionary, out / DICTIONARY_FILE)
    logger.info(
        "Prepared %d train / %d val ids and %d concepts in %s",
        len(train_ids), len(val_ids), len(dictionary.vocabulary), out,
    )
    return train_ids, val_ids


def run(args) -> int:
    defaults = load_run_config()
    seed = defaults.split_seed if args.seed is None else args.seed
    fraction = defaults.train_fraction if args.train_frac is None else args.train_frac
    out = args.out or Path(args.manifest).parent / "splits"
    train_ids, val_ids = prepare(args.manifest, out, seed, fraction)
    print(f"OK: {len(train_ids)} train / {len(val_ids)} val ids written to {out}")
    return 0


def register(subparsers) -> None:
    p = subparsers.add_parser("prepare", help="Build the concept dictionary and the train/val split.")
    p.add_argument("--manifest", required=True, help="Newline-delimited JSON manifest")
    p.add_argument("--seed", type=int, default=None, help="Split seed (default 42)")
    p.add_argument("--train-frac", type=float, default=None, help="Train fraction (default 0.85)")
    p.add_argument("--out", default=None, help="Output directory (default <manifest dir>/splits)")
    p.set_defaults(handler=run, accepts_overrides=False)
