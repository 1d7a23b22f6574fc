"""`eval`: per-sample semantic maps scored against ground truth, plus the aggregated report."""
import logging
from pathlib import Path

from app.schemas.corpus import ConceptDictionary, SampleRecord
from app.services.corpus import load_manifest, read_dictionary, read_split
from app.services.evaluation import evaluate_samples
from app.services.report import compare, write_records, write_report
from app.services.training import DICTIONARY_FILE, TRAIN_IDS_FILE, VAL_IDS_FILE, load_model

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "all")


def select_records(records: list[SampleRecord], splits_dir: Path, split: str) -> list[SampleRecord]:
    if split == "all":
        return records
    wanted = set(read_split(splits_dir / (TRAIN_IDS_FILE if split == "train" else VAL_IDS_FILE)))
    return [r for r in records if r.id in wanted]


def evaluate_to_dir(
    model,
    records: list[SampleRecord],
    dictionary: ConceptDictionary,
    canvas: int,
    train_ids: set[str],
    out_dir: str | Path,
    name: str = "model",
    figure: bool = False,
) -> Path:
    """Writes records.jsonl, report.txt and report.json (and report.png) under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = evaluate_samples(model, records, dictionary, canvas, train_ids)
    write_records(results, out / "records.jsonl")
    write_report(compare([results], [name]), out, figure=figure)
    return out


def run(args) -> int:
    model, cfg = load_model(args.ckpt)
    records = load_manifest(args.manifest)
    splits_dir = Path(args.splits_dir) if args.splits_dir else Path(args.manifest).parent / "splits"
    dictionary = read_dictionary(splits_dir / DICTIONARY_FILE)
    train_path = splits_dir / TRAIN_IDS_FILE
    train_ids = set(read_split(train_path)) if train_path.exists() else set()

    selected = select_records(records, splits_dir, args.split)
    out = evaluate_to_dir(
        model, selected, dictionary, cfg.canvas, train_ids, args.out,
        name=Path(args.ckpt).stem, figure=args.figure,
    )
    print(f"OK: evaluated {len(selected)} samples, report in {out}")
    return 0


def register(subparsers) -> None:
    p = subparsers.add_parser("eval", help="Evaluate a checkpoint on a split.")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=SPLITS, default="val")
    p.add_argument("--splits-dir", default=None, help="Default <manifest dir>/splits")
    p.add_argument("--out", required=True)
    p.add_argument("--figure", action="store_true", help="Also write a radar figure")
    p.set_defaults(handler=run, accepts_overrides=False)
