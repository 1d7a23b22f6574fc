"""`train`: run the full objective from a config file plus --key value overrides."""
import logging

from app.config import load_run_config
from app.services.training import train

logger = logging.getLogger(__name__)


def run(args) -> int:
    cfg = load_run_config(args.config, args.overrides)
    result = train(cfg)
    best = "n/a" if result.best_val_dice is None else f"{result.best_val_dice:.4f}"
    print(f"OK: {result.step} steps, best validation Dice {best}, checkpoint {result.last_checkpoint}")
    return 0


def register(subparsers) -> None:
    p = subparsers.add_parser(
        "train",
        help="Train the segmenter.",
        description="Any config key may be overridden with --key value (e.g. --n-q 20 --max-steps 2000).",
    )
    p.add_argument("--config", default=None, help="Flat KEY=value config file")
    p.set_defaults(handler=run, accepts_overrides=True)
