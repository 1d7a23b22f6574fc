"""
promptseg command line.

    python main.py synthesize --out data/shapes
    python main.py prepare --manifest data/shapes/manifest.jsonl --seed 42 --train-frac 0.85
    python main.py train --config configs/toy.env --manifest data/shapes/manifest.jsonl --out-dir runs/toy
    python main.py eval --ckpt runs/toy/best.pt --manifest data/shapes/manifest.jsonl --split val --out runs/toy/eval
    python main.py report runs/a/records.jsonl runs/b/records.jsonl --out runs/compare

Exit codes: 0 success, 1 runtime failure, 2 input validation failure.
"""
import argparse
import logging
import os
import sys
from pathlib import Path

from dotenv import load_dotenv
from pydantic import ValidationError

from app.commands import COMMANDS
from app.config import load_run_config, parse_overrides, render_config
from app.exceptions import PromptSegError

logger = logging.getLogger("promptseg")

# Local .env first, then ENV_FILE if given.
load_dotenv(dotenv_path=Path(__file__).parent / ".env", override=False)
_env_file = os.getenv("ENV_FILE")
if _env_file and Path(_env_file).exists():
    load_dotenv(dotenv_path=_env_file, override=True)


def _init_sentry() -> None:
    dsn = os.getenv("SENTRY_DSN", "").strip()
    if not dsn:
        return
    try:
        import sentry_sdk

        sentry_sdk.init(
            dsn=dsn,
            environment=os.getenv("APP_ENV", "production"),
            traces_sample_rate=0.0,
            send_default_pii=False,
        )
        logger.info("Sentry error reporting enabled")
    except ImportError:
        logger.warning("SENTRY_DSN set but sentry_sdk not installed. Add sentry-sdk to requirements.txt.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptseg", description="Text-prompted set-prediction segmentation.")
    parser.add_argument(
        "--log-level",
        default=None,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Default from PROMPTSEG_LOG_LEVEL, else INFO",
    )
    parser.add_argument(
        "--print-config",
        action="store_true",
        help="Print the resolved run config (with --config and overrides of the command) and exit",
    )
    subparsers = parser.add_subparsers(dest="command")
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    # Global flag given after the sub-command lands in the leftovers.
    if "--print-config" in extra:
        extra.remove("--print-config")
        args.print_config = True

    level = args.log_level or os.getenv("PROMPTSEG_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    _init_sentry()

    try:
        accepts_overrides = getattr(args, "accepts_overrides", False)
        if extra and not (accepts_overrides or args.print_config):
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
        args.overrides = parse_overrides(extra)

        if args.print_config:
            cfg = load_run_config(getattr(args, "config", None), args.overrides)
            sys.stdout.write(render_config(cfg))
            return 0
        if not args.command:
            parser.print_help(sys.stderr)
            return 2
        return args.handler(args)
    except PromptSegError as e:
        logger.error("%s", e.detail)
        return e.exit_code
    except (ValidationError, FileNotFoundError) as e:
        logger.error("%s", e)
        return 2
    except Exception:
        logger.exception("Unhandled error")
        return 1


if __name__ == "__main__":
    sys.exit(main())
