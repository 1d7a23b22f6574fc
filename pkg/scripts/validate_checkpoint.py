#!/usr/bin/env python3
"""Validate a training checkpoint is loadable. Usage: python scripts/validate_checkpoint.py <last.pt>"""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "promptseg"))

from app.services.checkpoint import load_checkpoint, parameter_count  # noqa: E402


def main():
    if len(sys.argv) < 2:
        print("Usage: python scripts/validate_checkpoint.py <checkpoint.pt>", file=sys.stderr)
        sys.exit(1)
    path = Path(sys.argv[1])
    if not path.exists():
        print(f"File not found: {path}", file=sys.stderr)
        sys.exit(1)
    try:
        archive = load_checkpoint(path)
        meta = archive["meta"]
        print(f"OK: {path} step {meta.step} epoch {meta.epoch}, {parameter_count(archive)} parameters "
              f"({path.stat().st_size / 1024:.1f} KB)")
    except Exception as e:
        print(f"ERROR: {e}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
