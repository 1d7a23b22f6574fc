"""`report`: per-dataset comparison of one or two record files."""
from pathlib import Path

from app.services.report import compare, load_records, write_report


def run_names(paths: list[str]) -> list[str]:
    names = [Path(p).parent.name or Path(p).stem for p in paths]
    if len(set(names)) != len(names):
        names = [Path(p).stem for p in paths]
    if len(set(names)) != len(names):
        names = ["A", "B"][: len(paths)]
    return names


def run(args) -> int:
    runs = [load_records(p) for p in args.records]
    names = args.names or run_names(args.records)
    comparison = compare(runs, names)
    out = write_report(comparison, args.out, figure=args.figure)
    print((out / "report.txt").read_text(encoding="utf-8"), end="")
    return 0


def register(subparsers) -> None:
    p = subparsers.add_parser("report", help="Compare one or two evaluation record files.")
    p.add_argument("records", nargs="+", metavar="RECORDS", help="records.jsonl from eval (one or two)")
    p.add_argument("--out", required=True)
    p.add_argument("--names", nargs="+", default=None, help="Column labels for the runs")
    p.add_argument("--figure", action="store_true")
    p.set_defaults(handler=run, accepts_overrides=False)
