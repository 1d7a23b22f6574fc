"""
Comparison reports from evaluation record streams.

One run gives a plain per-dataset table; two runs add delta columns computed
from unrounded means. Values are only rounded when rendered.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from app.exceptions import InputValidationError
from app.schemas.evaluation import EvalRecord, Report
from app.services.evaluation import aggregate

logger = logging.getLogger(__name__)


@dataclass
class Comparison:
    names: list[str]
    reports: list[Report]

    @property
    def datasets(self) -> list[str]:
        return [d.dataset for d in self.reports[0].datasets]

    @property
    def average_kinds(self) -> list[str]:
        return [k for k in ("internal", "external") if all(k in r.averages for r in self.reports)]

    def rows(self):
        """(label, split kind, [DatasetScore per run]) for datasets then averages."""
        for name in self.datasets:
            scores = [r.score_for(name) for r in self.reports]
            yield name, scores[0].split_kind, scores
        for kind in self.average_kinds:
            scores = [r.averages[kind] for r in self.reports]
            yield scores[0].dataset, kind, scores


# ── Record files ──────────────────────────────────────────────────────────────

def write_records(records: list[EvalRecord], path: str | Path) -> None:
    lines = [json.dumps(r.model_dump(), sort_keys=True) for r in records]
    Path(path).write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")


def load_records(path: str | Path) -> list[EvalRecord]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Record file not found: {path}")
    records = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(EvalRecord.model_validate_json(line))
        except ValidationError as exc:
            raise InputValidationError(f"{path.name} line {number}: {exc.errors()[0]['msg']}") from exc
    if not records:
        raise InputValidationError(f"Record file is empty: {path}")
    return records


# ── Comparison ────────────────────────────────────────────────────────────────

def compare(runs: list[list[EvalRecord]], names: list[str]) -> Comparison:
    if not 1 <= len(runs) <= 2:
        raise InputValidationError("report takes one or two record files")
    if len(names) != len(runs):
        raise InputValidationError(f"Got {len(names)} run names for {len(runs)} record files")
    dataset_sets = [{r.dataset for r in records} for records in runs]
    shared = set.intersection(*dataset_sets)
    if len(runs) == 2 and dataset_sets[0] != dataset_sets[1]:
        logger.warning(
            "Runs cover different datasets; reporting the %d shared of %s",
            len(shared),
            sorted(dataset_sets[0] | dataset_sets[1]),
        )
    if not shared:
        raise InputValidationError("Runs have no dataset in common")
    reports = [aggregate([r for r in records if r.dataset in shared]) for records in runs]
    return Comparison(names=names, reports=reports)


def _fmt(value: float) -> str:
    return f"{value:.1f}"


def render_table(comparison: Comparison) -> str:
    header = ["Dataset", "Split"]
    for name in comparison.names:
        header += [f"{name} Dice", f"{name} IoU"]
    if len(comparison.reports) == 2:
        header += ["Δ Dice", "Δ IoU"]

    body = []
    for label, kind, scores in comparison.rows():
        row = [label, kind]
        for score in scores:
            row += [_fmt(score.dice), _fmt(score.iou)]
        if len(scores) == 2:
            row += [f"{scores[1].dice - scores[0].dice:+.1f}", f"{scores[1].iou - scores[0].iou:+.1f}"]
        body.append(row)

    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]

    def line(cells):
        return "  ".join(
            c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths))
        ).rstrip()

    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(r) for r in body]) + "\n"


def render_json(comparison: Comparison) -> str:
    rows = []
    for label, kind, scores in comparison.rows():
        entry = {
            "dataset": label,
            "split_kind": kind,
            "runs": {
                name: {"dice": s.dice, "iou": s.iou, "n_records": s.n_records}
                for name, s in zip(comparison.names, scores)
            },
        }
        if len(scores) == 2:
            entry["delta"] = {"dice": scores[1].dice - scores[0].dice, "iou": scores[1].iou - scores[0].iou}
        rows.append(entry)
    return json.dumps({"runs": comparison.names, "rows": rows}, indent=2, sort_keys=True) + "\n"


def render_radar(comparison: Comparison, path: str | Path) -> None:
    """Per-dataset Dice, one closed polygon per run."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = comparison.datasets
    angles = np.linspace(0, 2 * np.pi, len(labels), endpoint=False).tolist()
    angles += angles[:1]

    fig, ax = plt.subplots(figsize=(6, 6), subplot_kw={"polar": True})
    for name, report in zip(comparison.names, comparison.reports):
        values = [report.score_for(d).dice for d in labels]
        values += values[:1]
        ax.plot(angles, values, linewidth=1.5, label=name)
        ax.fill(angles, values, alpha=0.15)
    ax.set_xticks(angles[:-1])
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylim(0, 100)
    ax.set_title("Dice (%) per dataset")
    ax.legend(loc="upper right", bbox_to_anchor=(1.25, 1.1))
    fig.savefig(path, bbox_inches="tight", dpi=150)
    plt.close(fig)


def write_report(comparison: Comparison, out_dir: str | Path, figure: bool = False) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(render_table(comparison), encoding="utf-8")
    (out / "report.json").write_text(render_json(comparison), encoding="utf-8")
    if figure:
        render_radar(comparison, out / "report.png")
    logger.info("Report written to %s", out)
    return out
