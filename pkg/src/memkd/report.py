"""Comparison tables built from a directory of run records."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import RunError
from .metrics import rank_table, win_tie_loss

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ("method", "dataset", "auc_prc_mean", "auc_prc_std", "auc_roc_mean", "acc_mean", "rank")
SUMMARY_COLUMNS = ("method", "datasets", "auc_prc_mean", "auc_roc_mean", "acc_mean", "avg_rank",
                   "avg_rank_no_teacher", "win_vs_base", "tie_vs_base", "loss_vs_base")
BASE = "none"
TEACHER = "teacher"


def load_runs(run_dir) -> list[dict]:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise RunError(f"{run_dir} is not a directory")
    runs = []
    for path in sorted(run_dir.glob("*.json")):
        record = json.loads(path.read_text(encoding="utf-8"))
        if isinstance(record, dict) and "role" in record:
            runs.append(record)
    if not runs:
        raise RunError(f"no run records in {run_dir}")
    return runs


def _reported(record: dict) -> bool:
    if record.get("failure") or not record.get("test_metrics"):
        return False
    if record["role"] == "teacher":
        return bool(record.get("selected"))
    return record.get("stage", "final") == "final"


@dataclass
class Report:
    rows: list[dict]
    summary: list[dict]
    warnings: list[str] = field(default_factory=list)


def build_report(runs: list[dict], tol: float = 1e-4) -> Report:
    cells: dict[tuple[str, str], list[dict]] = {}
    for r in runs:
        if not _reported(r):
            continue
        method = TEACHER if r["role"] == "teacher" else r["method"]
        cells.setdefault((method, r["dataset"]), []).append(r["test_metrics"])
    if not cells:
        raise RunError("no completed runs to report")

    methods = sorted({m for m, _ in cells}, key=lambda m: (m == TEACHER, m))
    datasets = sorted({d for _, d in cells})
    agg = {}
    for key, metrics in cells.items():
        prc = np.array([m["auc_prc"] for m in metrics])
        agg[key] = {
            "auc_prc_mean": float(prc.mean()),
            "auc_prc_std": float(prc.std()),
            "auc_roc_mean": float(np.mean([m["auc_roc"] for m in metrics])),
            "acc_mean": float(np.mean([m["accuracy"] for m in metrics])),
        }

    warnings = []
    complete = [d for d in datasets if all((m, d) in agg for m in methods)]
    for d in datasets:
        if d not in complete:
            missing = [m for m in methods if (m, d) not in agg]
            warnings.append(f"dataset {d} lacks {', '.join(missing)}; excluded from ranks")

    def table(ms):
        return {m: {d: agg[(m, d)]["auc_prc_mean"] for d in complete} for m in ms}

    ranks = rank_table(table(methods)) if complete else {m: {} for m in methods}
    students = [m for m in methods if m != TEACHER]
    ranks_nt = rank_table(table(students)) if complete and students else {m: {} for m in students}

    rows = []
    for m in methods:
        for d in datasets:
            if (m, d) not in agg:
                continue
            row = {"method": m, "dataset": d, **agg[(m, d)], "rank": ranks[m].get(d)}
            rows.append(row)

    summary = []
    for m in methods:
        mine = [d for d in datasets if (m, d) in agg]
        entry = {
            "method": m,
            "datasets": len(mine),
            "auc_prc_mean": float(np.mean([agg[(m, d)]["auc_prc_mean"] for d in mine])),
            "auc_roc_mean": float(np.mean([agg[(m, d)]["auc_roc_mean"] for d in mine])),
            "acc_mean": float(np.mean([agg[(m, d)]["acc_mean"] for d in mine])),
            "avg_rank": float(np.mean(list(ranks[m].values()))) if ranks[m] else None,
            "avg_rank_no_teacher": (float(np.mean(list(ranks_nt[m].values())))
                                    if m in ranks_nt and ranks_nt[m] else None),
            "win_vs_base": None, "tie_vs_base": None, "loss_vs_base": None,
        }
        shared = [d for d in datasets if (m, d) in agg and (BASE, d) in agg]
        if m != BASE and shared:
            w, t, l = win_tie_loss([agg[(m, d)]["auc_prc_mean"] for d in shared],
                                   [agg[(BASE, d)]["auc_prc_mean"] for d in shared], tol)
            entry.update(win_vs_base=w, tie_vs_base=t, loss_vs_base=l)
        summary.append(entry)
    return Report(rows, summary, warnings)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report(report: Report, out_csv) -> tuple[Path, Path]:
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with out_csv.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TABLE_COLUMNS)
        for row in report.rows:
            writer.writerow([_fmt(row[c]) for c in TABLE_COLUMNS])
        for message in report.warnings:
            writer.writerow(["#warning", message] + [""] * (len(TABLE_COLUMNS) - 2))
    summary_path = out_csv.with_name(out_csv.stem + "_summary.csv")
    with summary_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for row in report.summary:
            writer.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
    return out_csv, summary_path
