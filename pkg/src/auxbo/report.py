"""Aggregation of optimization traces into tables and figures.

Figures are rendered with matplotlib straight to SVG next to the aggregate
CSV. Rendering is pinned for reproducibility: fixed hash salt, no embedded
creation date, Agg backend.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "auxbo"
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .data import OptimizationTrace  # noqa: E402
from .engine import aggregate_runs  # noqa: E402

OPTIMIZE_COLUMNS = ["surrogate", "acq", "task_id", "run", "trial",
                    "selected_index", "observed_f", "best_f", "regret"]
AGGREGATE_COLUMNS = ["trial", "surrogate", "mean_norm_best", "mean_regret", "frac_solved"]

METRICS = (
    ("mean_norm_best", "mean best f / max f"),
    ("mean_regret", "mean regret"),
    ("frac_solved", "fraction solved"),
)


class ReportInputError(ValueError):
    """An input CSV does not carry the optimization-trace schema."""


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_trace_csv(path: str) -> list[dict]:
    """Parse one optimization CSV; the header must match the schema exactly."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ReportInputError(f"{path}: empty file") from None
        if header != OPTIMIZE_COLUMNS:
            raise ReportInputError(
                f"{path}: header {header} does not match {OPTIMIZE_COLUMNS}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(OPTIMIZE_COLUMNS):
                raise ReportInputError(f"{path}: line {lineno} has {len(row)} fields")
            try:
                rows.append({
                    "surrogate": row[0],
                    "acq": row[1],
                    "task_id": row[2],
                    "run": int(row[3]),
                    "trial": int(row[4]),
                    "selected_index": int(row[5]),
                    "observed_f": float(row[6]),
                    "best_f": float(row[7]),
                    "regret": float(row[8]),
                })
            except ValueError as e:
                raise ReportInputError(f"{path}: line {lineno}: {e}") from e
    return rows


def traces_from_rows(rows: list[dict]) -> list[OptimizationTrace]:
    """Rebuild per-(surrogate, task, run) traces; max_f = best_f + regret."""
    grouped: dict[tuple, list[dict]] = {}
    for r in rows:
        grouped.setdefault((r["surrogate"], r["task_id"], r["run"]), []).append(r)
    traces = []
    for (surrogate, task_id, run), group in sorted(grouped.items()):
        group.sort(key=lambda r: r["trial"])
        trace = OptimizationTrace(
            task_id=task_id, seed=run, surrogate=surrogate,
            acquisition=group[0]["acq"], max_f=group[0]["best_f"] + group[0]["regret"])
        trace.selected_index = [g["selected_index"] for g in group]
        trace.observed_f = [g["observed_f"] for g in group]
        trace.best_f = [g["best_f"] for g in group]
        trace.regret = [g["regret"] for g in group]
        traces.append(trace)
    return traces


def write_optimize_csv(path: str, traces: list[OptimizationTrace]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(OPTIMIZE_COLUMNS)
        for t in traces:
            for trial in range(len(t)):
                writer.writerow([
                    t.surrogate, t.acquisition, t.task_id, t.seed, trial,
                    t.selected_index[trial], _fmt(t.observed_f[trial]),
                    _fmt(t.best_f[trial]), _fmt(t.regret[trial]),
                ])


def build_report(in_paths: list[str], out_dir: str, solved_threshold: float = 0.5) -> dict:
    """Aggregate trace CSVs into one table plus one SVG line chart per metric."""
    all_rows = []
    for path in in_paths:
        all_rows.extend(read_trace_csv(path))
    traces = traces_from_rows(all_rows)
    by_surrogate: dict[str, list[OptimizationTrace]] = {}
    for t in traces:
        by_surrogate.setdefault(t.surrogate, []).append(t)

    os.makedirs(out_dir, exist_ok=True)
    aggregates = {}
    summaries = {}
    for surrogate in sorted(by_surrogate):
        rows, summary = aggregate_runs(by_surrogate[surrogate], thresholds=(solved_threshold,))
        aggregates[surrogate] = rows
        summaries[surrogate] = summary

    csv_path = os.path.join(out_dir, "aggregate.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(AGGREGATE_COLUMNS)
        for surrogate in sorted(aggregates):
            for row in aggregates[surrogate]:
                writer.writerow([
                    row["trial"], surrogate, _fmt(row["mean_norm_best"]),
                    _fmt(row["mean_regret"]), _fmt(row["frac_solved"][solved_threshold]),
                ])

    figure_paths = []
    for metric, ylabel in METRICS:
        fig, ax = plt.subplots(figsize=(5.0, 3.5))
        for surrogate in sorted(aggregates):
            rows = aggregates[surrogate]
            xs = [r["trial"] for r in rows]
            if metric == "frac_solved":
                ys = [r["frac_solved"][solved_threshold] for r in rows]
            else:
                ys = [r[metric] for r in rows]
            ax.plot(xs, ys, label=surrogate, linewidth=1.5)
        ax.set_xlabel("trial")
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig_path = os.path.join(out_dir, f"{metric}.svg")
        fig.savefig(fig_path, format="svg", metadata={"Date": None})
        plt.close(fig)
        figure_paths.append(fig_path)

    return {
        "aggregate_csv": csv_path,
        "figures": figure_paths,
        "surrogates": sorted(aggregates),
        "solved_threshold": solved_threshold,
        "per_surrogate": summaries,
    }
