"""Report files: JSON-lines and CSV tables plus rendered figures.

Every report path writes the delimited data first and then renders a
matplotlib figure next to it, so results can be consumed by tools or read
at a glance.  Timing lives in a dedicated ``wall_time_s`` field so that
reports are otherwise byte-identical across reruns of the same seed.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .experiments import ExperimentReport  # noqa: E402


def report_to_dict(report: ExperimentReport) -> dict:
    return {
        "model": report.model,
        "ratio": report.ratio,
        "mean": report.mean,
        "p10": report.p10,
        "p50": report.p50,
        "p90": report.p90,
        "per_unit_mape": report.per_unit_mape,
        "config_fingerprint": report.config_fingerprint,
        "wall_time_s": report.wall_time_s,
    }


def write_reports_jsonl(path, reports: Sequence[ExperimentReport],
                        failures: Sequence[dict] = ()) -> None:
    with open(path, "w") as f:
        for r in reports:
            f.write(json.dumps(report_to_dict(r), sort_keys=True) + "\n")
        for fail in failures:
            f.write(json.dumps({"failure": fail}, sort_keys=True) + "\n")


def read_reports_jsonl(path) -> list[dict]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def write_matrix_csv(path, reports: Sequence[ExperimentReport]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["model", "ratio", "mean", "p10", "p50", "p90"])
        for r in reports:
            writer.writerow([r.model, "" if r.ratio is None else r.ratio,
                             repr(r.mean), repr(r.p10), repr(r.p50), repr(r.p90)])


def write_training_log_jsonl(path, records: Sequence[dict]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def format_results_table(reports: Sequence[ExperimentReport]) -> str:
    """Fixed-width table: model, unlabeled ratio, mean, P10, P50, P90."""
    lines = [f"{'Model':<8}{'Unlabeled ratio':>16}{'Mean':>10}"
             f"{'P10':>10}{'P50':>10}{'P90':>10}"]
    for r in reports:
        ratio = "-" if r.ratio is None else str(r.ratio)
        lines.append(f"{r.model.upper():<8}{ratio:>16}{r.mean:>10.3f}"
                     f"{r.p10:>10.3f}{r.p50:>10.3f}{r.p90:>10.3f}")
    return "\n".join(lines)


def render_matrix_figure(path, reports: Sequence[ExperimentReport]) -> None:
    """Bar chart of mean test MAPE per cell with P10-P90 whiskers."""
    if not reports:
        return
    labels, means, lo, hi = [], [], [], []
    for r in reports:
        name = r.model.upper() if r.ratio is None else f"{r.model.upper()}({r.ratio})"
        labels.append(name)
        means.append(r.mean)
        lo.append(max(r.mean - r.p10, 0.0))
        hi.append(max(r.p90 - r.mean, 0.0))
    fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(labels), 3.6))
    ax.bar(labels, means, yerr=[lo, hi], capsize=4, color="#4878a8")
    ax.set_ylabel("Test MAPE [%]")
    ax.set_title("Mean test MAPE (whiskers: P10–P90)")
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_finetune_csv(path, rows: Sequence[dict]) -> None:
    """Rows: mode, n_labeled, n_unlabeled, mean_mape, per-unit values."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["mode", "n_labeled", "n_unlabeled", "mean_mape"])
        for row in rows:
            writer.writerow([row["mode"], row["n_labeled"], row["n_unlabeled"],
                             repr(row["mean_mape"])])


def render_finetune_figure(path, rows: Sequence[dict]) -> None:
    """Mean test MAPE against the labeled count, one line per finetune mode."""
    if not rows:
        return
    by_mode: dict[str, list[tuple[int, float]]] = {}
    for row in rows:
        by_mode.setdefault(row["mode"], []).append(
            (row["n_labeled"], row["mean_mape"]))
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    colors = {"supervised": "#2a9d2a", "semi_supervised": "#3465a4",
              "unsupervised": "#cc3333"}
    for mode, points in sorted(by_mode.items()):
        points.sort()
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        if len(points) == 1:
            ax.axhline(ys[0], color=colors.get(mode, None), linestyle="--",
                       label=mode)
        else:
            ax.plot(xs, ys, marker="o", color=colors.get(mode, None), label=mode)
    ax.set_xlabel("Labeled points per unit")
    ax.set_ylabel("Mean test MAPE [%]")
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_unit_mape_figure(path, report: ExperimentReport) -> None:
    """Per-unit MAPE bars for a single evaluation."""
    units = sorted(report.per_unit_mape)
    values = [report.per_unit_mape[u] for u in units]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.35 * len(units) + 1.5), 3.4))
    ax.bar(range(len(units)), values, color="#4878a8")
    ax.set_xticks(range(len(units)))
    ax.set_xticklabels(units, rotation=90, fontsize=7)
    ax.axhline(report.mean, color="#cc3333", linestyle="--",
               label=f"mean {report.mean:.2f}%")
    ax.set_ylabel("Test MAPE [%]")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
