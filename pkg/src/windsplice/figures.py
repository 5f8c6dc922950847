"""Matplotlib rendering for the report command: reliability diagrams,
conditional PIT histograms, and score comparison bars, written to files next
to the delimited score output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .scoring import METRICS, ScoreReport

MODEL_COLORS = ("#e76f51", "#2a9d8f", "#6a4c93", "#4a7c59")


def _aggregate_reliability(report: ScoreReport, horizon: int):
    levels = sorted({r["level"] for r in report.reliability if r["horizon"] == horizon})
    observed = []
    for lv in levels:
        vals = [
            r["observed"]
            for r in report.reliability
            if r["horizon"] == horizon and r["level"] == lv
        ]
        observed.append(float(np.mean(vals)))
    return np.array(levels), np.array(observed)


def reliability_figure(reports: list[ScoreReport], horizon: int = 1):
    """Nominal-vs-observed coverage for each model at one horizon."""
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([0, 1], [0, 1], color="grey", lw=1, ls="--", zorder=1)
    for report, color in zip(reports, MODEL_COLORS):
        levels, observed = _aggregate_reliability(report, horizon)
        ax.plot(levels, observed, marker="o", ms=4, lw=1.5, color=color, label=report.model)
    ax.set_xlabel("nominal level")
    ax.set_ylabel("observed frequency")
    ax.set_title(f"Reliability, {horizon}h ahead")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend(frameon=False, fontsize=9)
    fig.tight_layout()
    return fig


def pit_figure(reports: list[ScoreReport], horizon: int = 1):
    """Conditional PIT histograms (one panel per model) at one horizon."""
    n = len(reports)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.0), squeeze=False)
    for ax, report, color in zip(axes[0], reports, MODEL_COLORS):
        rows = [r for r in report.pit if r["horizon"] == horizon]
        if not rows:
            continue
        edges = sorted({r["bin_low"] for r in rows})
        counts = np.zeros(len(edges))
        for r in rows:
            counts[edges.index(r["bin_low"])] += r["count"]
        width = edges[1] - edges[0] if len(edges) > 1 else 0.05
        ax.bar(edges, counts, width=width, align="edge", color=color, alpha=0.8)
        if counts.sum() > 0:
            ax.axhline(counts.sum() / len(edges), color="k", lw=1, ls=":")
        ax.set_title(report.model, fontsize=10)
        ax.set_xlabel("PIT")
    axes[0][0].set_ylabel("count")
    fig.suptitle(f"Conditional PIT, {horizon}h ahead", fontsize=11)
    fig.tight_layout()
    return fig


def score_comparison_figure(reports: list[ScoreReport], horizon: int = 1):
    """Average score per metric and model (the Avg. rows), as grouped bars."""
    fig, ax = plt.subplots(figsize=(6.5, 3.5))
    width = 0.8 / max(len(reports), 1)
    xs = np.arange(len(METRICS))
    for k, (report, color) in enumerate(zip(reports, MODEL_COLORS)):
        vals = [report.average_row(metric, horizon) for metric in METRICS]
        ax.bar(xs + k * width, vals, width=width, color=color, label=report.model)
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels(METRICS, fontsize=8)
    ax.set_ylabel("average score")
    ax.set_title(f"Average scores, {horizon}h ahead")
    ax.legend(frameon=False, fontsize=9)
    fig.tight_layout()
    return fig


def save_report_figures(reports: list[ScoreReport], out_dir, horizons) -> list[str]:
    """Render the standard report figures to PNG files; returns the paths."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for h in horizons:
        for name, maker in (
            ("reliability", reliability_figure),
            ("pit", pit_figure),
            ("scores", score_comparison_figure),
        ):
            fig = maker(reports, horizon=h)
            path = out / f"{name}_h{h}.png"
            fig.savefig(path, dpi=150)
            plt.close(fig)
            written.append(str(path))
    return written
