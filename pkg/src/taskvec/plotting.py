"""Static figures for run directories (rendered off-screen with the Agg backend)."""

from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .compositional import ROLES, InfluenceGrid, StrategyResult  # noqa: E402
from .experiments import FEW_SHOT, TASK_VECTOR, ZERO_SHOT, EpisodeResult, RegionReport, SweepSummary  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps repeated renders identical
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_overall(summary: SweepSummary, path: str | Path) -> Path:
    """Mean format and correctness per layer, with the two baselines as flat lines."""
    fig, ax = plt.subplots(figsize=(6.5, 4))
    layers = sorted(summary.per_layer)
    for attr, color in (("format", "tab:blue"), ("correctness", "tab:orange")):
        ax.plot(layers, [getattr(summary.per_layer[l], attr) for l in layers], marker="o", ms=3,
                color=color, label=f"task vector {attr}")
        for cond, style in ((ZERO_SHOT, ":"), (FEW_SHOT, "--")):
            if cond in summary.baselines:
                ax.axhline(getattr(summary.baselines[cond], attr), color=color, ls=style, lw=1,
                           label=f"{cond.replace('_', '-')} {attr}")
    ax.set_xlabel("layer")
    ax.set_ylabel("mean score")
    ax.set_ylim(-0.3, 10.3)
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def plot_score_distribution(rows: Sequence[EpisodeResult], layer: int, path: str | Path) -> Path:
    """Histogram of format and correctness marks for each condition."""
    conds = [(ZERO_SHOT, None, "zero-shot"), (TASK_VECTOR, layer, f"task vector (layer {layer})"),
             (FEW_SHOT, None, "few-shot")]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.4), sharey=True)
    marks = np.arange(11)
    for ax, (cond, lay, title) in zip(axes, conds):
        sel = [r for r in rows if r.ok and r.condition == cond and r.layer == lay]
        fmt = Counter(r.scores.format_score for r in sel)
        cor = Counter(r.scores.correctness_score for r in sel)
        ax.bar(marks - 0.2, [fmt[m] for m in marks], width=0.4, label="format")
        ax.bar(marks + 0.2, [cor[m] for m in marks], width=0.4, label="correctness")
        ax.set_title(title, fontsize=9)
        ax.set_xticks(marks)
        ax.set_xlabel("mark")
    axes[0].set_ylabel("episodes")
    axes[0].legend(fontsize=7)
    return _save(fig, path)


def plot_category_curves(summary: SweepSummary, path: str | Path) -> Path:
    """One panel per category: task-vector scores across layers."""
    cats = sorted({c for _, c in summary.per_layer_category})
    n = max(1, len(cats))
    cols = min(3, n)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3.6 * cols, 2.8 * rows), squeeze=False, sharey=True)
    for ax, cat in zip(axes.flat, cats):
        layers = sorted(l for l, c in summary.per_layer_category if c == cat)
        pts = [summary.per_layer_category[(l, cat)] for l in layers]
        ax.plot(layers, [p.format for p in pts], marker="o", ms=2, label="format")
        ax.plot(layers, [p.correctness for p in pts], marker="o", ms=2, label="correctness")
        ax.set_title(f"{cat} ({pts[0].n_tasks} tasks)", fontsize=9)
        ax.set_ylim(-0.3, 10.3)
        ax.set_xlabel("layer", fontsize=8)
    for ax in list(axes.flat)[len(cats):]:
        ax.set_visible(False)
    axes[0][0].legend(fontsize=7)
    return _save(fig, path)


def plot_regions(report: RegionReport, path: str | Path) -> Path:
    """Boost over zero-shot against deficit to few-shot, one point per task."""
    t = report.thresholds
    fig, ax = plt.subplots(figsize=(5, 4.5))
    ax.axvspan(t.r1_boost_min, 10.5, ymin=0, ymax=(t.r1_deficit_max + 10.5) / 21, color="tab:green", alpha=0.12,
               label="region 1")
    ax.axvspan(-10.5, t.r2_boost_max, ymin=(t.r2_deficit_min + 10.5) / 21, ymax=1, color="tab:red", alpha=0.12,
               label="region 2")
    colors = {"region_1": "tab:green", "region_2": "tab:red", "none": "tab:gray"}
    for region, color in colors.items():
        pts = [p for p in report.points if p.region == region]
        ax.scatter([p.boost for p in pts], [p.deficit for p in pts], s=14, color=color, alpha=0.8)
    ax.set_xlim(-10.5, 10.5)
    ax.set_ylim(-10.5, 10.5)
    ax.axhline(0, color="k", lw=0.5)
    ax.axvline(0, color="k", lw=0.5)
    ax.set_xlabel("boost (task vector - zero-shot)")
    ax.set_ylabel("deficit (few-shot - task vector)")
    ax.set_title(f"layer {report.layer}", fontsize=9)
    ax.legend(fontsize=7, loc="lower left")
    return _save(fig, path)


def plot_grid(grid: InfluenceGrid, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(0.42 * len(grid.cols) + 2, 0.36 * len(grid.rows) + 1.5))
    ax.imshow(grid.cells, cmap="Greens", vmin=0, vmax=1, aspect="auto")
    for i in range(grid.cells.shape[0]):
        for j in range(grid.cells.shape[1]):
            ax.text(j, i, str(int(grid.cells[i, j])), ha="center", va="center", fontsize=7)
    ax.set_xticks(range(len(grid.cols)))
    ax.set_xticklabels([repr(c)[1:-1] for c in grid.cols], rotation=70, fontsize=7)
    ax.set_yticks(range(len(grid.rows)))
    ax.set_yticklabels([repr(r)[1:-1] for r in grid.rows], fontsize=7)
    ax.set_xlabel("source token (last demonstration output)")
    ax.set_ylabel("zero-shot target token")
    ax.set_title(f"layer {grid.layer}", fontsize=9)
    return _save(fig, path)


def plot_strategies(results: Mapping[str, StrategyResult], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(7.5, 3.8))
    names = list(results)
    width = 0.8 / max(1, len(names))
    x = np.arange(len(ROLES))
    for k, name in enumerate(names):
        res = results[name]
        ax.bar(x + (k - (len(names) - 1) / 2) * width, [res.per_role[r] for r in ROLES], width,
               label=f"{name} (n={res.n_pairs})")
    ax.set_xticks(x)
    ax.set_xticklabels(ROLES)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("mean probability of target token")
    ax.legend(fontsize=7)
    return _save(fig, path)


__all__ = ["plot_category_curves", "plot_grid", "plot_overall", "plot_regions", "plot_score_distribution",
           "plot_strategies"]
