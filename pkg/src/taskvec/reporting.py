"""CSV twins of every figure plus small text tables."""

from __future__ import annotations

import csv
import io
from typing import Mapping

from .compositional import ROLES, StrategyResult
from .experiments import RegionReport, SweepSummary


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(x: float) -> str:
    return repr(float(x))


def summary_csv(summary: SweepSummary) -> str:
    rows = []
    for cond, m in sorted(summary.baselines.items()):
        rows.append([cond, "", "all", _num(m.format), _num(m.correctness), m.n_tasks, m.n_rows])
    for (cond, cat), m in sorted(summary.baseline_category.items()):
        rows.append([cond, "", cat, _num(m.format), _num(m.correctness), m.n_tasks, m.n_rows])
    for layer, m in sorted(summary.per_layer.items()):
        rows.append(["task_vector", layer, "all", _num(m.format), _num(m.correctness), m.n_tasks, m.n_rows])
    for (layer, cat), m in sorted(summary.per_layer_category.items()):
        rows.append(["task_vector", layer, cat, _num(m.format), _num(m.correctness), m.n_tasks, m.n_rows])
    return _csv(["condition", "layer", "category", "format", "correctness", "n_tasks", "n_rows"], rows)


def regions_csv(report: RegionReport) -> str:
    rows = [[p.task_id, p.category, _num(p.zero_shot), _num(p.task_vector), _num(p.few_shot),
             _num(p.boost), _num(p.deficit), p.region] for p in report.points]
    return _csv(["task_id", "category", "zero_shot", "task_vector", "few_shot", "boost", "deficit", "region"], rows)


def strategies_csv(results: Mapping[str, StrategyResult]) -> str:
    rows = [[role, name, _num(res.per_role[role]), res.n_pairs, res.n_failed]
            for name, res in results.items() for role in ROLES]
    return _csv(["role", "strategy", "mean_probability", "n_pairs", "n_failed"], rows)


def category_table(counts: Mapping[str, int]) -> str:
    """Plain two-column table, ``other`` last."""
    items = [(k, v) for k, v in counts.items() if k != "other"]
    if "other" in counts:
        items.append(("other", counts["other"]))
    width = max([len(k) for k, _ in items] + [8])
    lines = [f"{'category':<{width}}  tasks"]
    lines += [f"{k:<{width}}  {v}" for k, v in items]
    lines.append(f"{'total':<{width}}  {sum(counts.values())}")
    return "\n".join(lines) + "\n"


def category_csv(counts: Mapping[str, int]) -> str:
    return _csv(["category", "tasks"], list(counts.items()))


__all__ = ["category_csv", "category_table", "regions_csv", "strategies_csv", "summary_csv"]
