"""Layer sweeps, zero-/few-shot baselines, aggregation and boost/deficit regions."""

from __future__ import annotations

import json
import logging
import random
import threading
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

from .backend.base import Backend, BackendError, GenerationParams, InterventionError
from .clients import ClientError
from .dataset.core import Grade, TaskRecord, TaskSet, validate_task
from .engine import (
    DEFAULT_TEMPLATE,
    Episode,
    PromptTemplate,
    TaskVector,
    TemplateError,
    inject_and_generate,
    prompt_hash,
    render_fewshot,
    render_zeroshot,
    sample_episodes,
)
from .judge import Judge, JudgeRequest, JudgingError, ScorePair

log = logging.getLogger(__name__)

ZERO_SHOT, FEW_SHOT, TASK_VECTOR = "zero_shot", "few_shot", "task_vector"
FAILURE_THRESHOLD = 0.10

# errors that fail one episode row instead of the whole run
ROW_ERRORS = (BackendError, JudgingError, TemplateError, ClientError)


@dataclass(frozen=True)
class EpisodeResult:
    task_id: str
    episode: int
    seed: int
    condition: str
    layer: int | None
    output: str
    scores: ScorePair | None
    judge_kind: str
    category: str = ""
    error: str | None = None

    def __post_init__(self) -> None:
        if self.condition not in (ZERO_SHOT, FEW_SHOT, TASK_VECTOR):
            raise ValueError(f"unknown condition {self.condition!r}")
        if (self.condition == TASK_VECTOR) != (self.layer is not None):
            raise ValueError("a layer is given exactly for the task-vector condition")

    @property
    def ok(self) -> bool:
        return self.scores is not None

    def to_json(self) -> str:
        d = asdict(self)
        d["scores"] = [self.scores.format_score, self.scores.correctness_score] if self.scores else None
        return json.dumps(d, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "EpisodeResult":
        d = json.loads(line)
        d["scores"] = ScorePair(*d["scores"]) if d["scores"] is not None else None
        return cls(**d)


@dataclass(frozen=True)
class MeanScore:
    format: float
    correctness: float
    n_tasks: int
    n_rows: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SweepSummary:
    per_layer: dict[int, MeanScore] = field(default_factory=dict)
    per_layer_category: dict[tuple[int, str], MeanScore] = field(default_factory=dict)
    baselines: dict[str, MeanScore] = field(default_factory=dict)
    baseline_category: dict[tuple[str, str], MeanScore] = field(default_factory=dict)
    n_tasks: int = 0
    n_episodes: int = 0
    processed: int = 0
    failed: int = 0

    @property
    def failure_rate(self) -> float:
        return self.failed / self.processed if self.processed else 0.0

    @property
    def flagged(self) -> bool:
        return self.failure_rate > FAILURE_THRESHOLD

    def to_dict(self) -> dict:
        return {
            "n_tasks": self.n_tasks, "n_episodes": self.n_episodes, "processed": self.processed,
            "failed": self.failed, "failure_rate": self.failure_rate, "flagged": self.flagged,
            "baselines": {k: v.to_dict() for k, v in sorted(self.baselines.items())},
            "per_layer": {str(k): v.to_dict() for k, v in sorted(self.per_layer.items())},
            "per_layer_category": [dict(layer=l, category=c, **v.to_dict())
                                   for (l, c), v in sorted(self.per_layer_category.items())],
            "baseline_category": [dict(condition=b, category=c, **v.to_dict())
                                  for (b, c), v in sorted(self.baseline_category.items())],
        }


@dataclass
class SweepResult:
    summary: SweepSummary
    rows: list[EpisodeResult]
    task_ids: list[str]


def _key(row: EpisodeResult) -> str | int:
    return row.layer if row.condition == TASK_VECTOR else row.condition


def _mean_of_task_means(rows: Iterable[EpisodeResult]) -> MeanScore | None:
    per_task: dict[str, list[ScorePair]] = defaultdict(list)
    n_rows = 0
    for r in rows:
        if r.ok:
            per_task[r.task_id].append(r.scores)
            n_rows += 1
    if not per_task:
        return None
    fmts = [sum(s.format_score for s in v) / len(v) for v in per_task.values()]
    cors = [sum(s.correctness_score for s in v) / len(v) for v in per_task.values()]
    return MeanScore(sum(fmts) / len(fmts), sum(cors) / len(cors), len(per_task), n_rows)


def summarize(rows: Sequence[EpisodeResult]) -> SweepSummary:
    """Average episode scores per task, then across tasks (failed rows excluded)."""
    groups: dict[tuple, list[EpisodeResult]] = defaultdict(list)
    for r in rows:
        groups[(_key(r), None)].append(r)
        groups[(_key(r), r.category)].append(r)
    s = SweepSummary()
    for (key, cat), members in groups.items():
        m = _mean_of_task_means(members)
        if m is None:
            continue
        if isinstance(key, int):
            if cat is None:
                s.per_layer[key] = m
            else:
                s.per_layer_category[(key, cat)] = m
        elif cat is None:
            s.baselines[key] = m
        else:
            s.baseline_category[(key, cat)] = m
    s.n_tasks = len({r.task_id for r in rows})
    s.n_episodes = len({(r.task_id, r.episode) for r in rows})
    s.processed = len(rows)
    s.failed = sum(1 for r in rows if not r.ok)
    return s


@dataclass
class EpisodeContext:
    task: TaskRecord
    episode: Episode
    fewshot_text: str
    fewshot_sep: int
    zeroshot_text: str
    zeroshot_sep: int
    expected: str
    test_input: str


def _context(task: TaskRecord, ep: Episode, backend: Backend, template: PromptTemplate) -> EpisodeContext:
    fs_text, fs_sep = render_fewshot(task, ep, template, backend)
    test = task.pairs[ep.test_index]
    zs_text, zs_sep = render_zeroshot(test.input, template, backend)
    return EpisodeContext(task, ep, fs_text, fs_sep, zs_text, zs_sep, test.output, test.input)


def _judge_row(ctx: EpisodeContext, judge: Judge, condition: str, layer: int | None,
               produce: Callable[[], str]) -> EpisodeResult:
    base = dict(task_id=ctx.task.task_id, episode=ctx.episode.index, seed=ctx.episode.seed,
                condition=condition, layer=layer, judge_kind=judge.kind, category=ctx.task.category)
    try:
        output = produce()
    except ROW_ERRORS as exc:
        return EpisodeResult(output="", scores=None, error=f"{type(exc).__name__}: {exc}", **base)
    req = JudgeRequest(ctx.task.instruction, ctx.test_input, ctx.expected, output.strip())
    try:
        scores = judge.score(req)
    except ROW_ERRORS as exc:
        return EpisodeResult(output=output, scores=None, error=f"{type(exc).__name__}: {exc}", **base)
    return EpisodeResult(output=output, scores=scores, **base)


def run_baselines(task: TaskRecord, episode: Episode, backend: Backend, judge: Judge,
                  template: PromptTemplate = DEFAULT_TEMPLATE,
                  params: GenerationParams = GenerationParams()) -> tuple[EpisodeResult, EpisodeResult]:
    ctx = _context(task, episode, backend, template)
    return _baselines(ctx, backend, judge, params)


def _baselines(ctx: EpisodeContext, backend: Backend, judge: Judge, params: GenerationParams):
    zs = _judge_row(ctx, judge, ZERO_SHOT, None,
                    lambda: backend.generate(backend.tokenize(ctx.zeroshot_text), (), params).text)
    fs = _judge_row(ctx, judge, FEW_SHOT, None,
                    lambda: backend.generate(backend.tokenize(ctx.fewshot_text), (), params).text)
    return zs, fs


def _episode_rows(task: TaskRecord, ep: Episode, backend: Backend, judge: Judge, layers: Sequence[int],
                  template: PromptTemplate, params: GenerationParams, baselines: bool) -> list[EpisodeResult]:
    try:
        ctx = _context(task, ep, backend, template)
    except ROW_ERRORS as exc:
        err = f"{type(exc).__name__}: {exc}"
        conds = ([(ZERO_SHOT, None), (FEW_SHOT, None)] if baselines else []) + [(TASK_VECTOR, l) for l in layers]
        return [EpisodeResult(task.task_id, ep.index, ep.seed, c, l, "", None, judge.kind, task.category, err)
                for c, l in conds]
    rows = list(_baselines(ctx, backend, judge, params)) if baselines else []
    capture = None
    try:
        capture = backend.forward_capture(backend.tokenize(ctx.fewshot_text))
    except ROW_ERRORS as exc:
        capture_error = exc
    for layer in layers:
        def produce(layer=layer):
            if capture is None:
                raise capture_error
            tv = TaskVector(layer, capture[layer, ctx.fewshot_sep].copy(), ctx.fewshot_sep,
                            prompt_hash(ctx.fewshot_text), (ctx.fewshot_sep, ctx.fewshot_sep + 1), backend.backend_id)
            return inject_and_generate(backend, ctx.zeroshot_text, ctx.zeroshot_sep, tv, params).text
        rows.append(_judge_row(ctx, judge, TASK_VECTOR, layer, produce))
    return rows


def run_layer_sweep(taskset: TaskSet | Sequence[TaskRecord], backend: Backend, judge: Judge,
                    layers: Sequence[int] | None = None, episodes_per_task: int = 10, seed: int = 0,
                    k_shots: int = 7, template: PromptTemplate = DEFAULT_TEMPLATE,
                    params: GenerationParams = GenerationParams(), baselines: bool = True,
                    workers: int = 1, backend_factory: Callable[[], Backend] | None = None,
                    judge_factory: Callable[[], Judge] | None = None,
                    on_row: Callable[[EpisodeResult], None] | None = None) -> SweepResult:
    """Extract at every layer, inject into the zero-shot query, judge; plus both baselines."""
    tasks = list(taskset.tasks if isinstance(taskset, TaskSet) else taskset)
    layers = list(range(backend.num_layers)) if layers is None else list(layers)
    for l in layers:
        if not 0 <= l < backend.num_layers:
            raise InterventionError(f"layer {l} out of range (backend has {backend.num_layers})")
    for t in tasks:
        bad = validate_task(t, Grade.EPISODE)
        if bad:
            raise ValueError(f"task {t.task_id} is not episode grade: {bad[0].kind}")
    if len({t.task_id for t in tasks}) != len(tasks):
        raise ValueError("duplicate task ids in sweep input")

    def run_task(t: TaskRecord, b: Backend, j: Judge) -> list[EpisodeResult]:
        out = []
        for ep in sample_episodes(t, episodes_per_task, k_shots, seed):
            out.extend(_episode_rows(t, ep, b, j, layers, template, params, baselines))
        return out

    results: list[list[EpisodeResult]]
    if workers <= 1 or len(tasks) <= 1:
        results = [run_task(t, backend, judge) for t in tasks]
    else:
        if backend_factory is None:
            raise ValueError("parallel sweeps need a backend_factory (backends are not shareable)")
        local = threading.local()

        def worker(t: TaskRecord):
            if not hasattr(local, "backend"):
                local.backend = backend_factory()
                local.judge = judge_factory() if judge_factory else judge
            return run_task(t, local.backend, local.judge)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(worker, tasks))
    rows = [r for chunk in results for r in chunk]
    if on_row is not None:
        for r in rows:
            on_row(r)
    summary = summarize(rows)
    summary.n_tasks = len(tasks)
    return SweepResult(summary, rows, [t.task_id for t in tasks])


def fix_layer_and_run(taskset, backend: Backend, judge: Judge, layer: int = 15, **kwargs) -> SweepResult:
    if not 0 <= layer < backend.num_layers:
        raise InterventionError(f"layer {layer} out of range (backend has {backend.num_layers})")
    return run_layer_sweep(taskset, backend, judge, layers=[layer], **kwargs)


def select_subset(taskset: TaskSet, n: int | None, seed: int = 0) -> TaskSet:
    """Seeded random subset of ``n`` tasks, kept in bundle order."""
    if n is None or n >= len(taskset.tasks):
        return taskset
    chosen = set(random.Random(seed).sample(range(len(taskset.tasks)), n))
    return taskset.subset([t.task_id for i, t in enumerate(taskset.tasks) if i in chosen])


# -- boost / deficit regions -------------------------------------------------------

@dataclass(frozen=True)
class RegionThresholds:
    r1_boost_min: float = 4.0
    r1_deficit_max: float = 2.0
    r2_boost_max: float = 1.0
    r2_deficit_min: float = 4.0

    def label(self, boost: float, deficit: float) -> str:
        if boost >= self.r1_boost_min and deficit <= self.r1_deficit_max:
            return "region_1"
        if boost <= self.r2_boost_max and deficit >= self.r2_deficit_min:
            return "region_2"
        return "none"


@dataclass(frozen=True)
class RegionPoint:
    task_id: str
    boost: float
    deficit: float
    zero_shot: float
    task_vector: float
    few_shot: float
    region: str
    category: str = ""


@dataclass
class RegionReport:
    layer: int
    thresholds: RegionThresholds
    points: list[RegionPoint]
    notes: list[str]

    def counts(self) -> dict[str, int]:
        out = {"region_1": 0, "region_2": 0, "none": 0}
        for p in self.points:
            out[p.region] += 1
        return out


def region_analysis(rows: Sequence[EpisodeResult], layer: int,
                    thresholds: RegionThresholds = RegionThresholds()) -> RegionReport:
    by_task: dict[str, dict[str, list[int]]] = defaultdict(lambda: defaultdict(list))
    cats: dict[str, str] = {}
    order: list[str] = []
    for r in rows:
        if r.task_id not in cats:
            order.append(r.task_id)
            cats[r.task_id] = r.category
        if not r.ok or (r.condition == TASK_VECTOR and r.layer != layer):
            continue
        by_task[r.task_id][r.condition].append(r.scores.correctness_score)
    points, notes = [], []
    for tid in order:
        conds = by_task.get(tid, {})
        missing = [c for c in (ZERO_SHOT, TASK_VECTOR, FEW_SHOT) if not conds.get(c)]
        if missing:
            notes.append(f"{tid}: skipped, no scored rows for {', '.join(missing)}")
            continue
        zs, tv, fs = (sum(conds[c]) / len(conds[c]) for c in (ZERO_SHOT, TASK_VECTOR, FEW_SHOT))
        boost, deficit = tv - zs, fs - tv
        points.append(RegionPoint(tid, boost, deficit, zs, tv, fs, thresholds.label(boost, deficit), cats[tid]))
    return RegionReport(layer, thresholds, points, notes)


__all__ = [
    "EpisodeResult", "FEW_SHOT", "MeanScore", "RegionPoint", "RegionReport", "RegionThresholds",
    "SweepResult", "SweepSummary", "TASK_VECTOR", "ZERO_SHOT", "fix_layer_and_run", "region_analysis",
    "run_baselines", "run_layer_sweep", "select_subset", "summarize",
]
