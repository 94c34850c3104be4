"""Command line: ``taskvec dataset filter|generate|validate|stats``, ``sweep``, ``regions``,
``grid`` and ``strategies``.

Exit status: 0 success, 1 hard failure (or too many failed episodes), 2 config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .backend.base import Backend, BackendError, GenerationParams
from .clients import ClientError, RetryPolicy, make_client
from .config import ConfigError, RunConfig, apply_overrides, dump_config, load_config
from .dataset.core import (
    BundleParseError,
    Grade,
    IntegrityError,
    TaskSet,
    bucket_categories,
    load_taskset,
    save_taskset,
    validate_task,
)
from .dataset.pipeline import (
    EntryReport,
    Label,
    PipelineError,
    PipelineReport,
    classify_entries,
    generate_tasks,
    load_source_entries,
    run_pipeline,
)
from .engine import PromptTemplate, TemplateError
from .experiments import RegionThresholds, fix_layer_and_run, region_analysis, run_layer_sweep, select_subset
from .judge import Judge, LLMJudge, OracleJudge
from .rundir import RunDir

log = logging.getLogger("taskvec")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class HardFailure(RuntimeError):
    pass


# -- factories ----------------------------------------------------------------------

def make_backend(cfg: RunConfig) -> Backend:
    b = cfg.backend
    if b.kind == "toy":
        from .backend.toy import ToyConfig, toy_backend

        try:
            toy = ToyConfig(num_layers=b.toy.num_layers, encoding_layer=b.toy.encoding_layer, margin=b.toy.margin,
                            context_limit=b.context_limit or 4096)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return toy_backend(toy)
    from .backend.hf import HFBackend

    return HFBackend.from_pretrained(b.model_name, context_limit=b.context_limit, device=b.device, dtype=b.dtype)


def make_judge(cfg: RunConfig) -> Judge:
    if cfg.judge.kind == "oracle":
        return OracleJudge()
    c = cfg.judge.client
    client = make_client(c.mode, c.fixtures, c.endpoint, c.model, c.token_env, c.timeout, c.label)
    return LLMJudge(client, max_retries=cfg.judge.max_retries)


def _generator(cfg: RunConfig):
    c = cfg.pipeline.generator
    return make_client(c.mode, c.fixtures, c.endpoint, c.model, c.token_env, c.timeout, c.label)


def load_tasks(cfg: RunConfig) -> TaskSet:
    if cfg.dataset == "toy":
        from .toytasks import toy_taskset

        return toy_taskset()
    return load_taskset(cfg.dataset)


def resolve_layer(cfg: RunConfig, backend: Backend) -> int:
    layer = cfg.layer if cfg.layer is not None else getattr(backend, "encoding_layer", 15)
    _check_layers([layer], backend)
    return layer


def _check_layers(layers, backend: Backend) -> None:
    for l in layers or ():
        if not 0 <= l < backend.num_layers:
            raise ConfigError(f"layer {l} out of range for {backend.backend_id} ({backend.num_layers} layers)")


def _template(cfg: RunConfig) -> PromptTemplate:
    return PromptTemplate(**cfg.template.model_dump())


def _params(cfg: RunConfig) -> GenerationParams:
    return GenerationParams(max_tokens=cfg.generation.max_tokens, stop_tokens=tuple(cfg.generation.stop_tokens))


def _thresholds(cfg: RunConfig) -> RegionThresholds:
    return RegionThresholds(**cfg.regions.model_dump())


# -- run directory helpers --------------------------------------------------------------

def _open_run(command: str, cfg: RunConfig, raw: str, out: str | None) -> RunDir:
    resolved = dump_config(cfg)
    if out is None:
        digest = hashlib.sha256(resolved.encode()).hexdigest()[:8]
        out = str(Path(cfg.output_dir) / f"{command}-{digest}")
    rd = RunDir(out)
    rd.snapshot(raw, resolved)
    return rd


def _manifest(rd: RunDir, command: str, cfg: RunConfig, backend: Backend | None = None,
              judge: Judge | None = None, **extra) -> None:
    rd.manifest(command, dump_config(cfg),
                backend_id=backend.backend_id if backend else None,
                judge_id=judge.judge_id if judge else None,
                seeds={"episodes": cfg.seed, "compositional": cfg.compositional.seed},
                template=cfg.template.model_dump(), generation=cfg.generation.model_dump(), **extra)


def _write_transcripts(rd: RunDir, judge: Judge) -> None:
    if isinstance(judge, LLMJudge):
        rd.write_lines("judge_transcripts.jsonl", (t.to_json() for t in judge.transcripts))


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True, ensure_ascii=False))


# -- dataset commands ----------------------------------------------------------------

def _entries(cfg: RunConfig, path: str | None):
    src = path or cfg.pipeline.source
    if not src:
        raise ConfigError("no source entries: pass --input or set pipeline.source")
    return load_source_entries(Path(src).read_text(encoding="utf-8"))


def _policy(cfg: RunConfig) -> RetryPolicy:
    return RetryPolicy(cfg.pipeline.attempts, cfg.pipeline.base_delay)


def cmd_dataset(args, cfg: RunConfig, raw: str) -> int:
    sub = args.dataset_cmd
    if sub in ("validate", "stats"):
        taskset = load_taskset(args.bundle) if args.bundle else load_tasks(cfg)
        if sub == "validate":
            grade = Grade(args.grade)
            bad = 0
            for t in taskset.tasks:
                for v in validate_task(t, grade):
                    bad += 1
                    _print({"task_id": t.task_id, "violation": v.kind, "detail": v.detail})
            _print({"tasks": len(taskset.tasks), "violations": bad, "grade": grade.value})
            return EXIT_FAIL if bad else EXIT_OK
        from .reporting import category_csv, category_table

        counts = bucket_categories(taskset, args.top_n)
        sys.stdout.write(category_table(counts))
        if args.out:
            rd = RunDir(args.out)
            rd.write_text("categories.csv", category_csv(counts))
        return EXIT_OK

    rd = _open_run(f"dataset-{sub}", cfg, raw, args.out)
    entries = _entries(cfg, args.input)
    client = _generator(cfg)
    _manifest(rd, f"dataset {sub}", cfg, generator=client.label, generator_mode=client.mode)
    if sub == "filter":
        reports = classify_entries(entries, client, cfg.pipeline.batch_size, _policy(cfg))
        report = PipelineReport(reports)
        rd.write_text("classification.jsonl", report.dumps())
        good = [e for e, r in zip(entries, reports) if r.verdict == Label.GOOD.value]
        rd.write_lines("good_entries.jsonl", (json.dumps({"instruction": e.instruction, "input": e.example_input,
                                                          "output": e.example_output}, ensure_ascii=False)
                                              for e in good))
        _print({"verdicts": report.verdict_counts, "status": report.status_counts, "run_dir": str(rd.path)})
        return EXIT_OK
    # generate
    if args.skip_classify:
        reports = [EntryReport(e.instruction, e.example_input, Label.GOOD.value, status="classified") for e in entries]
        taskset = generate_tasks(entries, reports, client, cfg.pipeline.num_examples, cfg.pipeline.keep,
                                 _policy(cfg), workers=cfg.workers)
        report = PipelineReport(reports)
    else:
        result = run_pipeline(entries, client, cfg.pipeline.num_examples, cfg.pipeline.keep,
                              cfg.pipeline.batch_size, _policy(cfg), workers=cfg.workers)
        taskset, report = result.taskset, result.report
    save_taskset(taskset, rd.file("taskset.jsonl"))
    rd.write_text("pipeline_report.jsonl", report.dumps())
    _print({"tasks": len(taskset.tasks), "verdicts": report.verdict_counts, "status": report.status_counts,
            "run_dir": str(rd.path)})
    return EXIT_OK


# -- experiment commands ----------------------------------------------------------------

def _sweep_common(cfg: RunConfig, backend: Backend):
    return select_subset(load_tasks(cfg), cfg.tasks, cfg.seed)


def _run_sweep(cfg: RunConfig, backend: Backend, judge: Judge, layers):
    taskset = _sweep_common(cfg, backend)
    factory = (lambda: make_backend(cfg)) if cfg.workers > 1 else None
    judge_factory = (lambda: make_judge(cfg)) if cfg.workers > 1 and cfg.judge.kind == "llm" else None
    result = run_layer_sweep(taskset, backend, judge, layers, cfg.episodes_per_task, cfg.seed, cfg.k_shots,
                             _template(cfg), _params(cfg), workers=cfg.workers, backend_factory=factory,
                             judge_factory=judge_factory)
    return taskset, result


def _persist_sweep(rd: RunDir, result, cfg: RunConfig) -> None:
    from .reporting import summary_csv

    rd.write_lines("rows.jsonl", (r.to_json() for r in result.rows))
    summary = result.summary.to_dict()
    summary["failure_threshold"] = cfg.failure_threshold
    rd.write_json("summary.json", summary)
    rd.write_text("summary.csv", summary_csv(result.summary))
    rd.write_json("task_ids.json", result.task_ids)


def _failure_exit(summary, cfg: RunConfig) -> int:
    if summary.failure_rate > cfg.failure_threshold:
        log.error("%.1f%% of rows failed (threshold %.1f%%)", 100 * summary.failure_rate, 100 * cfg.failure_threshold)
        return EXIT_FAIL
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig, raw: str) -> int:
    from .plotting import plot_category_curves, plot_overall, plot_score_distribution

    backend, judge = make_backend(cfg), make_judge(cfg)
    _check_layers(cfg.layers, backend)
    if cfg.layer is not None:
        _check_layers([cfg.layer], backend)
    rd = _open_run("sweep", cfg, raw, args.out)
    _manifest(rd, "sweep", cfg, backend, judge, layers=cfg.layers)
    _, result = _run_sweep(cfg, backend, judge, cfg.layers)
    _persist_sweep(rd, result, cfg)
    _write_transcripts(rd, judge)
    s = result.summary
    if s.per_layer:
        plot_overall(s, rd.file("overall.png"))
        plot_category_curves(s, rd.file("categories.png"))
        best = max(s.per_layer, key=lambda l: (s.per_layer[l].correctness, -l))
        plot_score_distribution(result.rows, best, rd.file("distribution.png"))
    _print({"run_dir": str(rd.path), "tasks": s.n_tasks, "failed": s.failed, "processed": s.processed,
            "peak_layer": max(s.per_layer, key=lambda l: (s.per_layer[l].correctness, -l)) if s.per_layer else None})
    return _failure_exit(s, cfg)


def cmd_regions(args, cfg: RunConfig, raw: str) -> int:
    from .experiments import EpisodeResult
    from .plotting import plot_regions
    from .reporting import regions_csv

    rd = _open_run("regions", cfg, raw, args.out)
    backend, judge = make_backend(cfg), make_judge(cfg)
    layer = resolve_layer(cfg, backend)
    _manifest(rd, "regions", cfg, backend, judge, layer=layer, thresholds=cfg.regions.model_dump())
    status = EXIT_OK
    if args.rows:
        rows = [EpisodeResult.from_json(ln) for ln in Path(args.rows).read_text(encoding="utf-8").splitlines() if ln]
    else:
        taskset = _sweep_common(cfg, backend)
        result = fix_layer_and_run(taskset, backend, judge, layer, episodes_per_task=cfg.episodes_per_task,
                                   seed=cfg.seed, k_shots=cfg.k_shots, template=_template(cfg), params=_params(cfg))
        _persist_sweep(rd, result, cfg)
        _write_transcripts(rd, judge)
        rows = result.rows
        status = _failure_exit(result.summary, cfg)
    report = region_analysis(rows, layer, _thresholds(cfg))
    rd.write_text("regions.csv", regions_csv(report))
    rd.write_json("regions.json", {"layer": layer, "thresholds": cfg.regions.model_dump(),
                                   "counts": report.counts(), "notes": report.notes})
    plot_regions(report, rd.file("regions.png"))
    _print({"run_dir": str(rd.path), "layer": layer, "counts": report.counts(), "skipped": len(report.notes)})
    return status


def cmd_grid(args, cfg: RunConfig, raw: str) -> int:
    from .compositional import check_pools, influence_grid, pair_seed, prompt_for_seed
    from .plotting import plot_grid

    rd = _open_run("grid", cfg, raw, args.out)
    backend = make_backend(cfg)
    check_pools(backend)
    layer = resolve_layer(cfg, backend)
    _manifest(rd, "grid", cfg, backend, None, layer=layer, row_reference="ground_truth_teacher_forced")
    failed = 0
    for k in range(cfg.compositional.grid_pairs):
        prompt = prompt_for_seed(backend, pair_seed(cfg.compositional.seed, k), _template(cfg))
        rd.write_text(f"grid_{k}_prompt.txt", prompt.fewshot_text)
        grid = influence_grid(backend, prompt, layer)
        rd.write_text(f"grid_{k}.csv", grid.to_csv())
        plot_grid(grid, rd.file(f"grid_{k}.png"))
        failed += len(grid.failed_cells)
    _print({"run_dir": str(rd.path), "layer": layer, "grids": cfg.compositional.grid_pairs, "failed_cells": failed})
    return EXIT_FAIL if failed else EXIT_OK


def cmd_strategies(args, cfg: RunConfig, raw: str) -> int:
    from .compositional import check_pools, compare_strategies
    from .plotting import plot_strategies
    from .reporting import strategies_csv

    rd = _open_run("strategies", cfg, raw, args.out)
    backend = make_backend(cfg)
    check_pools(backend)
    layer = resolve_layer(cfg, backend)
    _manifest(rd, "strategies", cfg, backend, None, layer=layer)
    results = compare_strategies(backend, cfg.compositional.n_pairs, layer, seed=cfg.compositional.seed,
                                 template=_template(cfg))
    rd.write_text("strategies.csv", strategies_csv(results))
    plot_strategies(results, rd.file("strategies.png"))
    n = cfg.compositional.n_pairs
    worst = max(r.n_failed for r in results.values()) / n
    _print({"run_dir": str(rd.path), "layer": layer,
            "per_role": {s: dict(r.per_role) for s, r in results.items()}})
    return EXIT_FAIL if worst > cfg.failure_threshold else EXIT_OK


# -- argument parsing ---------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--layer", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tasks", type=int, help="random subset size")
    p.add_argument("--backend", choices=["toy", "real"])
    p.add_argument("--judge", choices=["oracle", "llm"])
    p.add_argument("--out", help="run directory (default: <output_dir>/<command>-<config digest>)")
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taskvec", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"taskvec {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="build and inspect task bundles")
    dsub = ds.add_subparsers(dest="dataset_cmd", required=True)
    for name in ("filter", "generate"):
        p = dsub.add_parser(name)
        _common(p)
        p.add_argument("--input", help="source entries (JSON array or JSON lines)")
        if name == "generate":
            p.add_argument("--skip-classify", action="store_true", help="treat every input entry as GOOD")
    for name in ("validate", "stats"):
        p = dsub.add_parser(name)
        _common(p)
        p.add_argument("--bundle", help="task bundle (default: the configured dataset)")
        if name == "validate":
            p.add_argument("--grade", choices=[g.value for g in Grade], default=Grade.DATASET.value)
        else:
            p.add_argument("--top-n", type=int, default=8)

    for name, hlp in (("sweep", "layer sweep with baselines"), ("regions", "boost/deficit region analysis"),
                      ("grid", "token influence grid on car-to-JSON prompts"),
                      ("strategies", "natural / classic / sub-task strategy comparison")):
        p = sub.add_parser(name, help=hlp)
        _common(p)
        if name == "regions":
            p.add_argument("--rows", help="reuse rows.jsonl from an earlier sweep")
    return parser


COMMANDS = {"dataset": cmd_dataset, "sweep": cmd_sweep, "regions": cmd_regions, "grid": cmd_grid,
            "strategies": cmd_strategies}


def _error(kind: str, exc: BaseException) -> None:
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}) + "\n")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, raw = load_config(args.config)
        cfg = apply_overrides(cfg, **{"layer": args.layer, "seed": args.seed, "tasks": args.tasks,
                                      "backend.kind": args.backend, "judge.kind": args.judge,
                                      "workers": args.workers})
        if not raw:
            raw = dump_config(cfg)
    except ConfigError as exc:
        _error("config", exc)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args, cfg, raw)
    except ConfigError as exc:
        _error("config", exc)
        return EXIT_CONFIG
    except (BackendError, ClientError, PipelineError, TemplateError, BundleParseError, IntegrityError,
            OSError, ValueError, HardFailure) as exc:
        _error("hard_failure", exc)
        return EXIT_FAIL


if __name__ == "__main__":
    raise SystemExit(main())
