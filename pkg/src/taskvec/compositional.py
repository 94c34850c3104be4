"""Car description to JSON: token influence grids and sub-task vector strategies.

A prompt holds seven ``description -> json`` demonstrations followed by a test
description. Each JSON object has the keys color, city and model in that order.
Hidden states at punctuation tokens inside the last demonstration's JSON are
transplanted into the zero-shot pass to see which of them restore which output
token.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import carpools
from .backend.base import (
    Backend,
    BackendError,
    GenerationParams,
    HiddenCapture,
    InterventionError,
    InterventionSpec,
    TokenSeq,
)
from .engine import DEFAULT_TEMPLATE, PromptTemplate, TemplateError, separator_positions

log = logging.getLogger(__name__)

ATTRIBUTES = ("color", "city", "model")
ROLES = ("key_1", "key_2", "key_3", "value_1", "value_2", "value_3")
STRATEGIES = ("natural", "classic", "subtask")
NATURAL = "NATURAL"
_ONE_STEP = GenerationParams(max_tokens=1, stop_tokens=())


class ConfigurationError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class CarPools:
    colors: tuple[str, ...] = carpools.COLORS
    cities: tuple[str, ...] = carpools.CITIES
    models: Mapping[str, str] = field(default_factory=lambda: dict(carpools.MODELS))
    engines: tuple[str, ...] = carpools.ENGINES
    drivetrains: tuple[str, ...] = carpools.DRIVETRAINS
    interiors: tuple[str, ...] = carpools.INTERIORS
    extras: tuple[str, ...] = carpools.EXTRAS
    templates: tuple[str, ...] = carpools.DESCRIPTION_TEMPLATES


DEFAULT_POOLS = CarPools()


@dataclass(frozen=True)
class CarRecord:
    color: str
    city: str
    model: str
    filler: Mapping[str, str]
    template: int = 0

    def __post_init__(self) -> None:
        for name in ATTRIBUTES:
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")

    def attributes(self) -> tuple[str, str, str]:
        return self.color, self.city, self.model


def gen_car_record(seed: int, pools: CarPools = DEFAULT_POOLS) -> CarRecord:
    rng = random.Random(seed)
    color = rng.choice(pools.colors)
    city = rng.choice(pools.cities)
    model = rng.choice(sorted(pools.models))
    filler = {
        "make": pools.models[model],
        "year": str(rng.randint(1998, 2025)),
        "hp": str(rng.randrange(90, 800, 5)),
        "engine": rng.choice(pools.engines),
        "top_speed": str(rng.randrange(160, 340, 5)),
        "drivetrain": rng.choice(pools.drivetrains),
        "interior": rng.choice(pools.interiors),
        "extra": rng.choice(pools.extras),
        "mileage": f"{rng.randrange(0, 250_000, 10):,}",
        "vin": "".join(rng.choice(carpools.VIN_ALPHABET) for _ in range(17)),
        "price": f"{rng.randrange(5_000, 600_000, 500):,}",
    }
    return CarRecord(color, city, model, filler, rng.randrange(len(pools.templates)))


def render_description(record: CarRecord, pools: CarPools = DEFAULT_POOLS) -> str:
    values = {"color": record.color, "city": record.city, "model": record.model, **record.filler}
    return pools.templates[record.template % len(pools.templates)].format(**values)


@dataclass(frozen=True)
class JsonTarget:
    """The rendered object plus character spans of every key and value (quotes excluded)."""

    text: str
    key_spans: tuple[tuple[int, int], ...]
    value_spans: tuple[tuple[int, int], ...]

    def parse(self) -> dict:
        return json.loads(self.text)


def render_json(record: CarRecord) -> JsonTarget:
    obj = dict(zip(ATTRIBUTES, record.attributes()))
    text = json.dumps(obj, separators=(",", ":"), ensure_ascii=False)
    keys, values, pos = [], [], 0
    for k, v in obj.items():
        ks = text.index(json.dumps(k), pos) + 1
        keys.append((ks, ks + len(k)))
        vs = text.index(json.dumps(v, ensure_ascii=False), ks + len(k)) + 1
        values.append((vs, vs + len(json.dumps(v, ensure_ascii=False)) - 2))
        pos = values[-1][1]
    return JsonTarget(text, tuple(keys), tuple(values))


def check_pools(backend: Backend, pools: CarPools = DEFAULT_POOLS) -> None:
    """Every color must be one token inside a rendered JSON object."""
    probe_city, probe_model = pools.cities[0], sorted(pools.models)[0]
    for color in pools.colors:
        target = render_json(CarRecord(color, probe_city, probe_model, {}))
        tokens = backend.tokenize(target.text)
        s, e = target.value_spans[0]
        first, last = tokens.token_at_char(s), tokens.token_at_char(e - 1)
        if first != last:
            raise ConfigurationError(f"color {color!r} is not a single token for {backend.backend_id}")


# -- prompt assembly ---------------------------------------------------------------

@dataclass(frozen=True)
class JsonLayout:
    """Token positions of the structural tokens of one JSON object inside a sequence."""

    span: tuple[int, int]
    open_pos: int
    colon_pos: tuple[int, int, int]
    comma_pos: tuple[int, int]
    key_first: tuple[int, int, int]
    value_first: tuple[int, int, int]


def _token_with(tokens: TokenSeq, char_index: int, char: str) -> int:
    pos = tokens.token_at_char(char_index)
    surface = tokens.texts[pos]
    if char not in surface or any(c.isalnum() for c in surface):
        raise AlignmentError(f"no distinct {char!r} token at character {char_index} (found {surface!r})")
    return pos


def locate_json(tokens: TokenSeq, start: int, target: JsonTarget, strict: bool = True) -> JsonLayout:
    """Map ``target`` (placed at character ``start`` of ``tokens.text``) to token positions."""
    text = target.text
    end = start + len(text)
    if tokens.text[start:end] != text:
        raise TemplateError("JSON text not found at the given offset")
    first, last = tokens.token_at_char(start), tokens.token_at_char(end - 1)
    offsets = tokens.offsets()
    if offsets[last][1] != end or tokens.text[offsets[first][0]:start].strip():
        raise TemplateError("JSON output does not sit on token boundaries")
    key_first = tuple(tokens.token_at_char(start + s) for s, _ in target.key_spans)
    value_first = tuple(tokens.token_at_char(start + s) for s, _ in target.value_spans)
    # structural characters: '{' then ':' before each value, ',' before keys 2 and 3
    try:
        open_pos = _token_with(tokens, start, "{")
        colons = tuple(_token_with(tokens, start + s - 2, ":") for s, _ in target.value_spans)
        commas = tuple(_token_with(tokens, start + s - 2, ",") for s, _ in target.key_spans[1:])
    except AlignmentError:
        if strict:
            raise
        open_pos, colons, commas = -1, (-1, -1, -1), (-1, -1)
    return JsonLayout((first, last + 1), open_pos, colons, commas, key_first, value_first)


def align_subtask_source(role: str, layout: JsonLayout) -> int:
    """Demo token whose state carries the sub-task for ``role``."""
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    kind, idx = role.split("_")
    i = int(idx) - 1
    if kind == "value":
        pos = layout.colon_pos[i]
    elif i == 0:
        pos = layout.open_pos
    else:
        pos = layout.comma_pos[i - 1]
    if pos < 0:
        raise AlignmentError(f"no source token for {role}")
    return pos


@dataclass(frozen=True)
class CompositionalPrompt:
    demos: tuple[CarRecord, ...]
    test: CarRecord
    fewshot_text: str
    fewshot_tokens: TokenSeq
    separator_position: int
    demo7: JsonLayout
    demo7_json: str
    zeroshot_tokens: TokenSeq
    zeroshot_separator: int
    reference: TokenSeq
    test_json: JsonTarget
    test_layout: JsonLayout

    @property
    def demo7_output_span(self) -> tuple[int, int]:
        return self.demo7.span

    def role_step(self, role: str) -> int:
        """Index into :attr:`reference` of the first target token for ``role``."""
        kind, idx = role.split("_")
        pos = (self.test_layout.key_first if kind == "key" else self.test_layout.value_first)[int(idx) - 1]
        return pos - len(self.zeroshot_tokens)

    def forced(self, step: int) -> TokenSeq:
        """Zero-shot prompt followed by the first ``step`` reference tokens."""
        return self.zeroshot_tokens + self.reference[:step]


def build_compositional_prompt(backend: Backend, records: Sequence[CarRecord],
                               template: PromptTemplate = DEFAULT_TEMPLATE,
                               pools: CarPools = DEFAULT_POOLS) -> CompositionalPrompt:
    if len(records) != 8:
        raise ValueError("need 7 demonstration records and 1 test record")
    if len({(render_description(r, pools), r.attributes()) for r in records}) != 8:
        raise ValueError("records must be distinct")
    *demos, test = records
    pairs = [(render_description(r, pools), render_json(r)) for r in demos]
    test_desc = render_description(test, pools)
    text = template.render([(d, j.text) for d, j in pairs], test_desc)
    tokens = backend.tokenize(text)
    seps = separator_positions(tokens, text, template.separator)
    if len(seps) != 8 or seps[-1] != len(tokens) - 1:
        raise TemplateError(f"expected 8 separators ending the prompt, found {len(seps)}")
    demo7_desc, demo7_json = pairs[-1]
    block = template.pair(demo7_desc, demo7_json.text)
    block_start = text.rindex(block, 0, len(text) - len(template.query(test_desc)))
    json_start = block_start + block.rindex(demo7_json.text)
    layout = locate_json(tokens, json_start, demo7_json)

    zs_text = template.query(test_desc)
    zs_tokens = backend.tokenize(zs_text)
    test_json = render_json(test)
    pair_text = template.pair(test_desc, test_json.text)
    if not pair_text.startswith(zs_text):
        raise TemplateError("pair format does not extend the query format")
    full = backend.tokenize(pair_text)
    if full.ids[:len(zs_tokens)] != zs_tokens.ids:
        raise TemplateError("reference continuation changes the tokenization of the query")
    test_layout = locate_json(full, pair_text.rindex(test_json.text), test_json, strict=False)
    return CompositionalPrompt(tuple(demos), test, text, tokens, seps[-1], layout, demo7_json.text,
                               zs_tokens, len(zs_tokens) - 1, full[len(zs_tokens):], test_json, test_layout)


def make_records(seed: int, n: int = 8, pools: CarPools = DEFAULT_POOLS) -> list[CarRecord]:
    """``n`` records with distinct attribute triples drawn from a seeded stream."""
    rng = random.Random(seed)
    out, seen = [], set()
    while len(out) < n:
        rec = gen_car_record(rng.getrandbits(48), pools)
        if rec.attributes() not in seen:
            seen.add(rec.attributes())
            out.append(rec)
    return out


def prompt_for_seed(backend: Backend, seed: int, template: PromptTemplate = DEFAULT_TEMPLATE,
                    pools: CarPools = DEFAULT_POOLS) -> CompositionalPrompt:
    return build_compositional_prompt(backend, make_records(seed, 8, pools), template, pools)


# -- influence grid -------------------------------------------------------------------

@dataclass(frozen=True)
class InfluenceGrid:
    rows: tuple[str, ...]
    cols: tuple[str, ...]
    cells: np.ndarray
    layer: int
    failed_cells: tuple[tuple[int, int], ...] = ()
    row_reference: str = "ground_truth_teacher_forced"

    def __post_init__(self) -> None:
        if self.cells.shape != (len(self.rows), len(self.cols)):
            raise ValueError("cell matrix does not match labels")
        if self.cols.count(NATURAL) != 1 or self.cols[-1] != NATURAL:
            raise ValueError("the NATURAL column must appear exactly once, last")
        if not np.isin(self.cells, (0, 1)).all():
            raise ValueError("grid cells must be binary")

    def to_csv(self) -> str:
        import csv
        import io

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "target", *self.cols])
        for i, (label, row) in enumerate(zip(self.rows, self.cells)):
            w.writerow([i, label, *(int(c) for c in row)])
        return buf.getvalue()


def influence_grid(backend: Backend, prompt: CompositionalPrompt, layer: int,
                   capture: HiddenCapture | None = None) -> InfluenceGrid:
    """Cell (i, j) is 1 iff transplanting demo token j's state at ``layer`` into step i
    of the teacher-forced zero-shot pass makes the greedy next token the reference token i."""
    if not 0 <= layer < backend.num_layers:
        raise InterventionError(f"layer {layer} out of range (backend has {backend.num_layers})")
    capture = capture or backend.forward_capture(prompt.fewshot_tokens)
    lo, hi = prompt.demo7.span
    ref = prompt.reference
    cells = np.zeros((len(ref), hi - lo + 1), dtype=np.int8)
    failed = []
    for i in range(len(ref)):
        context = prompt.forced(i)
        pos = len(context) - 1
        target = ref.ids[i]
        for j in range(lo, hi + 1):
            ivs = [] if j == hi else [InterventionSpec(layer, pos, capture[layer, j])]
            try:
                out = backend.generate(context, ivs, _ONE_STEP)
            except BackendError as exc:
                log.warning("grid cell (%d, %d) failed: %s", i, j - lo, exc)
                failed.append((i, j - lo))
                continue
            cells[i, j - lo] = int(out.tokens.ids[0] == target)
    cols = tuple(prompt.fewshot_tokens.texts[lo:hi]) + (NATURAL,)
    return InfluenceGrid(tuple(ref.texts), cols, cells, layer, tuple(failed))


# -- strategy comparison ---------------------------------------------------------------

@dataclass(frozen=True)
class StrategyResult:
    strategy: str
    per_role: Mapping[str, float]
    n_pairs: int
    n_failed: int = 0
    per_pair: tuple[Mapping[str, float], ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        for role, p in self.per_role.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability for {role} outside [0, 1]: {p}")


def role_probabilities(backend: Backend, prompt: CompositionalPrompt, layer: int, strategy: str,
                       capture: HiddenCapture | None = None, source: str = "fewshot") -> dict[str, float]:
    """Probability of the true token at each role under teacher forcing.

    ``source="self"`` aligns sub-task sources inside the zero-shot pass itself
    (a consistency check: it must match the natural strategy).
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if not 0 <= layer < backend.num_layers:
        raise InterventionError(f"layer {layer} out of range")
    if strategy != "natural" and capture is None:
        capture = backend.forward_capture(prompt.fewshot_tokens)
    layout = prompt.demo7
    if strategy == "subtask" and source == "self":
        full = prompt.forced(len(prompt.reference))
        capture = backend.forward_capture(full)
        layout = locate_json(full, len(full.text) - len(prompt.test_json.text), prompt.test_json)
    out = {}
    for role in ROLES:
        step = prompt.role_step(role)
        context = prompt.forced(step)
        pos = len(context) - 1
        if strategy == "natural":
            ivs = []
        elif strategy == "classic":
            ivs = [InterventionSpec(layer, prompt.zeroshot_separator, capture[layer, prompt.separator_position])]
        else:
            ivs = [InterventionSpec(layer, pos, capture[layer, align_subtask_source(role, layout)])]
        res = backend.generate(context, ivs, _ONE_STEP)
        out[role] = res.prob(0, prompt.reference.ids[step])
    return out


def strategy_eval(backend: Backend, n_pairs: int, layer: int, strategy: str, seed: int = 0,
                  template: PromptTemplate = DEFAULT_TEMPLATE, pools: CarPools = DEFAULT_POOLS,
                  source: str = "fewshot") -> StrategyResult:
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    return compare_strategies(backend, n_pairs, layer, (strategy,), seed, template, pools, source)[strategy]


def compare_strategies(backend: Backend, n_pairs: int, layer: int, strategies: Sequence[str] = STRATEGIES,
                       seed: int = 0, template: PromptTemplate = DEFAULT_TEMPLATE,
                       pools: CarPools = DEFAULT_POOLS, source: str = "fewshot") -> dict[str, StrategyResult]:
    """Evaluate several strategies on the same ``n_pairs`` seeded prompt pairs."""
    per: dict[str, list[dict[str, float]]] = {s: [] for s in strategies}
    failed = {s: 0 for s in strategies}
    for k in range(n_pairs):
        try:
            prompt = prompt_for_seed(backend, pair_seed(seed, k), template, pools)
            capture = backend.forward_capture(prompt.fewshot_tokens)
        except (BackendError, TemplateError, AlignmentError) as exc:
            log.warning("pair %d skipped: %s", k, exc)
            for s in strategies:
                failed[s] += 1
            continue
        for s in strategies:
            try:
                per[s].append(role_probabilities(backend, prompt, layer, s, capture, source))
            except (BackendError, AlignmentError) as exc:
                log.warning("pair %d, %s failed: %s", k, s, exc)
                failed[s] += 1
    out = {}
    for s in strategies:
        rows = per[s]
        means = {r: (sum(p[r] for p in rows) / len(rows) if rows else 0.0) for r in ROLES}
        out[s] = StrategyResult(s, means, len(rows), failed[s], tuple(rows))
    return out


def pair_seed(seed: int, k: int) -> int:
    return seed * 1_000_003 + k


__all__ = [
    "ATTRIBUTES", "AlignmentError", "CarPools", "CarRecord", "CompositionalPrompt", "ConfigurationError",
    "DEFAULT_POOLS", "InfluenceGrid", "JsonLayout", "JsonTarget", "NATURAL", "ROLES", "STRATEGIES",
    "StrategyResult", "align_subtask_source", "build_compositional_prompt", "check_pools", "compare_strategies",
    "gen_car_record", "influence_grid", "locate_json", "make_records", "pair_seed", "prompt_for_seed",
    "render_description", "render_json", "role_probabilities", "strategy_eval",
]
