"""Few-shot prompts, episode sampling, and task-vector extraction and injection."""

from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backend.base import (
    Backend,
    CapacityError,
    GenerationParams,
    GenerationResult,
    InterventionError,
    InterventionSpec,
    TokenSeq,
)
from .dataset.core import TaskRecord


_SLOT = re.compile(r"\{(input|output|separator)\}")


class TemplateError(ValueError):
    """The separator cannot be located consistently in the tokenized prompt."""


@dataclass(frozen=True)
class PromptTemplate:
    pair_format: str = "{input} {separator} {output}"
    separator: str = "->"
    pair_joiner: str = "\n"
    query_format: str = "{input} {separator}"

    def __post_init__(self) -> None:
        for slot in ("{input}", "{separator}", "{output}"):
            if slot not in self.pair_format:
                raise TemplateError(f"pair_format lacks {slot}")
        if not self.query_format.endswith("{separator}") or "{input}" not in self.query_format:
            raise TemplateError("query_format must contain {input} and end with {separator}")
        if not self.separator:
            raise TemplateError("separator must be non-empty")

    def _fill(self, fmt: str, **values: str) -> str:
        # one pass, so braces inside the values are left alone
        return _SLOT.sub(lambda m: values.get(m.group(1), m.group(0)), fmt)

    def pair(self, inp: str, out: str) -> str:
        return self._fill(self.pair_format, input=inp, output=out, separator=self.separator)

    def query(self, inp: str) -> str:
        return self._fill(self.query_format, input=inp, separator=self.separator)

    def render(self, demos: Sequence[tuple[str, str]], query: str) -> str:
        parts = [self.pair(i, o) for i, o in demos] + [self.query(query)]
        return self.pair_joiner.join(parts)

    def to_dict(self) -> dict:
        return {"pair_format": self.pair_format, "separator": self.separator,
                "pair_joiner": self.pair_joiner, "query_format": self.query_format}


DEFAULT_TEMPLATE = PromptTemplate()


@dataclass(frozen=True)
class Episode:
    task_id: str
    index: int
    shot_indices: tuple[int, ...]
    test_index: int
    seed: int

    def __post_init__(self) -> None:
        if len(set(self.shot_indices)) != len(self.shot_indices):
            raise ValueError("shot indices must be distinct")
        if self.test_index in self.shot_indices:
            raise ValueError("test index must not be a shot")


def _episode_rng(task_id: str, seed: int) -> random.Random:
    digest = hashlib.sha256(f"{task_id}:{seed}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def sample_episodes(task: TaskRecord, n_episodes: int = 10, k_shots: int = 7, seed: int = 0) -> list[Episode]:
    n = len(task.pairs)
    if n < k_shots + 1:
        raise CapacityError(f"task {task.task_id} has {n} pairs; {k_shots + 1} needed")
    rng = _episode_rng(task.task_id, seed)
    out = []
    for i in range(n_episodes):
        draw = rng.sample(range(n), k_shots + 1)
        out.append(Episode(task.task_id, i, tuple(draw[:k_shots]), draw[k_shots], seed))
    return out


def separator_positions(tokens: TokenSeq, text: str, separator: str) -> list[int]:
    """Token index of the last token covering each separator occurrence."""
    if tokens.text != text:
        raise TemplateError("tokenization does not reproduce the prompt text")
    positions, shapes = [], set()
    offsets = tokens.offsets()
    start = text.find(separator)
    while start != -1:
        end = start + len(separator)
        first, last = tokens.token_at_char(start), tokens.token_at_char(end - 1)
        positions.append(last)
        # how the separator sits in its tokens must not vary between occurrences
        shapes.add((start - offsets[first][0], offsets[last][1] - end, tokens.ids[first:last + 1]))
        start = text.find(separator, end)
    if len(shapes) > 1:
        raise TemplateError(f"separator {separator!r} tokenizes inconsistently across occurrences")
    return positions


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    tokens: TokenSeq
    separator_position: int
    n_separators: int


def _render(backend: Backend, text: str, template: PromptTemplate, expected: int) -> RenderedPrompt:
    tokens = backend.tokenize(text)
    seps = separator_positions(tokens, text, template.separator)
    if len(seps) != expected:
        raise TemplateError(f"expected {expected} separators, found {len(seps)}")
    if seps[-1] != len(tokens) - 1:
        raise TemplateError("prompt must end at the separator")
    return RenderedPrompt(text, tokens, seps[-1], len(seps))


def render_fewshot(task: TaskRecord, episode: Episode, template: PromptTemplate = DEFAULT_TEMPLATE,
                   backend: Backend | None = None):
    """Return ``(text, separator_position)``; the position needs a backend to tokenize with."""
    query = task.pairs[episode.test_index].input
    if not query.strip():
        raise ValueError("empty query")
    demos = [(task.pairs[i].input, task.pairs[i].output) for i in episode.shot_indices]
    text = template.render(demos, query)
    if backend is None:
        return text, None
    r = _render(backend, text, template, len(demos) + 1)
    return r.text, r.separator_position


def render_zeroshot(test_input: str, template: PromptTemplate = DEFAULT_TEMPLATE, backend: Backend | None = None):
    if not test_input.strip():
        raise ValueError("empty query")
    text = template.query(test_input)
    if backend is None:
        return text, None
    r = _render(backend, text, template, 1)
    return r.text, r.separator_position


@dataclass(frozen=True)
class TaskVector:
    layer: int
    vector: np.ndarray = field(compare=False, repr=False)
    source_position: int = 0
    source_prompt_hash: str = ""
    separator_token_span: tuple[int, int] = (0, 0)
    backend_id: str = ""

    @property
    def width(self) -> int:
        return int(self.vector.shape[0])

    def to_json(self) -> str:
        return json.dumps({
            "layer": self.layer, "width": self.width, "source_position": self.source_position,
            "source_prompt_hash": self.source_prompt_hash,
            "separator_token_span": list(self.separator_token_span), "backend_id": self.backend_id,
            # repr of a Python float round-trips exactly
            "values": [float(x) for x in self.vector],
        })

    @classmethod
    def from_json(cls, text: str) -> "TaskVector":
        d = json.loads(text)
        vec = np.array(d["values"], dtype=np.float64)
        if vec.shape != (d["width"],):
            raise ValueError("width does not match the stored values")
        return cls(d["layer"], vec, d["source_position"], d["source_prompt_hash"],
                   tuple(d["separator_token_span"]), d.get("backend_id", ""))


def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def extract_task_vector(backend: Backend, fewshot_prompt: str, separator_position: int, layer: int,
                        separator: str = DEFAULT_TEMPLATE.separator) -> TaskVector:
    if not 0 <= layer < backend.num_layers:
        raise InterventionError(f"layer {layer} out of range (backend has {backend.num_layers})")
    tokens = backend.tokenize(fewshot_prompt)
    if not 0 <= separator_position < len(tokens):
        raise InterventionError(f"separator position {separator_position} outside the prompt")
    cap = backend.forward_capture(tokens)
    end = tokens.offsets()[separator_position][1]
    start = tokens.token_at_char(max(0, end - len(separator)))
    return TaskVector(layer, np.array(cap[layer, separator_position], copy=True), separator_position,
                      prompt_hash(fewshot_prompt), (start, separator_position + 1), backend.backend_id)


def inject_and_generate(backend: Backend, zeroshot_prompt: str, separator_position: int, tv: TaskVector,
                        params: GenerationParams = GenerationParams()) -> GenerationResult:
    if not 0 <= tv.layer < backend.num_layers:
        raise InterventionError(f"layer {tv.layer} out of range")
    if tv.width != backend.hidden_width:
        raise InterventionError(f"task vector width {tv.width} != backend width {backend.hidden_width}")
    tokens = backend.tokenize(zeroshot_prompt)
    return backend.generate(tokens, [InterventionSpec(tv.layer, separator_position, tv.vector)], params)


__all__ = [
    "DEFAULT_TEMPLATE", "Episode", "PromptTemplate", "RenderedPrompt", "TaskVector", "TemplateError",
    "extract_task_vector", "inject_and_generate", "prompt_hash", "render_fewshot", "render_zeroshot",
    "sample_episodes", "separator_positions",
]
