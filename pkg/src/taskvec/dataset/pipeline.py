"""Dataset construction: classify source instructions, generate pairs, validate.

The generator LLM is reached through a :class:`~taskvec.clients.GeneratorClient`,
so the whole pipeline runs offline against recorded fixtures.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from ..clients import GeneratorClient, RetryPolicy, TransportError
from .core import (
    DATASET_MIN_PAIRS,
    ExamplePair,
    Grade,
    IntegrityError,
    Source,
    TaskRecord,
    TaskSet,
    make_task_id,
    validate_task,
)

log = logging.getLogger(__name__)

CLASSIFICATION_HEADER = "instruction|example_input|category|explanation"
GENERATION_HEADER = "counter|input|output"
MIN_EXAMPLES, MAX_EXAMPLES = 30, 50

CLASSIFICATION_PROMPT = """\
Your task is to classify each instruction based on how suitable it is for creating few-shot examples. An instruction is good for few-shots if you can generate many different input-output pairs (at least 30) where:
- The same instruction works for all pairs
- Each input is meaningfully different from others
- The output's correctness can be clearly evaluated

Output pure CSV starting with this header:
instruction|example_input|category|explanation

Categories:
GOOD = Good for few-shots: you can create many (30+) valid input examples
LIMITED = Bad for few-shots: cannot generate enough different examples (requires explanation)
INVALID = Invalid: impossible to complete with given input (requires explanation)

Technical rules:
- Start immediately with header
- Process **all** instructions exactly as written, in order
- No quotes in output
- Explain both LIMITED and INVALID cases"""

GENERATION_PROMPT = """\
You are a specialized AI assistant tasked with generating diverse and meaningful examples based on given instructions. Your task is to generate {num_examples} different, high-quality input examples for a given instruction, along with corresponding outputs. Each example should be unique and demonstrate different aspects or applications of the instruction.

Here is the instruction and an example input-output pair for reference:

[INSTRUCTION]
{instruction}

Example format:
Input: {example_input}
Output: {example_output}

Your task is to:
1. Analyze the instruction and understand its scope
2. Generate {num_examples} different, realistic, and diverse inputs that could be used with this instruction
3. For each input, provide an appropriate output following the pattern shown in the example
4. Ensure each input-output pair is unique and demonstrates different aspects of the instruction
5. Format your response exactly as a CSV table with three columns with a header: counter|input|output

Requirements:
- Generate exactly {num_examples} examples
- Ensure all examples are distinct and non-repetitive
- Maintain consistent quality across all examples
- Follow the same style and format as the provided example
- Ensure inputs are realistic and contextually appropriate
- Make outputs match the format and style of the example output

Format your response exactly like this:
```
counter|input|output
1|[first input]|[corresponding output]
2|[second input]|[corresponding output]
...
{num_examples}|[{num_examples}th input]|[corresponding output]
```

Important notes:
- Do not include explanations or additional text
- Start directly with the CSV format
- Use | as separator
- Escape any special characters within the text using double quotes
- Maintain consistent formatting throughout
- Ensure each row follows the exact same pattern
- Do not skip numbers or leave gaps in the counter

Begin your response now by outputting exactly {num_examples} examples in the specified CSV format with | as a separator."""


class FormatError(ValueError):
    pass


class RowError(FormatError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SequenceError(FormatError):
    def __init__(self, counter: int, message: str):
        super().__init__(f"counter {counter}: {message}")
        self.counter = counter


class PipelineError(RuntimeError):
    pass


class Label(str, enum.Enum):
    GOOD = "GOOD"
    LIMITED = "LIMITED"
    INVALID = "INVALID"


@dataclass(frozen=True)
class SourceEntry:
    instruction: str
    example_input: str
    example_output: str

    @property
    def key(self) -> tuple[str, str]:
        return (_squash(self.instruction), _squash(self.example_input))

    @classmethod
    def from_alpaca(cls, obj: dict) -> "SourceEntry":
        return cls(obj["instruction"], obj.get("input", ""), obj.get("output", ""))


@dataclass(frozen=True)
class ClassificationVerdict:
    label: Label
    explanation: str = ""

    def __post_init__(self) -> None:
        if self.label is not Label.GOOD and not self.explanation.strip():
            raise ValueError(f"{self.label.value} verdict requires an explanation")


@dataclass(frozen=True)
class RowViolation:
    line: int
    text: str
    reason: str


@dataclass
class ClassificationResult:
    verdicts: list[tuple[tuple[str, str], ClassificationVerdict]]
    violations: list[RowViolation]


def _squash(s: str) -> str:
    return " ".join(s.split())


_PLACEHOLDER = re.compile(r"\{(num_examples|instruction|example_input|example_output)\}")


def _fill(template: str, values: dict[str, str]) -> str:
    # single pass, so substituted text containing "{...}" is never re-expanded
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], template)


def build_classification_prompt(entries: Sequence[SourceEntry]) -> str:
    if not entries:
        raise ValueError("at least one entry is required")
    rows = "\n".join(f"{_squash(e.instruction)}|{_squash(e.example_input)}" for e in entries)
    return f"{CLASSIFICATION_PROMPT}\n\ninstruction|example_input\n{rows}\n"


def build_generation_prompt(entry: SourceEntry, num_examples: int) -> str:
    if not MIN_EXAMPLES <= num_examples <= MAX_EXAMPLES:
        raise ValueError(f"num_examples must be in [{MIN_EXAMPLES}, {MAX_EXAMPLES}], got {num_examples}")
    return _fill(GENERATION_PROMPT, {
        "num_examples": str(num_examples),
        "instruction": entry.instruction,
        "example_input": entry.example_input,
        "example_output": entry.example_output,
    })


def _lines(text: str) -> list[str]:
    # "\n" only: splitlines would also cut at form feeds and U+2028 inside fields
    return [ln.rstrip("\r") for ln in text.split("\n")]


def strip_code_fence(text: str) -> str:
    lines = _lines(text.strip("\n\r "))
    while lines and lines[0].strip().startswith("```"):
        lines.pop(0)
    while lines and lines[-1].strip().startswith("```"):
        lines.pop()
    return "\n".join(lines)


def parse_classification_response(text: str) -> ClassificationResult:
    lines = _lines(strip_code_fence(text))
    start = next((i for i, ln in enumerate(lines) if ln.strip()), None)
    if start is None or lines[start].replace(" ", "").lower() != CLASSIFICATION_HEADER:
        raise FormatError("response does not start with the classification header")
    verdicts, violations = [], []
    for lineno, raw in enumerate(lines[start + 1:], start=start + 2):
        if not raw.strip():
            continue
        parts = raw.split("|")
        if len(parts) != 4:
            violations.append(RowViolation(lineno, raw, f"expected 4 fields, got {len(parts)}"))
            continue
        instr, inp, label, expl = (p.strip() for p in parts)
        try:
            verdict = ClassificationVerdict(Label(label.upper()), expl)
        except ValueError as exc:
            violations.append(RowViolation(lineno, raw, str(exc)))
            continue
        verdicts.append(((_squash(instr), _squash(inp)), verdict))
    if not verdicts:
        raise FormatError("no parseable classification rows")
    return ClassificationResult(verdicts, violations)


def render_generation_rows(pairs: Iterable[ExamplePair], header: bool = True) -> str:
    """Inverse of :func:`parse_generation_response` for trimmed pairs."""
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="|", quotechar='"', doublequote=True,
                   quoting=csv.QUOTE_MINIMAL, lineterminator="\n")
    if header:
        w.writerow(GENERATION_HEADER.split("|"))
    for i, p in enumerate(pairs, start=1):
        w.writerow([i, p.input, p.output])
    return buf.getvalue()


def parse_generation_response(text: str, expected: int) -> list[ExamplePair]:
    """Parse ``counter|input|output`` rows.

    Fields holding ``|``, ``"`` or newlines are double-quoted with embedded quotes
    doubled. Fields are returned trimmed. A short tail (fewer rows than
    ``expected``) is allowed; gaps, duplicates and counters above ``expected`` are
    not.
    """
    body = strip_code_fence(text)
    reader = csv.reader(io.StringIO(body), delimiter="|", quotechar='"',
                        doublequote=True, skipinitialspace=True, strict=False)
    rows: dict[int, ExamplePair] = {}
    first = True
    for row in reader:
        if not row or all(not c.strip() for c in row):
            continue
        cells = [c.strip() for c in row]
        if first and cells[0].lower() == "counter":
            first = False
            continue
        first = False
        if len(cells) != 3:
            raise RowError(reader.line_num, f"expected 3 fields, got {len(cells)}")
        try:
            counter = int(cells[0])
        except ValueError:
            raise RowError(reader.line_num, f"counter {cells[0]!r} is not an integer") from None
        if counter in rows:
            raise SequenceError(counter, "duplicate counter")
        if not 1 <= counter <= expected:
            raise SequenceError(counter, f"outside 1..{expected}")
        rows[counter] = ExamplePair(cells[1], cells[2])
    if not rows:
        raise FormatError("no generation rows")
    for c in range(1, max(rows) + 1):
        if c not in rows:
            raise SequenceError(c, "missing counter (gap)")
    return [rows[c] for c in sorted(rows)]


def unique_pairs(pairs: Iterable[ExamplePair], keep: int) -> list[ExamplePair]:
    """First ``keep`` pairs with non-empty fields and distinct trimmed inputs."""
    out, seen = [], set()
    for p in pairs:
        k = p.input.strip()
        if not k or not p.output.strip() or k in seen:
            continue
        seen.add(k)
        out.append(p)
        if len(out) == keep:
            break
    return out


# -- orchestration ------------------------------------------------------------


@dataclass
class EntryReport:
    instruction: str
    example_input: str
    verdict: str | None
    explanation: str = ""
    status: str = "pending"
    task_id: str | None = None
    violations: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "kind": "entry",
            "instruction": self.instruction,
            "example_input": self.example_input,
            "verdict": self.verdict,
            "explanation": self.explanation,
            "status": self.status,
            "task_id": self.task_id,
            "violations": self.violations,
        }


@dataclass
class PipelineReport:
    entries: list[EntryReport]

    @property
    def verdict_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for e in self.entries:
            key = e.verdict or "UNCLASSIFIED"
            counts[key] = counts.get(key, 0) + 1
        return dict(sorted(counts.items()))

    @property
    def status_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for e in self.entries:
            counts[e.status] = counts.get(e.status, 0) + 1
        return dict(sorted(counts.items()))

    def dumps(self) -> str:
        head = {"kind": "counts", "verdicts": self.verdict_counts, "status": self.status_counts}
        lines = [json.dumps(head)] + [json.dumps(e.to_json(), ensure_ascii=False) for e in self.entries]
        return "\n".join(lines) + "\n"


@dataclass
class PipelineResult:
    taskset: TaskSet
    report: PipelineReport


def _attempts(fn: Callable[[], object], policy: RetryPolicy, sleep: Callable[[float], None]):
    """Run ``fn`` up to ``policy.attempts`` times.

    Transport errors back off exponentially; parse errors count as an attempt.
    Returns ``(value, errors)``; value is None when every attempt failed to parse.
    """
    errors: list[str] = []
    for attempt in range(policy.attempts):
        try:
            return fn(), errors
        except TransportError as exc:
            errors.append(f"transport: {exc}")
            if attempt == policy.attempts - 1:
                raise PipelineError(f"transport failed after {policy.attempts} attempts: {exc}") from exc
            sleep(policy.backoff(attempt))
        except FormatError as exc:
            errors.append(f"format: {exc}")
    return None, errors


def classify_entries(
    entries: Sequence[SourceEntry],
    client: GeneratorClient,
    batch_size: int = 20,
    policy: RetryPolicy | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> list[EntryReport]:
    """Classify entries in batches. Entries without an example input are marked unfit."""
    policy = policy or RetryPolicy()
    reports = [EntryReport(e.instruction, e.example_input, None) for e in entries]
    fit = [i for i, e in enumerate(entries) if e.example_input.strip() and e.example_output.strip()]
    for i in set(range(len(entries))) - set(fit):
        reports[i].status = "unfit"
        reports[i].violations.append("entry has no example input or output")
    for b in range(0, len(fit), batch_size):
        idx = fit[b:b + batch_size]
        prompt = build_classification_prompt([entries[i] for i in idx])
        result, errors = _attempts(lambda: parse_classification_response(client.complete(prompt)), policy, sleep)
        if result is None:
            for i in idx:
                reports[i].status = "unclassified"
                reports[i].violations.extend(errors)
            continue
        by_key = {}
        for key, verdict in result.verdicts:
            by_key.setdefault(key, verdict)
        row_notes = [f"line {v.line}: {v.reason}" for v in result.violations]
        for i in idx:
            verdict = by_key.get(entries[i].key)
            if verdict is None:
                reports[i].status = "unclassified"
                reports[i].violations.append("no verdict row for this entry")
                reports[i].violations.extend(row_notes)
                continue
            reports[i].verdict = verdict.label.value
            reports[i].explanation = verdict.explanation
            reports[i].status = "classified"
    return reports


def generate_task(
    entry: SourceEntry,
    client: GeneratorClient,
    num_examples: int = MIN_EXAMPLES,
    keep: int = DATASET_MIN_PAIRS,
    policy: RetryPolicy | None = None,
    sleep: Callable[[float], None] = time.sleep,
    source: Source = Source.ALPACA,
) -> tuple[TaskRecord | None, list[str]]:
    """Generate and validate one task; returns the record (or None) plus notes."""
    policy = policy or RetryPolicy()
    prompt = build_generation_prompt(entry, num_examples)
    pairs, errors = _attempts(lambda: parse_generation_response(client.complete(prompt), num_examples), policy, sleep)
    if pairs is None:
        return None, errors
    kept = unique_pairs(pairs, keep)
    notes = list(errors)
    if len(kept) < min(len(pairs), keep):
        notes.append(f"dropped {min(len(pairs), keep) - len(kept)} empty or duplicate pairs")
    record = TaskRecord.create(entry.instruction, kept, source=source, generator=client.label)
    bad = validate_task(record, Grade.DATASET)
    if bad:
        return None, notes + [f"{v.kind}: {v.detail}" for v in bad]
    return record, notes


def generate_tasks(
    entries: Sequence[SourceEntry],
    reports: Sequence[EntryReport],
    client: GeneratorClient,
    num_examples: int = MIN_EXAMPLES,
    keep: int = DATASET_MIN_PAIRS,
    policy: RetryPolicy | None = None,
    sleep: Callable[[float], None] = time.sleep,
    workers: int = 1,
) -> TaskSet:
    if not MIN_EXAMPLES <= num_examples <= MAX_EXAMPLES:
        raise ValueError(f"num_examples must be in [{MIN_EXAMPLES}, {MAX_EXAMPLES}], got {num_examples}")
    good = [i for i, r in enumerate(reports) if r.verdict == Label.GOOD.value and r.status == "classified"]

    def job(i: int):
        return generate_task(entries[i], client, num_examples, keep, policy, sleep)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(job, good))
    else:
        outcomes = [job(i) for i in good]

    tasks: list[TaskRecord] = []
    seen_ids: set[str] = set()
    for i, (record, notes) in zip(good, outcomes):
        rep = reports[i]
        rep.violations.extend(notes)
        if record is None:
            rep.status = "rejected"
            log.info("rejected %r: %s", entries[i].instruction[:60], "; ".join(notes))
            continue
        if record.task_id in seen_ids:
            rep.status = "rejected"
            rep.violations.append("duplicate instruction")
            continue
        seen_ids.add(record.task_id)
        rep.task_id = record.task_id
        rep.status = "accepted"
        tasks.append(record)
    return TaskSet.from_tasks(tasks)


def run_pipeline(
    entries: Sequence[SourceEntry],
    client: GeneratorClient,
    num_examples: int = MIN_EXAMPLES,
    keep: int = DATASET_MIN_PAIRS,
    batch_size: int = 20,
    policy: RetryPolicy | None = None,
    sleep: Callable[[float], None] = time.sleep,
    workers: int = 1,
) -> PipelineResult:
    if not MIN_EXAMPLES <= num_examples <= MAX_EXAMPLES:
        raise ValueError(f"num_examples must be in [{MIN_EXAMPLES}, {MAX_EXAMPLES}], got {num_examples}")
    reports = classify_entries(entries, client, batch_size, policy, sleep)
    taskset = generate_tasks(entries, reports, client, num_examples, keep, policy, sleep, workers)
    return PipelineResult(taskset, PipelineReport(reports))


def load_source_entries(text: str) -> list[SourceEntry]:
    """Alpaca-style JSON array or JSON Lines with instruction/input/output keys."""
    text = text.strip()
    if text.startswith("["):
        items = json.loads(text)
    else:
        items = [json.loads(ln) for ln in text.splitlines() if ln.strip()]
    return [SourceEntry.from_alpaca(o) for o in items]


__all__ = [
    "CLASSIFICATION_HEADER", "CLASSIFICATION_PROMPT", "ClassificationResult", "ClassificationVerdict",
    "EntryReport", "FormatError", "GENERATION_HEADER", "GENERATION_PROMPT", "IntegrityError", "Label",
    "PipelineError", "PipelineReport", "PipelineResult", "RowError", "RowViolation", "SequenceError",
    "SourceEntry", "build_classification_prompt", "build_generation_prompt", "classify_entries",
    "generate_task", "generate_tasks", "load_source_entries", "make_task_id", "parse_classification_response",
    "parse_generation_response", "render_generation_rows", "run_pipeline", "strip_code_fence", "unique_pairs",
]
