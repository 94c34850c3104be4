"""Task records, task sets, category derivation and the on-disk bundle format.

A bundle is UTF-8 JSON Lines. The first line is a header carrying the bundle
version and the category manifest; every following line is one task::

    {"version": "1", "manifest": {"classify": 1, "rewrite": 1}}
    {"task_id": "...", "instruction": "...", "category": "...", "source": "fixture", "pairs": [...]}

Field order is fixed so that saved bundles are byte-stable.
"""

from __future__ import annotations

import enum
import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Iterable, Mapping, Sequence

__all__ = [
    "BundleParseError",
    "DATASET_MIN_PAIRS",
    "EPISODE_MIN_PAIRS",
    "ExamplePair",
    "Grade",
    "IntegrityError",
    "InvalidInstructionError",
    "Source",
    "TaskRecord",
    "TaskSet",
    "Violation",
    "bucket_categories",
    "bucket_counts",
    "derive_category",
    "load_taskset",
    "make_task_id",
    "save_taskset",
    "validate_task",
]

BUNDLE_VERSION = "1"
DATASET_MIN_PAIRS = 30
EPISODE_MIN_PAIRS = 8
DEFAULT_TOP_N = 8

# Hyphens are deliberately kept: "Re-write" and "Rewrite" are distinct categories.
_CATEGORY_STRIP = ".,:;!?\"'"


class InvalidInstructionError(ValueError):
    pass


class BundleParseError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


class Source(str, enum.Enum):
    ALPACA = "alpaca-derived"
    SYNTHETIC = "synthetic"
    FIXTURE = "fixture"


class Grade(str, enum.Enum):
    DATASET = "dataset"
    EPISODE = "episode"


_GRADE_MIN = {Grade.DATASET: DATASET_MIN_PAIRS, Grade.EPISODE: EPISODE_MIN_PAIRS}


@dataclass(frozen=True)
class ExamplePair:
    input: str
    output: str


def derive_category(instruction: str) -> str:
    """Lowercased first word of ``instruction`` with edge punctuation removed.

    >>> derive_category("Rewrite the given sentence to incorporate a hyperbole")
    'rewrite'
    >>> derive_category("  Classify: the following")
    'classify'
    """
    for word in instruction.split():
        token = word.strip(_CATEGORY_STRIP).lower()
        if token:
            return token
    raise InvalidInstructionError(f"no category word in instruction {instruction!r}")


def make_task_id(instruction: str) -> str:
    return hashlib.sha256(instruction.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class TaskRecord:
    task_id: str
    instruction: str
    pairs: tuple[ExamplePair, ...]
    category: str
    source: Source = Source.FIXTURE
    generator: str | None = None

    @classmethod
    def create(
        cls,
        instruction: str,
        pairs: Iterable[ExamplePair | tuple[str, str]],
        source: Source | str = Source.FIXTURE,
        generator: str | None = None,
        task_id: str | None = None,
    ) -> "TaskRecord":
        """Build a record, deriving ``category`` and (by default) ``task_id``."""
        norm = tuple(p if isinstance(p, ExamplePair) else ExamplePair(*p) for p in pairs)
        return cls(
            task_id=task_id or make_task_id(instruction),
            instruction=instruction,
            pairs=norm,
            category=derive_category(instruction),
            source=Source(source),
            generator=generator,
        )


@dataclass(frozen=True)
class TaskSet:
    tasks: tuple[TaskRecord, ...]
    manifest: dict[str, int] = field(default_factory=dict)
    version: str = BUNDLE_VERSION

    def __post_init__(self) -> None:
        ids = [t.task_id for t in self.tasks]
        dupes = sorted(k for k, n in Counter(ids).items() if n > 1)
        if dupes:
            raise IntegrityError(f"duplicate task_id values: {', '.join(dupes)}")
        if sum(self.manifest.values()) != len(self.tasks):
            raise IntegrityError(
                f"manifest counts sum to {sum(self.manifest.values())}, "
                f"but the set holds {len(self.tasks)} tasks"
            )
        if dict(self.manifest) != _tally(self.tasks):
            raise IntegrityError("manifest does not match the task categories")

    @classmethod
    def from_tasks(cls, tasks: Iterable[TaskRecord], version: str = BUNDLE_VERSION) -> "TaskSet":
        tasks = tuple(tasks)
        return cls(tasks=tasks, manifest=_tally(tasks), version=version)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def by_id(self, task_id: str) -> TaskRecord:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)

    def subset(self, task_ids: Iterable[str]) -> "TaskSet":
        wanted = list(task_ids)
        keep = set(wanted)
        return TaskSet.from_tasks([t for t in self.tasks if t.task_id in keep], self.version)


def _tally(tasks: Iterable[TaskRecord]) -> dict[str, int]:
    return dict(sorted(Counter(t.category for t in tasks).items()))


def bucket_counts(counts: Mapping[str, int], top_n: int = DEFAULT_TOP_N) -> dict[str, int]:
    """Keep the ``top_n`` largest categories and fold the rest into ``"other"``.

    Ties in frequency are broken lexicographically.
    """
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    out = dict(ranked[:top_n])
    rest = sum(n for _, n in ranked[top_n:])
    if rest:
        out["other"] = out.get("other", 0) + rest
    return out


def bucket_categories(taskset: TaskSet, top_n: int = DEFAULT_TOP_N) -> dict[str, int]:
    return bucket_counts(_tally(taskset.tasks), top_n)


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str


def validate_task(record: TaskRecord, grade: Grade | str = Grade.DATASET) -> list[Violation]:
    """Return every violated invariant of ``record``; an empty list means valid."""
    grade = Grade(grade)
    out: list[Violation] = []
    need = _GRADE_MIN[grade]
    if len(record.pairs) < need:
        out.append(Violation("pair-count", f"{len(record.pairs)} pairs, {grade.value} grade needs {need}"))
    seen: dict[str, int] = {}
    for i, pair in enumerate(record.pairs):
        key = pair.input.strip()
        if not key:
            out.append(Violation("empty-input", f"pair {i} has an empty input"))
        if not pair.output.strip():
            out.append(Violation("empty-output", f"pair {i} has an empty output"))
        if key and key in seen:
            if seen[key] >= 0:
                out.append(Violation("duplicate-input", f"pairs {seen[key]} and {i} share input {key!r}"))
                seen[key] = -1
        elif key:
            seen[key] = i
    try:
        expected = derive_category(record.instruction)
    except InvalidInstructionError as exc:
        out.append(Violation("invalid-instruction", str(exc)))
    else:
        if record.category != expected:
            out.append(Violation("category-mismatch", f"category {record.category!r}, expected {expected!r}"))
    return out


# -- bundle I/O ---------------------------------------------------------------


def _record_to_json(t: TaskRecord) -> str:
    obj: dict = {
        "task_id": t.task_id,
        "instruction": t.instruction,
        "category": t.category,
        "source": t.source.value,
    }
    if t.generator is not None:
        obj["generator"] = t.generator
    obj["pairs"] = [{"input": p.input, "output": p.output} for p in t.pairs]
    return json.dumps(obj, ensure_ascii=False)


def dumps_taskset(taskset: TaskSet) -> str:
    header = json.dumps({"version": taskset.version, "manifest": dict(sorted(taskset.manifest.items()))})
    lines = [header] + [_record_to_json(t) for t in taskset.tasks]
    return "\n".join(lines) + "\n"


def save_taskset(taskset: TaskSet, path: str | PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_taskset(taskset), encoding="utf-8")
    return path


def _parse_record(obj: object, lineno: int) -> TaskRecord:
    if not isinstance(obj, dict):
        raise BundleParseError(f"line {lineno}: expected an object")
    try:
        pairs = tuple(ExamplePair(str(p["input"]), str(p["output"])) for p in obj["pairs"])
        rec = TaskRecord(
            task_id=str(obj["task_id"]),
            instruction=str(obj["instruction"]),
            pairs=pairs,
            category=str(obj["category"]),
            source=Source(obj["source"]),
            generator=obj.get("generator"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleParseError(f"line {lineno}: malformed task record ({exc})") from exc
    try:
        expected = derive_category(rec.instruction)
    except InvalidInstructionError as exc:
        raise BundleParseError(f"line {lineno}: {exc}") from exc
    if rec.category != expected:
        raise IntegrityError(f"line {lineno}: category {rec.category!r} does not match instruction ({expected!r})")
    return rec


def loads_taskset(text: str, strict: bool = False) -> TaskSet:
    # split on "\n" only: str.splitlines would also break inside strings holding U+2028 or U+0085
    lines = [ln.rstrip("\r") for ln in text.split("\n") if ln.strip()]
    if not lines:
        raise BundleParseError("empty bundle: missing header line")
    try:
        header = json.loads(lines[0])
        version = str(header["version"])
        manifest = {str(k): int(v) for k, v in header["manifest"].items()}
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
        raise BundleParseError(f"line 1: malformed header ({exc})") from exc
    tasks = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BundleParseError(f"line {lineno}: {exc.msg}") from exc
        tasks.append(_parse_record(obj, lineno))
    ts = TaskSet(tasks=tuple(tasks), manifest=dict(sorted(manifest.items())), version=version)
    if strict:
        for t in ts.tasks:
            bad = validate_task(t, Grade.DATASET)
            if bad:
                raise IntegrityError(f"task {t.task_id}: {bad[0].kind}: {bad[0].detail}")
    return ts


def load_taskset(path: str | PathLike, strict: bool = False) -> TaskSet:
    """Read a bundle. ``strict`` additionally requires dataset-grade validity."""
    return loads_taskset(Path(path).read_text(encoding="utf-8"), strict=strict)


def tasks_from_rows(rows: Sequence[tuple[str, Sequence[tuple[str, str]]]], source: Source = Source.FIXTURE) -> TaskSet:
    return TaskSet.from_tasks(TaskRecord.create(instr, pairs, source) for instr, pairs in rows)
