"""Letter-mapping tasks that the toy backend solves in context."""

from __future__ import annotations

import string

from .backend.toy import TOY_TASKS
from .dataset.core import Source, TaskRecord, TaskSet

TOY_INSTRUCTIONS = {
    "identity": "Repeat the letter exactly.",
    "uppercase": "Capitalize the letter.",
    "next_letter": "Advance the letter by one position in the alphabet.",
    "previous_letter": "Return the letter that comes before the given one.",
}


def toy_task(name: str) -> TaskRecord:
    fn = TOY_TASKS[name]
    pairs = [(c, fn(c)) for c in string.ascii_lowercase]
    return TaskRecord.create(TOY_INSTRUCTIONS[name], pairs, Source.FIXTURE, generator="toy")


def toy_taskset(names=None) -> TaskSet:
    return TaskSet.from_tasks(toy_task(n) for n in (names or TOY_TASKS))


__all__ = ["TOY_INSTRUCTIONS", "toy_task", "toy_taskset"]
