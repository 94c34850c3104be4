import json
import os
import string
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FIXTURES
from taskvec.dataset.core import (
    BundleParseError,
    Grade,
    IntegrityError,
    InvalidInstructionError,
    Source,
    TaskRecord,
    TaskSet,
    bucket_categories,
    bucket_counts,
    derive_category,
    dumps_taskset,
    load_taskset,
    loads_taskset,
    save_taskset,
    validate_task,
)

TWO_TASKS = os.path.join(FIXTURES, "two_tasks.jsonl")


def pairs(n, dup=False):
    out = [(f"in {i}", f"out {i}") for i in range(n)]
    if dup:
        out[1] = ("in 0", "other")
    return out


def test_derive_category_examples():
    assert derive_category("Rewrite the given sentence to incorporate a hyperbole") == "rewrite"
    assert derive_category("Given a list, sort it") == "given"
    assert derive_category("  Classify: the following") == "classify"
    assert derive_category("Re-write this") == "re-write"
    assert derive_category('"Generate" a poem') == "generate"


@pytest.mark.parametrize("bad", ["", "   ", "...", "!? ;"])
def test_derive_category_invalid(bad):
    with pytest.raises(InvalidInstructionError):
        derive_category(bad)


words = st.text(alphabet=string.ascii_letters + "-.,:", min_size=1, max_size=12).filter(
    lambda w: w.strip(".,:;!?\"'"))


@given(words, st.text(alphabet=string.ascii_letters + " ", max_size=20))
def test_derive_category_idempotent(word, rest):
    assert derive_category(derive_category(word) + " rest") == derive_category(word + " rest")
    c = derive_category(word + " " + rest)
    assert c and c == c.lower() and " " not in c


def test_bucket_counts_example():
    got = bucket_counts({"given": 294, "generate": 193, "x": 1}, top_n=2)
    assert got == {"given": 294, "generate": 193, "other": 1}


def test_bucket_counts_no_remainder():
    raw = {"a": 3, "b": 1}
    assert bucket_counts(raw, top_n=5) == {"a": 3, "b": 1}


def test_bucket_ties_lexicographic():
    assert bucket_counts({"b": 2, "a": 2, "c": 2}, top_n=2) == {"a": 2, "b": 2, "other": 2}


def test_bucket_top_n_validation():
    with pytest.raises(ValueError):
        bucket_counts({"a": 1}, top_n=0)


def test_bucket_empty_taskset():
    assert bucket_categories(TaskSet.from_tasks([])) == {}


@given(st.lists(st.sampled_from(["given", "generate", "rewrite", "classify", "edit", "name", "find", "make",
                                 "write", "create"]), min_size=1, max_size=100), st.integers(1, 12))
def test_bucket_recount(cats, top_n):
    tasks = [TaskRecord.create(f"{c} item {i}", pairs(2)) for i, c in enumerate(cats)]
    ts = TaskSet.from_tasks(tasks)
    # second pass: plain tally, then bucket
    tally = Counter(t.instruction.split()[0] for t in tasks)
    got = bucket_categories(ts, top_n)
    assert sum(got.values()) == len(tasks)
    ranked = sorted(tally.items(), key=lambda kv: (-kv[1], kv[0]))
    for k, v in ranked[:top_n]:
        assert got[k] == v
    assert got.get("other", 0) == sum(v for _, v in ranked[top_n:])


def test_validate_examples():
    assert validate_task(TaskRecord.create("Sort the list", pairs(30))) == []
    bad = validate_task(TaskRecord.create("Sort the list", pairs(29)))
    assert [v.kind for v in bad] == ["pair-count"]
    dup = validate_task(TaskRecord.create("Sort the list", pairs(10, dup=True)), Grade.EPISODE)
    assert [v.kind for v in dup] == ["duplicate-input"]


def test_validate_empty_fields_and_category():
    rec = TaskRecord.create("Sort the list", [(" ", "x"), ("a", "  ")] + pairs(8))
    kinds = {v.kind for v in validate_task(rec, "episode")}
    assert kinds == {"empty-input", "empty-output"}
    wrong = TaskRecord("id", "Sort it", TaskRecord.create("Sort it", pairs(30)).pairs, "order")
    assert [v.kind for v in validate_task(wrong)] == ["category-mismatch"]


def test_duplicate_detection_trims():
    rec = TaskRecord.create("Sort", [("a", "1"), (" a ", "2")] + pairs(8))
    assert [v.kind for v in validate_task(rec, Grade.EPISODE)] == ["duplicate-input"]


def three_tasks():
    return TaskSet.from_tasks([
        TaskRecord.create("Rewrite this", pairs(30)),
        TaskRecord.create("Classify it", pairs(30), Source.SYNTHETIC, generator="gen-a"),
        TaskRecord.create("Rewrite that with ünïcode", [(f"é{i}", "ß|\"q\"") for i in range(30)]),
    ])


def test_roundtrip_three(tmp_path):
    ts = three_tasks()
    path = save_taskset(ts, tmp_path / "b.jsonl")
    back = load_taskset(path, strict=True)
    assert back == ts
    assert path.read_text(encoding="utf-8") == dumps_taskset(back)


def test_duplicate_task_id():
    rec = TaskRecord.create("Rewrite this", pairs(30))
    with pytest.raises(IntegrityError):
        TaskSet.from_tasks([rec, rec])
    text = dumps_taskset(TaskSet.from_tasks([rec]))
    lines = text.splitlines()
    dup = json.dumps({"version": "1", "manifest": {"rewrite": 2}}) + "\n" + lines[1] + "\n" + lines[1] + "\n"
    with pytest.raises(IntegrityError):
        loads_taskset(dup)


def test_manifest_mismatch():
    text = dumps_taskset(three_tasks()).replace('"rewrite": 2', '"rewrite": 3')
    with pytest.raises(IntegrityError):
        loads_taskset(text)


def test_parse_errors_name_line():
    good = dumps_taskset(three_tasks()).splitlines()
    with pytest.raises(BundleParseError, match="line 3"):
        loads_taskset("\n".join([good[0], good[1], "{not json", good[3]]))
    with pytest.raises(BundleParseError, match="line 1"):
        loads_taskset("[]\n")
    with pytest.raises(BundleParseError):
        loads_taskset("")


def test_strict_load_rejects_short(tmp_path):
    ts = TaskSet.from_tasks([TaskRecord.create("Rewrite this", pairs(29))])
    path = save_taskset(ts, tmp_path / "short.jsonl")
    assert len(load_taskset(path)) == 1
    with pytest.raises(IntegrityError):
        load_taskset(path, strict=True)


def test_two_task_fixture():
    ts = load_taskset(TWO_TASKS, strict=True)
    assert ts.manifest == {"classify": 1, "rewrite": 1}
    assert [t.category for t in ts] == ["rewrite", "classify"]
    assert all(len(t.pairs) == 30 and not validate_task(t) for t in ts)
    with open(TWO_TASKS, encoding="utf-8") as f:
        assert dumps_taskset(ts) == f.read()


def test_subset_and_by_id():
    ts = three_tasks()
    ids = [t.task_id for t in ts]
    sub = ts.subset([ids[2], ids[0]])
    assert [t.task_id for t in sub] == [ids[0], ids[2]]
    assert ts.by_id(ids[1]).category == "classify"
    with pytest.raises(KeyError):
        ts.by_id("nope")


field_text = st.text(alphabet=st.characters(codec="utf-8"), min_size=1,
                     max_size=15).filter(lambda s: s.strip())


@st.composite
def tasksets(draw):
    n = draw(st.integers(0, 4))
    instrs = draw(st.lists(st.sampled_from(["Rewrite", "Classify", "Name", "Give"]), min_size=n, max_size=n))
    tasks = []
    for i, verb in enumerate(instrs):
        inputs = draw(st.lists(field_text, min_size=30, max_size=32, unique_by=str.strip))
        outputs = draw(st.lists(field_text, min_size=len(inputs), max_size=len(inputs)))
        tasks.append(TaskRecord.create(f"{verb} task {i}", list(zip(inputs, outputs)),
                                       draw(st.sampled_from(list(Source)))))
    return TaskSet.from_tasks(tasks)


@given(tasksets())
def test_roundtrip_property(ts):
    assert loads_taskset(dumps_taskset(ts), strict=True) == ts
    for t in ts:
        assert validate_task(t) == []


def test_line_separator_characters_survive():
    ts = TaskSet.from_tasks([TaskRecord.create("Rewrite this", [(f"a\u2028{i}", "b\x85c") for i in range(30)])])
    assert loads_taskset(dumps_taskset(ts), strict=True) == ts
