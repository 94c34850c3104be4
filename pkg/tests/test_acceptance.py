"""Acceptance criteria. Each test prints a single ``ACn PASS|FAIL`` line."""

import hashlib
import json
import os
import random
import string
import subprocess
import sys
import textwrap
from contextlib import contextmanager

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskvec.backend.base import GenerationParams, InterventionSpec
from taskvec.backend.toy import TASK_NAMES, TOY_TASKS, toy_backend
from taskvec.dataset.core import TaskRecord

SHORT = GenerationParams(max_tokens=8)


@pytest.fixture
def criterion(capsys):
    @contextmanager
    def run(name, detail=""):
        try:
            yield
        except BaseException:
            with capsys.disabled():
                print(f"\n{name} FAIL {detail}".rstrip())
            raise
        with capsys.disabled():
            print(f"\n{name} PASS {detail}".rstrip())

    return run


def _demo_text(task, letters, query):
    return "\n".join([f"{c} -> {TOY_TASKS[task](c)}" for c in letters] + [f"{query} ->"])


@st.composite
def toy_prompts(draw):
    """Either a few-shot toy prompt or a raw id sequence, at most 24 tokens."""
    b = toy_backend()
    if draw(st.booleans()):
        task = draw(st.sampled_from(TASK_NAMES))
        letters = draw(st.lists(st.sampled_from(string.ascii_lowercase), min_size=0, max_size=4))
        return b.tokenize(_demo_text(task, letters, draw(st.sampled_from(string.ascii_lowercase)))).ids
    return draw(st.lists(st.integers(0, b.V - 1), min_size=1, max_size=12))


_ac1_seen = []


@settings(max_examples=100, database=None)
@given(toy_prompts())
def _identity_property(ids):
    b = toy_backend()
    seq = b.token_seq(ids)
    cap = b.forward_capture(seq)
    plain = b.generate(seq, params=SHORT)
    for layer in range(b.num_layers):
        for pos in range(len(seq)):
            iv = [InterventionSpec(layer, pos, cap[layer, pos])]
            assert b.generate(seq, iv, SHORT).same_as(plain), (ids, layer, pos)
    _ac1_seen.append(tuple(ids))


def test_ac1_identity_injection(criterion, tiny_hf):
    from test_backend_hf import PROMPTS

    with criterion("AC1", "identity injection, toy and tiny HF"):
        _ac1_seen.clear()
        _identity_property()
        assert len(_ac1_seen) >= 100
        params = GenerationParams(max_tokens=6, stop_tokens=())
        assert len(PROMPTS) == 10
        for prompt in PROMPTS:
            toks = tiny_hf.tokenize(prompt)
            cap = tiny_hf.forward_capture(toks)
            plain = tiny_hf.generate(toks, params=params)
            for layer in range(tiny_hf.num_layers):
                for pos in range(len(toks)):
                    iv = [InterventionSpec(layer, pos, cap[layer, pos])]
                    assert tiny_hf.generate(toks, iv, params).same_as(plain), (prompt, layer, pos)


def _locality_corpus():
    b = toy_backend()
    texts = [_demo_text(t, "ab", "c") for t in TASK_NAMES]
    texts += ['red Sydney -> {"color":"red', "a -> A\nb ->", 'x {"color', "b ->"]
    seqs = [b.tokenize(t).ids[:12] for t in texts]
    rng = random.Random(12)
    for n in range(1, 13):
        for _ in range(4):
            seqs.append(tuple(rng.randrange(b.V) for _ in range(n)))
    return seqs


def test_ac2_locality(criterion):
    b = toy_backend()
    corpus = _locality_corpus()
    donors = [b.forward_capture(b.tokenize(_demo_text(t, "kq", "z"))).array for t in TASK_NAMES[:2]]
    with criterion("AC2", f"locality at every site of {len(corpus)} sequences"):
        checked = 0
        for ids in corpus:
            assert len(ids) <= 12
            seq = b.token_seq(ids)
            base = b.forward_capture(seq).array
            for layer in range(b.num_layers):
                for pos in range(len(ids)):
                    for donor in donors:
                        vec = donor[layer, -1]
                        hit = b.forward_capture(seq, [InterventionSpec(layer, pos, vec)]).array
                        assert np.array_equal(hit[:layer], base[:layer])
                        others = [q for q in range(len(ids)) if q != pos]
                        assert np.array_equal(hit[layer, others], base[layer, others])
                        assert np.array_equal(hit[:, :pos], base[:, :pos])
                        assert np.array_equal(hit[layer, pos], vec)
                        checked += 1
        assert checked > 0


def test_ac3_transfer(criterion, toy):
    from taskvec.engine import extract_task_vector, inject_and_generate, render_fewshot, render_zeroshot, sample_episodes
    from taskvec.toytasks import toy_task

    with criterion("AC3", "transfer for every toy task and query"):
        total = 0
        for name in TASK_NAMES:
            task = toy_task(name)
            for ep in sample_episodes(task, 3, 7, 0):
                fs, pos = render_fewshot(task, ep, backend=toy)
                tv = extract_task_vector(toy, fs, pos, toy.encoding_layer)
                for c in string.ascii_lowercase:
                    zs, zpos = render_zeroshot(c, backend=toy)
                    assert inject_and_generate(toy, zs, zpos, tv, SHORT).text.strip() == TOY_TASKS[name](c)
                    total += 1
        assert total == len(TASK_NAMES) * 3 * 26


def test_ac4_sweep_peak(criterion, toy):
    from taskvec.experiments import run_layer_sweep
    from taskvec.judge import OracleJudge
    from taskvec.toytasks import toy_taskset

    with criterion("AC4", f"peak correctness at layer {toy.encoding_layer}"):
        res = run_layer_sweep(toy_taskset(), toy, OracleJudge(), episodes_per_task=10,
                              params=GenerationParams(max_tokens=16))
        cor = {l: m.correctness for l, m in res.summary.per_layer.items()}
        assert set(cor) == set(range(toy.num_layers))
        assert cor[toy.encoding_layer] == 10.0
        assert all(v < 10.0 for l, v in cor.items() if l != toy.encoding_layer)


def test_ac5_grid_oracle(criterion, toy, oracle):
    from test_compositional import brute_force_grid

    from taskvec.compositional import influence_grid, prompt_for_seed

    with criterion("AC5", "influence grid equals brute force on 20 pairs"):
        for seed in range(20):
            p = prompt_for_seed(toy, seed)
            g = influence_grid(toy, p, toy.encoding_layer)
            assert np.array_equal(g.cells, brute_force_grid(toy, oracle, p, toy.encoding_layer)), seed


def test_ac6_strategies(criterion, toy):
    from taskvec.compositional import ROLES, compare_strategies

    with criterion("AC6", "subtask 1.0 at all roles, natural key_1 below 1.0"):
        res = compare_strategies(toy, 20, toy.encoding_layer)
        assert len(ROLES) == 6
        assert all(res["subtask"].per_role[r] == 1.0 for r in ROLES)
        assert res["natural"].per_role["key_1"] < 1.0


def test_ac7_judge(criterion, tmp_path):
    from test_judge import NEAR_MISSES, REQ, store_with

    from taskvec.judge import JudgingError, ScoreParseError, ScorePair, judge_output, parse_scores

    with criterion("AC7", "judge parser and retry policy"):
        assert parse_scores("8,3") == ScorePair(8, 3)
        assert len(set(NEAR_MISSES)) == 20
        for text in NEAR_MISSES:
            with pytest.raises(ScoreParseError):
                parse_scores(text)
        assert judge_output(REQ, store_with(tmp_path / "a", ["no", "5,5"]), max_retries=2) == ScorePair(5, 5)
        with pytest.raises(JudgingError) as err:
            judge_output(REQ, store_with(tmp_path / "b", ["x", "y"]), max_retries=2)
        assert len(err.value.responses) == 3


def test_ac8_pipeline(criterion):
    from test_pipeline import PIPE, fixture_run, oracle_quote, oracle_split, random_field

    from taskvec.dataset.core import ExamplePair, dumps_taskset
    from taskvec.dataset.pipeline import SequenceError, parse_generation_response, render_generation_rows

    with criterion("AC8", "pipe CSV round trips, counter gaps, replay determinism"):
        rng = random.Random(20240601)
        for case in range(200):
            pairs = [ExamplePair(random_field(rng), random_field(rng)) for _ in range(rng.randint(1, 5))]
            text = "counter|input|output\n" + "".join(
                f"{i}|{oracle_quote(p.input)}|{oracle_quote(p.output)}\n" for i, p in enumerate(pairs, 1))
            assert parse_generation_response(text, len(pairs)) == pairs, case
            rendered = render_generation_rows(pairs)
            assert [ExamplePair(r[1], r[2]) for r in oracle_split(rendered)[1:]] == pairs, case
            assert parse_generation_response(rendered, len(pairs)) == pairs, case
        with pytest.raises(SequenceError) as err:
            parse_generation_response("counter|input|output\n1|a|b\n3|c|d\n", 3)
        assert err.value.counter == 2
        a, b = fixture_run(PIPE), fixture_run(PIPE)
        assert len(a.taskset) == 1
        assert dumps_taskset(a.taskset).encode() == dumps_taskset(b.taskset).encode()


def test_ac9_aggregation(criterion):
    from test_experiments import naive, random_rows

    from taskvec.experiments import TASK_VECTOR, summarize

    with criterion("AC9", "summaries equal naive re-aggregation on 50 sets"):
        rng = random.Random(9)
        for _ in range(50):
            rows = random_rows(rng)
            s = summarize(rows)
            assert set(s.per_layer) == {r.layer for r in rows if r.condition == TASK_VECTOR and r.ok}
            for layer, m in s.per_layer.items():
                f, c, n = naive(rows, TASK_VECTOR, layer)
                assert abs(m.format - f) <= 1e-9 and abs(m.correctness - c) <= 1e-9 and m.n_tasks == n
            for (layer, cat), m in s.per_layer_category.items():
                f, c, n = naive(rows, TASK_VECTOR, layer, cat)
                assert abs(m.format - f) <= 1e-9 and abs(m.correctness - c) <= 1e-9 and m.n_tasks == n
            for cond, m in s.baselines.items():
                f, c, n = naive(rows, cond)
                assert abs(m.format - f) <= 1e-9 and abs(m.correctness - c) <= 1e-9 and m.n_tasks == n


EPISODE_DIGEST_100 = "33e36b1e3e45ad5d"


def random_tasks(n=100):
    rng = random.Random(100)
    tasks = []
    for i in range(n):
        words = "".join(rng.choice(string.ascii_lowercase) for _ in range(6))
        pairs = [(f"in{i}-{j}", f"out{j}") for j in range(rng.randint(8, 60))]
        tasks.append((TaskRecord.create(f"Transform {words} number {i}", pairs), rng.randrange(2**31)))
    return tasks


def episodes_digest():
    from taskvec.engine import sample_episodes

    h = hashlib.sha256()
    for task, seed in random_tasks():
        eps = sample_episodes(task, 10, 7, seed)
        h.update(repr([(e.shot_indices, e.test_index) for e in eps]).encode())
    return h.hexdigest()[:16]


def oracle_digest():
    h = hashlib.sha256()
    for task, seed in random_tasks():
        rng = random.Random(int.from_bytes(hashlib.sha256(f"{task.task_id}:{seed}".encode()).digest()[:8], "big"))
        eps = []
        for _ in range(10):
            d = rng.sample(range(len(task.pairs)), 8)
            eps.append((tuple(d[:7]), d[7]))
        h.update(repr(eps).encode())
    return h.hexdigest()[:16]


def test_ac10_episode_reproducibility(criterion):
    script = textwrap.dedent("""
        import sys
        sys.path.insert(0, sys.argv[1])
        from test_acceptance import episodes_digest
        print(episodes_digest())
    """)
    with criterion("AC10", "episodes identical across runs for 100 tasks"):
        first = episodes_digest()
        assert first == episodes_digest() == oracle_digest() == EPISODE_DIGEST_100
        env = dict(os.environ, PYTHONHASHSEED="12345")
        proc = subprocess.run([sys.executable, "-c", script, os.path.dirname(__file__)], capture_output=True,
                              text=True, env=env, check=True)
        assert proc.stdout.strip() == first


@pytest.mark.manual
def test_ac11_smoke_reproduction(criterion):
    """Needs a real model and judge. Point TASKVEC_SMOKE_CONFIG at a run config using
    backend.kind=real and judge.kind=llm, with a bundle of at least 50 tasks."""
    from taskvec.cli import _run_sweep, make_backend, make_judge
    from taskvec.compositional import ROLES, compare_strategies
    from taskvec.config import load_config

    path = os.environ.get("TASKVEC_SMOKE_CONFIG")
    if not path:
        pytest.skip("TASKVEC_SMOKE_CONFIG not set")
    cfg, _ = load_config(path)
    backend, judge = make_backend(cfg), make_judge(cfg)
    with criterion("AC11", "layer 15 peak, format over correctness, subtask ordering"):
        taskset, res = _run_sweep(cfg, backend, judge, [2, 15, 30])
        assert len(taskset) >= 50
        per = res.summary.per_layer
        assert per[15].correctness > per[2].correctness and per[15].correctness > per[30].correctness
        assert sum(m.format for m in per.values()) >= sum(m.correctness for m in per.values())
        strat = compare_strategies(backend, 100, 15)
        for role in ROLES:
            sub = strat["subtask"].per_role[role]
            assert sub > strat["classic"].per_role[role] and sub > strat["natural"].per_role[role]
