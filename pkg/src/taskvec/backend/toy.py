"""A deterministic miniature causal "transformer" with closed-form hidden states.

The toy exists so that every intervention experiment has a brute-force oracle.
Each position carries a residual vector split into named slots; block ``l``
reads the layer ``l-1`` vectors at positions ``<= p`` (causal attention), writes
only the slots it owns and passes every other slot through unchanged.

Vocabulary: control tokens, every printable ASCII character, the letters with a
leading space, and every word of the car-listing pools/templates (bare and with
a leading space). Tokenization is greedy longest match; characters outside the
vocabulary get out-of-vocabulary ids ``V + ord(c)`` so any text round-trips.

Closed-form state table (``E`` = encoding layer, ``L`` = number of layers,
``tok(q)`` = token at position ``q``, ``line(q)`` = number of newlines before ``q``)::

    slot    written by  value at position p
    TOK     embedding   one-hot tok(p)                      (zero for OOV ids)
    PREV    block 0     one-hot tok(p-1)
    PREV2   block 0     one-hot tok(p-2)
    LINE    block 0     line(p)
    DEMO    block 1     1 if tok(p-1) is the separator " ->"
    EVID    block 1     EVID[t] = DEMO and task_t(tok(p-2)) == tok(p)
    TASK    block E     first toy task consistent with every demo at q <= p
    FIRST   block E     at a separator: the token that followed every earlier separator, if unique
    ROLE    block E     JSON sub-task: key_1 at '{"', key_2/key_3 at the 1st/2nd '","'
                        (only if an earlier line holds the same token), value_i at '":"' after key i
    ANS     block E+1   separator with TASK: ' ' + task(tok(p-1)); key_i: key word;
                        value_i: first pool_i word on the current line
    STOP    block E+1   1 if tok(p-1) is the separator and TASK was set there
    PRED    block L-1   one-hot next token (uniform over the three keys when a key is unknown)

Blocks strictly between those listed are identities. The unembedding is
``softmax(margin * PRED)``. With demonstrations of a letter task the separator
state at layer ``E`` therefore holds a one-hot task code that, injected into a
bare query, reproduces the task output and lets the next step stop the line.
"""

from __future__ import annotations

import re
import string
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .. import carpools
from .base import (
    CapacityError,
    GenerationParams,
    GenerationResult,
    HiddenCapture,
    InterventionSpec,
    TokenSeq,
    check_interventions,
)

SEP = " ->"
NEWLINE = "\n"
DEFAULT_TOKEN = "?"
OPEN_TOKENS = (' {"', '{"')
COMMA = '","'
COLON = '":"'
CLOSE = '"}'
KEYS = ("color", "city", "model")
ROLES = ("key_1", "key_2", "key_3", "value_1", "value_2", "value_3")

_LOWER = string.ascii_lowercase


def _shift(c: str, k: int) -> str:
    return _LOWER[(_LOWER.index(c) + k) % 26]


# Toy tasks map a lowercase letter to an output word (without the leading space).
TOY_TASKS: dict[str, Callable[[str], str]] = {
    "identity": lambda c: c,
    "uppercase": lambda c: c.upper(),
    "next_letter": lambda c: _shift(c, 1),
    "previous_letter": lambda c: _shift(c, -1),
}
TASK_NAMES = tuple(TOY_TASKS)


def _build_vocab() -> list[str]:
    vocab: list[str] = [NEWLINE, SEP, DEFAULT_TOKEN, *OPEN_TOKENS, COLON, COMMA, CLOSE, "\t"]
    vocab += [chr(c) for c in range(32, 127)]
    vocab += [" " + c for c in string.ascii_letters]
    vocab += list(KEYS)
    words: set[str] = set()
    sources = [*carpools.COLORS, *carpools.CITIES, *carpools.MODELS, *carpools.MODELS.values(),
               *carpools.ENGINES, *carpools.DRIVETRAINS, *carpools.INTERIORS, *carpools.EXTRAS,
               *carpools.DESCRIPTION_TEMPLATES]
    for src in sources:
        words.update(re.findall(r"[A-Za-z][A-Za-z'\-]*", re.sub(r"\{[a-z_]+\}", " ", src)))
    for w in sorted(words):
        vocab += [w, " " + w]
    seen: dict[str, None] = {}
    for v in vocab:
        seen.setdefault(v, None)
    return list(seen)


VOCAB: tuple[str, ...] = tuple(_build_vocab())


@dataclass(frozen=True)
class ToyConfig:
    num_layers: int = 6
    encoding_layer: int = 3
    context_limit: int = 4096
    margin: float = 60.0
    cache_size: int = 3

    def __post_init__(self) -> None:
        if self.num_layers < 5:
            raise ValueError("the toy needs at least 5 layers")
        if not 2 <= self.encoding_layer <= self.num_layers - 3:
            raise ValueError(f"encoding_layer must lie in [2, {self.num_layers - 3}]")


class Layout:
    """Slot offsets inside the residual vector."""

    def __init__(self, vocab_size: int, n_tasks: int, n_roles: int):
        sizes = [
            ("TOK", vocab_size), ("PREV", vocab_size), ("PREV2", vocab_size), ("LINE", 1),
            ("DEMO", 1), ("EVID", n_tasks), ("TASK", n_tasks), ("FIRST", vocab_size),
            ("ROLE", n_roles), ("ANS", vocab_size), ("STOP", 1), ("PRED", vocab_size),
        ]
        self.slots: dict[str, slice] = {}
        pos = 0
        for name, size in sizes:
            self.slots[name] = slice(pos, pos + size)
            pos += size
        self.width = pos

    def __getitem__(self, name: str) -> slice:
        return self.slots[name]


class _View:
    """Decoded slot values of one residual vector; ``raw`` holds non-canonical vectors."""

    __slots__ = ("tok", "prev", "prev2", "line", "demo", "evid", "task", "first", "role",
                 "ans", "stop", "pred", "raw")

    def __init__(self):
        self.tok = self.prev = self.prev2 = None
        self.line = 0.0
        self.demo = False
        self.evid: tuple[bool, ...] = ()
        self.task = self.first = self.role = self.ans = None
        self.stop = False
        self.pred: tuple[int, ...] = ()
        self.raw: np.ndarray | None = None

    def copy(self) -> "_View":
        v = _View.__new__(_View)
        for k in _View.__slots__:
            setattr(v, k, getattr(self, k))
        return v


def _hot(slot: np.ndarray) -> int | None:
    i = int(np.argmax(slot))
    return i if slot[i] > 0.5 else None


class ToyBackend:
    """Deterministic toy model; see the module docstring for its state table."""

    def __init__(self, config: ToyConfig | None = None):
        self.config = config or ToyConfig()
        self.vocab = VOCAB
        self.V = len(VOCAB)
        self.id_of = {t: i for i, t in enumerate(VOCAB)}
        self._max_tok_len = max(len(t) for t in VOCAB)
        self.layout = Layout(self.V, len(TASK_NAMES), len(ROLES))
        self.num_layers = self.config.num_layers
        self.encoding_layer = self.config.encoding_layer
        self.hidden_width = self.layout.width
        self.context_limit = self.config.context_limit
        self.backend_id = f"toy-L{self.num_layers}-E{self.encoding_layer}"
        self._cache: OrderedDict[tuple[int, ...], list[list[_View]]] = OrderedDict()

        ids = self.id_of
        self.sep_id = ids[SEP]
        self.newline_id = ids[NEWLINE]
        self.default_id = ids[DEFAULT_TOKEN]
        self.open_ids = frozenset(ids[t] for t in OPEN_TOKENS)
        self.comma_id, self.colon_id, self.close_id = ids[COMMA], ids[COLON], ids[CLOSE]
        self.key_ids = tuple(ids[k] for k in KEYS)
        self.query_letter = {ids[c]: c for c in _LOWER}
        self.spaced_letter = {ids[" " + c]: c for c in string.ascii_letters}
        pools = (carpools.COLORS, carpools.CITIES, tuple(carpools.MODELS))
        # token id -> (attribute index, bare-word id) for words of the three pools
        self.pool_word: dict[int, tuple[int, int]] = {}
        for attr, pool in enumerate(pools):
            for w in pool:
                self.pool_word[ids[w]] = (attr, ids[w])
                self.pool_word[ids[" " + w]] = (attr, ids[w])
        self.bare_pool_ids = {ids[w]: attr for attr, pool in enumerate(pools) for w in pool}

    # -- tokenizer ------------------------------------------------------------

    def tokenize(self, text: str) -> TokenSeq:
        ids, texts, i = [], [], 0
        while i < len(text):
            for n in range(min(self._max_tok_len, len(text) - i), 0, -1):
                piece = text[i:i + n]
                tid = self.id_of.get(piece)
                if tid is not None:
                    break
            else:
                piece, tid = text[i], self.V + ord(text[i])
            ids.append(tid)
            texts.append(piece)
            i += len(piece)
        return TokenSeq(tuple(ids), tuple(texts))

    def token_text(self, tid: int) -> str:
        return self.vocab[tid] if tid < self.V else chr(tid - self.V)

    def detokenize(self, tokens) -> str:
        ids = tokens.ids if isinstance(tokens, TokenSeq) else tokens
        return "".join(self.token_text(i) for i in ids)

    def token_seq(self, ids: Sequence[int]) -> TokenSeq:
        return TokenSeq(tuple(ids), tuple(self.token_text(i) for i in ids))

    # -- vector codec -----------------------------------------------------------

    def pack(self, v: _View) -> np.ndarray:
        if v.raw is not None:
            return v.raw.copy()
        L = self.layout
        x = np.zeros(self.hidden_width)
        for name, val in (("TOK", v.tok), ("PREV", v.prev), ("PREV2", v.prev2), ("TASK", v.task),
                          ("FIRST", v.first), ("ROLE", v.role), ("ANS", v.ans)):
            if val is not None:
                x[L[name].start + val] = 1.0
        x[L["LINE"].start] = v.line
        x[L["DEMO"].start] = float(v.demo)
        x[L["STOP"].start] = float(v.stop)
        for t, on in enumerate(v.evid):
            if on:
                x[L["EVID"].start + t] = 1.0
        for tid in v.pred:
            x[L["PRED"].start + tid] = 1.0
        return x

    def unpack(self, x: np.ndarray) -> _View:
        L = self.layout
        v = _View()
        v.tok, v.prev, v.prev2 = _hot(x[L["TOK"]]), _hot(x[L["PREV"]]), _hot(x[L["PREV2"]])
        v.line = float(x[L["LINE"].start])
        v.demo = bool(x[L["DEMO"].start] > 0.5)
        v.evid = tuple(bool(e > 0.5) for e in x[L["EVID"]])
        v.task, v.first, v.role = _hot(x[L["TASK"]]), _hot(x[L["FIRST"]]), _hot(x[L["ROLE"]])
        v.ans = _hot(x[L["ANS"]])
        v.stop = bool(x[L["STOP"].start] > 0.5)
        v.pred = ()
        v.raw = np.array(x, dtype=np.float64, copy=True)
        return v

    def _write(self, v: _View, **slots) -> _View:
        """Return ``v`` with the given slots overwritten (canonical encoding)."""
        out = v.copy()
        for k, val in slots.items():
            setattr(out, k, val)
        if v.raw is not None:
            raw = v.raw.copy()
            L = self.layout
            for k, val in slots.items():
                sl = L[k.upper()]
                raw[sl] = 0.0
                if k in ("line",):
                    raw[sl.start] = val
                elif k in ("demo", "stop"):
                    raw[sl.start] = float(val)
                elif k == "evid":
                    raw[sl] = np.array(val, dtype=float)
                elif k == "pred":
                    for tid in val:
                        raw[sl.start + tid] = 1.0
                elif val is not None:
                    raw[sl.start + val] = 1.0
            out.raw = raw
        return out

    # -- blocks -------------------------------------------------------------------

    def _embed(self, tid: int) -> _View:
        v = _View()
        v.tok = tid if tid < self.V else None
        v.evid = (False,) * len(TASK_NAMES)
        return v

    def _block(self, layer: int, p: int, below: list[_View]) -> _View:
        """Output of block ``layer`` at position ``p``; ``below`` = layer-1 states at 0..p."""
        E, last = self.encoding_layer, self.num_layers - 1
        me = below[p]
        if layer == 0:
            return self._write(
                me,
                prev=below[p - 1].tok if p >= 1 else None,
                prev2=below[p - 2].tok if p >= 2 else None,
                line=float(sum(1 for q in range(p) if below[q].tok == self.newline_id)),
            )
        if layer == 1:
            demo = me.prev == self.sep_id
            letter = self.query_letter.get(me.prev2)
            out = self.spaced_letter.get(me.tok)
            evid = tuple(bool(demo and letter is not None and out is not None and fn(letter) == out)
                         for fn in TOY_TASKS.values())
            return self._write(me, demo=demo, evid=evid)
        if layer == E:
            return self._write(me, task=self._task(p, below), first=self._first(p, below),
                               role=self._role(p, below))
        if layer == E + 1:
            return self._write(me, ans=self._answer(p, below),
                               stop=bool(p >= 1 and me.prev == self.sep_id and below[p - 1].task is not None))
        if layer == last:
            return self._write(me, pred=self._predict(me))
        return me

    def _task(self, p: int, below: list[_View]) -> int | None:
        n = 0
        counts = [0] * len(TASK_NAMES)
        for q in range(p + 1):
            s = below[q]
            if s.demo:
                n += 1
            for t, on in enumerate(s.evid):
                if on:
                    counts[t] += 1
        if n == 0:
            return None
        return next((t for t, c in enumerate(counts) if c == n), None)

    def _first(self, p: int, below: list[_View]) -> int | None:
        if below[p].tok != self.sep_id:
            return None
        followers = {below[q].tok for q in range(p) if below[q].prev == self.sep_id}
        if len(followers) == 1:
            (only,) = followers
            return only
        return None

    def _role(self, p: int, below: list[_View]) -> int | None:
        me = below[p]
        if me.tok in self.open_ids:
            if any(below[q].tok in self.open_ids and below[q].line < me.line for q in range(p)):
                return 0
            return None
        if me.tok == self.comma_id:
            k = sum(1 for q in range(p + 1) if below[q].tok == self.comma_id and below[q].line == me.line)
            seen_before = any(below[q].tok == self.comma_id and below[q].line < me.line for q in range(p))
            if k in (1, 2) and seen_before:
                return k
            return None
        if me.tok == self.colon_id and me.prev in self.key_ids:
            return 3 + self.key_ids.index(me.prev)
        return None

    def _answer(self, p: int, below: list[_View]) -> int | None:
        me = below[p]
        if me.tok == self.sep_id and me.task is not None and p >= 1:
            letter = self.query_letter.get(below[p - 1].tok)
            if letter is None:
                return None
            return self.id_of[" " + TOY_TASKS[TASK_NAMES[me.task]](letter)]
        if me.role is None:
            return None
        if me.role < 3:
            return self.key_ids[me.role]
        attr = me.role - 3
        line = below[p - 1].line if p >= 1 else me.line
        for q in range(p):
            s = below[q]
            if s.line == line:
                hit = self.pool_word.get(s.tok)
                if hit is not None and hit[0] == attr:
                    return hit[1]
        return None

    def _predict(self, me: _View) -> tuple[int, ...]:
        if me.ans is not None:
            return (me.ans,)
        if me.stop:
            return (self.newline_id,)
        if me.first is not None:
            return (me.first,)
        tok = me.tok
        if tok in self.open_ids or tok == self.comma_id:
            return self.key_ids
        if tok in self.key_ids:
            return (self.colon_id,)
        if tok in self.bare_pool_ids:
            return (self.close_id,) if self.bare_pool_ids[tok] == 2 else (self.comma_id,)
        if tok == self.close_id:
            return (self.newline_id,)
        return (self.default_id,)

    # -- forward passes -----------------------------------------------------------

    def _cached_prefix(self, ids: Sequence[int], limit: int) -> list[list[_View]]:
        best: list[list[_View]] = []
        best_key = None
        for key, states in self._cache.items():
            n = 0
            m = min(len(key), len(ids), limit)
            while n < m and key[n] == ids[n]:
                n += 1
            if n > len(best):
                best, best_key = states[:n], key
        if best_key is not None:
            self._cache.move_to_end(best_key)
        return list(best)

    def _remember(self, ids: Sequence[int], states: list[list[_View]]) -> None:
        if self.config.cache_size <= 0:
            return
        key = tuple(ids)
        self._cache[key] = list(states)
        self._cache.move_to_end(key)
        while len(self._cache) > self.config.cache_size:
            self._cache.popitem(last=False)

    def _extend(self, ids: Sequence[int], cols: list[list[_View]],
                ivs: dict[tuple[int, int], np.ndarray]) -> None:
        """Append states for position ``len(cols)``. ``cols[p][0]`` is the embedding."""
        p = len(cols)
        col = [self._embed(ids[p])]
        for layer in range(self.num_layers):
            below = [c[layer] for c in cols] + [col[layer]]
            out = self._block(layer, p, below)
            vec = ivs.get((layer, p))
            if vec is not None:
                out = self.unpack(vec)
            col.append(out)
        cols.append(col)

    def _run(self, ids: Sequence[int], interventions: Sequence[InterventionSpec]) -> list[list[_View]]:
        if len(ids) > self.context_limit:
            raise CapacityError(f"{len(ids)} tokens exceed the context limit of {self.context_limit}")
        ivs = {(iv.layer, iv.position): iv.vector.astype(np.float64) for iv in interventions}
        first_iv = min((p for _, p in ivs), default=len(ids))
        cols = self._cached_prefix(ids, first_iv)
        while len(cols) < len(ids):
            self._extend(ids, cols, ivs)
        if not ivs:
            self._remember(ids, cols)
        return cols

    def forward_capture(self, tokens: TokenSeq, interventions: Sequence[InterventionSpec] = ()) -> HiddenCapture:
        if len(tokens) == 0:
            raise ValueError("forward_capture needs at least one token")
        check_interventions(self, interventions, len(tokens))
        cols = self._run(tokens.ids, interventions)
        return HiddenCapture(shape=(self.num_layers, len(tokens), self.hidden_width),
                             getter=lambda layer, p: self.pack(cols[p][layer + 1]))

    def distribution(self, final: _View) -> np.ndarray:
        if final.raw is not None:
            pred = final.raw[self.layout["PRED"]]
        else:
            pred = np.zeros(self.V)
            pred[list(final.pred)] = 1.0
        logits = self.config.margin * pred
        e = np.exp(logits - logits.max())
        return e / e.sum()

    def generate(self, prompt: TokenSeq, interventions: Sequence[InterventionSpec] = (),
                 params: GenerationParams = GenerationParams()) -> GenerationResult:
        if len(prompt) == 0:
            raise ValueError("generate needs a non-empty prompt")
        check_interventions(self, interventions, len(prompt) + params.max_tokens)
        ids = list(prompt.ids)
        ivs = {(iv.layer, iv.position): iv.vector.astype(np.float64) for iv in interventions}
        cols = self._run(ids, [iv for iv in interventions if iv.position < len(ids)])
        stop_ids = {self.id_of[s] for s in params.stop_tokens if s in self.id_of}
        out, dists, reason = [], [], "max_tokens"
        for step in range(params.max_tokens):
            dist = self.distribution(cols[-1][-1])
            tid = int(np.argmax(dist))
            out.append(tid)
            dists.append(dist)
            if tid in stop_ids:
                reason = "stop_token"
                break
            if step == params.max_tokens - 1 or len(ids) >= self.context_limit:
                break
            ids.append(tid)
            self._extend(ids, cols, ivs)
        if not ivs:
            self._remember(ids, cols)
        return GenerationResult(self.token_seq(out), tuple(dists), reason)


def toy_backend(config: ToyConfig | None = None, **overrides) -> ToyBackend:
    if overrides:
        base = config or ToyConfig()
        config = ToyConfig(**{**base.__dict__, **overrides})
    return ToyBackend(config)


__all__ = ["KEYS", "ROLES", "SEP", "TASK_NAMES", "TOY_TASKS", "ToyBackend", "ToyConfig", "VOCAB", "toy_backend"]
