"""Backend-neutral types for tokenization, hidden-state capture and generation.

"Hidden state at layer l" always means the residual stream *after* block l,
i.e. the value block l+1 consumes. Layers are numbered 0..num_layers-1.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence, runtime_checkable

import numpy as np


class BackendError(RuntimeError):
    pass


class CapacityError(BackendError):
    """Sequence longer than the backend's context limit."""


class InterventionError(BackendError, ValueError):
    """Intervention refers to a layer/position/width the backend does not have."""


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    texts: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.texts):
            raise ValueError("ids and texts must have equal length")

    def __len__(self) -> int:
        return len(self.ids)

    def __add__(self, other: "TokenSeq") -> "TokenSeq":
        return TokenSeq(self.ids + other.ids, self.texts + other.texts)

    def __getitem__(self, sl: slice) -> "TokenSeq":
        if not isinstance(sl, slice):
            raise TypeError("TokenSeq indexing takes a slice; use .ids/.texts for items")
        return TokenSeq(self.ids[sl], self.texts[sl])

    @property
    def text(self) -> str:
        return "".join(self.texts)

    def offsets(self) -> list[tuple[int, int]]:
        """Character span of every token in :attr:`text`."""
        out, pos = [], 0
        for t in self.texts:
            out.append((pos, pos + len(t)))
            pos += len(t)
        return out

    def token_at_char(self, index: int) -> int:
        for i, (s, e) in enumerate(self.offsets()):
            if s <= index < e:
                return i
        raise IndexError(f"character {index} is outside the token sequence")

    def digest(self) -> str:
        return hashlib.sha256(repr(self.ids).encode()).hexdigest()[:16]

    @classmethod
    def empty(cls) -> "TokenSeq":
        return cls((), ())


class HiddenCapture:
    """All post-block residual states of one forward pass, shape (layers, seq, width).

    Built either from a dense array or from a ``getter(layer, pos)`` so backends
    with wide states need not materialize every vector.
    """

    def __init__(self, array: np.ndarray | None = None, *, shape: tuple[int, int, int] | None = None,
                 getter: Callable[[int, int], np.ndarray] | None = None):
        if array is not None:
            self._array = np.asarray(array)
            self._shape = tuple(self._array.shape)
            self._getter = None
        else:
            if shape is None or getter is None:
                raise ValueError("lazy captures need both shape and getter")
            self._array = None
            self._shape = tuple(shape)
            self._getter = getter

    @property
    def num_layers(self) -> int:
        return self._shape[0]

    @property
    def seq_len(self) -> int:
        return self._shape[1]

    @property
    def width(self) -> int:
        return self._shape[2]

    @property
    def array(self) -> np.ndarray:
        if self._array is None:
            out = np.empty(self._shape)
            for l in range(self.num_layers):
                for p in range(self.seq_len):
                    out[l, p] = self._getter(l, p)
            self._array = out
        return self._array

    def __getitem__(self, key: tuple[int, int]) -> np.ndarray:
        layer, pos = key
        if not (0 <= layer < self.num_layers and 0 <= pos < self.seq_len):
            raise IndexError(f"(layer {layer}, position {pos}) outside capture "
                             f"({self.num_layers} layers, {self.seq_len} positions)")
        if self._array is not None:
            return self._array[layer, pos]
        return self._getter(layer, pos)

    @property
    def states(self) -> dict[tuple[int, int], np.ndarray]:
        arr = self.array
        return {(l, p): arr[l, p] for l in range(self.num_layers) for p in range(self.seq_len)}


@dataclass(frozen=True)
class InterventionSpec:
    layer: int
    position: int
    vector: np.ndarray = field(compare=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "vector", np.asarray(self.vector))


@dataclass(frozen=True)
class GenerationParams:
    max_tokens: int = 128
    stop_tokens: tuple[str, ...] = ("\n",)
    decode: str = "greedy"

    def __post_init__(self) -> None:
        if self.decode != "greedy":
            raise ValueError("only greedy decoding is supported")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


@dataclass(frozen=True)
class GenerationResult:
    tokens: TokenSeq
    step_distributions: tuple[np.ndarray, ...] = field(compare=False, repr=False)
    stop_reason: str = "max_tokens"

    @property
    def text(self) -> str:
        """Generated continuation without a trailing stop token."""
        texts = list(self.tokens.texts)
        if self.stop_reason == "stop_token" and texts:
            texts.pop()
        return "".join(texts)

    def prob(self, step: int, token_id: int) -> float:
        dist = self.step_distributions[step]
        if not 0 <= token_id < dist.shape[0]:
            return 0.0
        return float(dist[token_id])

    def same_as(self, other: "GenerationResult") -> bool:
        """Bit-identical comparison including the distributions."""
        return (
            self.tokens == other.tokens
            and self.stop_reason == other.stop_reason
            and len(self.step_distributions) == len(other.step_distributions)
            and all(np.array_equal(a, b) for a, b in zip(self.step_distributions, other.step_distributions))
        )


@runtime_checkable
class Backend(Protocol):
    backend_id: str
    num_layers: int
    hidden_width: int
    context_limit: int

    def tokenize(self, text: str) -> TokenSeq: ...

    def detokenize(self, tokens: TokenSeq | Sequence[int]) -> str: ...

    def forward_capture(self, tokens: TokenSeq,
                        interventions: Sequence[InterventionSpec] = ()) -> HiddenCapture: ...

    def generate(self, prompt: TokenSeq, interventions: Sequence[InterventionSpec] = (),
                 params: GenerationParams = GenerationParams()) -> GenerationResult: ...


def check_interventions(backend: Backend, interventions: Sequence[InterventionSpec], limit: int) -> None:
    """Validate every intervention before any compute happens."""
    for iv in interventions:
        if not 0 <= iv.layer < backend.num_layers:
            raise InterventionError(f"layer {iv.layer} out of range (backend has {backend.num_layers})")
        if iv.vector.shape != (backend.hidden_width,):
            raise InterventionError(f"vector shape {iv.vector.shape} != ({backend.hidden_width},)")
        if not 0 <= iv.position < limit:
            raise InterventionError(f"position {iv.position} outside 0..{limit - 1}")
