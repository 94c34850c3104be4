"""Adapter exposing a Hugging Face causal LM through the :class:`Backend` interface.

Reads and writes go through forward hooks on the transformer blocks, so the
value seen at "layer l" is exactly the output of block l. During cached
generation each new token is run on its own; a hook replaces the state of any
intervention whose absolute position is the one being processed, which makes the
cached keys/values of later layers derive from the injected state.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Any, Sequence

import numpy as np

from .base import (
    BackendError,
    CapacityError,
    GenerationParams,
    GenerationResult,
    HiddenCapture,
    InterventionSpec,
    TokenSeq,
    check_interventions,
)

_BLOCK_PATHS = ("transformer.h", "model.layers", "gpt_neox.layers", "model.decoder.layers", "layers")


def _find_blocks(model) -> Sequence[Any]:
    for path in _BLOCK_PATHS:
        obj = model
        try:
            for part in path.split("."):
                obj = getattr(obj, part)
        except AttributeError:
            continue
        return obj
    raise BackendError(f"cannot locate transformer blocks on {type(model).__name__}")


class HFBackend:
    def __init__(self, model, tokenizer, context_limit: int | None = None, backend_id: str | None = None):
        import torch

        self._torch = torch
        self.model = model.eval()
        self.tokenizer = tokenizer
        self.blocks = _find_blocks(model)
        cfg = model.config
        self.num_layers = len(self.blocks)
        self.hidden_width = int(getattr(cfg, "hidden_size", None) or cfg.n_embd)
        limit = context_limit or getattr(cfg, "max_position_embeddings", None) or getattr(cfg, "n_positions", 2048)
        self.context_limit = int(limit)
        self.backend_id = backend_id or f"hf:{getattr(cfg, 'name_or_path', '') or type(model).__name__}"
        self.device = next(model.parameters()).device
        self.dtype = next(model.parameters()).dtype

    @classmethod
    def from_pretrained(cls, name: str, context_limit: int | None = None, device: str = "cpu",
                        dtype: str | None = None) -> "HFBackend":
        import torch
        from transformers import AutoModelForCausalLM, AutoTokenizer

        tok = AutoTokenizer.from_pretrained(name)
        kwargs = {"dtype": getattr(torch, dtype)} if dtype else {}
        model = AutoModelForCausalLM.from_pretrained(name, **kwargs).to(device)
        return cls(model, tok, context_limit=context_limit, backend_id=f"hf:{name}")

    # -- tokenizer --------------------------------------------------------------

    def tokenize(self, text: str) -> TokenSeq:
        if not text:
            return TokenSeq.empty()
        enc = self.tokenizer(text, add_special_tokens=False, return_offsets_mapping=True)
        ids = list(enc["input_ids"])
        offsets = enc.get("offset_mapping")
        if offsets is None or len(offsets) != len(ids):
            return TokenSeq(tuple(ids), tuple(self.tokenizer.decode([i]) for i in ids))
        # tile the text: each token owns the characters up to the next token's start
        starts = [0] + [s for s, _ in offsets[1:]]
        ends = starts[1:] + [len(text)]
        texts = tuple(text[s:e] for s, e in zip(starts, ends))
        return TokenSeq(tuple(ids), texts)

    def detokenize(self, tokens) -> str:
        ids = tokens.ids if isinstance(tokens, TokenSeq) else tokens
        return self.tokenizer.decode(list(ids))

    # -- hooks ------------------------------------------------------------------------

    @contextmanager
    def _hooks(self, ivs: Sequence[InterventionSpec], record: list | None, offset: list[int]):
        torch = self._torch
        by_layer: dict[int, list[InterventionSpec]] = {}
        for iv in ivs:
            by_layer.setdefault(iv.layer, []).append(iv)
        tensors = {id(iv): torch.as_tensor(iv.vector, dtype=self.dtype, device=self.device) for iv in ivs}
        handles = []

        def make(layer: int):
            def hook(module, args, output):
                hs = output[0] if isinstance(output, tuple) else output
                start, n = offset[0], hs.shape[1]
                for iv in by_layer.get(layer, ()):
                    if start <= iv.position < start + n:
                        hs[0, iv.position - start] = tensors[id(iv)]
                if record is not None:
                    record[layer].append(hs[0].detach().to(torch.float64).cpu().numpy().copy())
                return output
            return hook

        for layer, block in enumerate(self.blocks):
            handles.append(block.register_forward_hook(make(layer)))
        try:
            yield
        finally:
            for h in handles:
                h.remove()

    # -- forward passes ---------------------------------------------------------------

    def forward_capture(self, tokens: TokenSeq, interventions: Sequence[InterventionSpec] = ()) -> HiddenCapture:
        if len(tokens) == 0:
            raise ValueError("forward_capture needs at least one token")
        if len(tokens) > self.context_limit:
            raise CapacityError(f"{len(tokens)} tokens exceed the context limit of {self.context_limit}")
        check_interventions(self, interventions, len(tokens))
        torch = self._torch
        record: list[list[np.ndarray]] = [[] for _ in range(self.num_layers)]
        ids = torch.tensor([list(tokens.ids)], device=self.device)
        with torch.no_grad(), self._hooks(interventions, record, [0]):
            self.model(input_ids=ids, use_cache=False)
        return HiddenCapture(np.stack([r[0] for r in record]))

    def generate(self, prompt: TokenSeq, interventions: Sequence[InterventionSpec] = (),
                 params: GenerationParams = GenerationParams()) -> GenerationResult:
        if len(prompt) == 0:
            raise ValueError("generate needs a non-empty prompt")
        check_interventions(self, interventions, len(prompt) + params.max_tokens)
        if len(prompt) > self.context_limit:
            raise CapacityError(f"{len(prompt)} tokens exceed the context limit of {self.context_limit}")
        torch = self._torch
        eos = getattr(self.tokenizer, "eos_token_id", None)
        offset = [0]
        out_ids: list[int] = []
        out_texts: list[str] = []
        dists: list[np.ndarray] = []
        reason = "max_tokens"
        with torch.no_grad(), self._hooks(interventions, None, offset):
            step_in = torch.tensor([list(prompt.ids)], device=self.device)
            past = None
            pos = len(prompt)
            for step in range(params.max_tokens):
                res = self.model(input_ids=step_in, past_key_values=past, use_cache=True)
                past = res.past_key_values
                logits = res.logits[0, -1].to(torch.float64)
                probs = torch.softmax(logits, dim=-1).cpu().numpy()
                tid = int(np.argmax(probs))
                piece = self.tokenizer.decode([tid])
                out_ids.append(tid)
                out_texts.append(piece)
                dists.append(probs)
                if tid == eos or any(s in piece for s in params.stop_tokens):
                    reason = "stop_token"
                    break
                if pos >= self.context_limit:
                    break
                offset[0] = pos
                step_in = torch.tensor([[tid]], device=self.device)
                pos += 1
        return GenerationResult(TokenSeq(tuple(out_ids), tuple(out_texts)), tuple(dists), reason)


__all__ = ["HFBackend"]
