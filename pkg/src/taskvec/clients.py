"""Text-completion clients for the generator and judge LLMs.

Three modes share one interface:

* ``live``   - talks to an OpenAI-compatible ``/chat/completions`` endpoint.
* ``record`` - wraps a live client and stores every response in a fixture store.
* ``replay`` - answers only from the fixture store; a miss is a hard error.

Fixture store layout: ``index.json`` maps a prompt hash to its file; each
``<hash>.json`` holds the system text, the prompt and the ordered list of
responses seen for it. Replay hands the responses out in order and repeats the
last one once the list is exhausted.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, TypeVar, runtime_checkable

import httpx

T = TypeVar("T")


class ClientError(RuntimeError):
    pass


class TransportError(ClientError):
    """Network or server failure; safe to retry."""


class CacheMissError(ClientError):
    """Replay mode was asked for a prompt that has no fixture."""


@runtime_checkable
class GeneratorClient(Protocol):
    mode: str
    label: str

    def complete(self, prompt: str, system: str | None = None) -> str: ...


def prompt_key(prompt: str, system: str | None = None) -> str:
    blob = json.dumps({"system": system or "", "prompt": prompt}, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class FixtureStore:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self._lock = threading.Lock()
        self._index_path = self.root / "index.json"
        self._index: dict[str, str] = {}
        if self._index_path.exists():
            self._index = json.loads(self._index_path.read_text(encoding="utf-8"))

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def __len__(self) -> int:
        return len(self._index)

    def responses(self, key: str) -> list[str]:
        name = self._index.get(key)
        if name is None:
            raise CacheMissError(f"no fixture for prompt hash {key[:12]}")
        data = json.loads((self.root / name).read_text(encoding="utf-8"))
        return list(data["responses"])

    def add(self, prompt: str, response: str, system: str | None = None) -> str:
        key = prompt_key(prompt, system)
        with self._lock:
            self.root.mkdir(parents=True, exist_ok=True)
            name = f"{key}.json"
            path = self.root / name
            if path.exists():
                data = json.loads(path.read_text(encoding="utf-8"))
            else:
                data = {"system": system or "", "prompt": prompt, "responses": []}
            data["responses"].append(response)
            path.write_text(json.dumps(data, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")
            self._index[key] = name
            self._index_path.write_text(json.dumps(dict(sorted(self._index.items())), indent=1) + "\n")
        return key


class ReplayClient:
    mode = "replay"

    def __init__(self, store: FixtureStore, label: str = "replay"):
        self.store = store
        self.label = label
        self._served: dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()

    def complete(self, prompt: str, system: str | None = None) -> str:
        key = prompt_key(prompt, system)
        responses = self.store.responses(key)
        if not responses:
            raise CacheMissError(f"fixture {key[:12]} has no responses")
        with self._lock:
            i = self._served[key]
            self._served[key] = i + 1
        return responses[min(i, len(responses) - 1)]


class RecordingClient:
    mode = "record"

    def __init__(self, inner: GeneratorClient, store: FixtureStore):
        self.inner = inner
        self.store = store
        self.label = inner.label

    def complete(self, prompt: str, system: str | None = None) -> str:
        text = self.inner.complete(prompt, system=system)
        self.store.add(prompt, text, system=system)
        return text


class LiveClient:
    """Minimal OpenAI-compatible chat-completions client (greedy, temperature 0)."""

    mode = "live"

    def __init__(
        self,
        endpoint: str,
        model: str,
        token_env: str | None = "TASKVEC_API_TOKEN",
        timeout: float = 60.0,
        label: str | None = None,
        transport: httpx.BaseTransport | None = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.label = label or model
        headers = {}
        token = os.environ.get(token_env) if token_env else None
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._http = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def complete(self, prompt: str, system: str | None = None) -> str:
        messages = []
        if system:
            messages.append({"role": "system", "content": system})
        messages.append({"role": "user", "content": prompt})
        payload = {"model": self.model, "messages": messages, "temperature": 0}
        try:
            resp = self._http.post(f"{self.endpoint}/chat/completions", json=payload)
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransportError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ClientError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, ValueError) as exc:
            raise TransportError(f"unexpected response body: {exc}") from exc


@dataclass
class RetryPolicy:
    attempts: int = 3
    base_delay: float = 0.5

    def backoff(self, attempt: int) -> float:
        return self.base_delay * (2 ** attempt)


def with_transport_retries(fn: Callable[[], T], policy: RetryPolicy, sleep: Callable[[float], None] = time.sleep) -> T:
    """Call ``fn`` retrying only on :class:`TransportError`."""
    for attempt in range(policy.attempts):
        try:
            return fn()
        except TransportError:
            if attempt == policy.attempts - 1:
                raise
            sleep(policy.backoff(attempt))
    raise AssertionError("unreachable")


def make_client(mode: str, fixtures: str | os.PathLike | None = None, endpoint: str | None = None,
                model: str | None = None, token_env: str | None = "TASKVEC_API_TOKEN",
                timeout: float = 60.0, label: str | None = None) -> GeneratorClient:
    if mode == "replay":
        if fixtures is None:
            raise ClientError("replay mode needs a fixture directory")
        return ReplayClient(FixtureStore(fixtures), label=label or "replay")
    if endpoint is None or model is None:
        raise ClientError(f"{mode} mode needs an endpoint and a model name")
    live = LiveClient(endpoint, model, token_env=token_env, timeout=timeout, label=label)
    if mode == "live":
        return live
    if mode == "record":
        if fixtures is None:
            raise ClientError("record mode needs a fixture directory")
        return RecordingClient(live, FixtureStore(fixtures))
    raise ClientError(f"unknown client mode {mode!r}")
