"""Run directories: config snapshot, manifest, raw rows and derived artifacts."""

from __future__ import annotations

import hashlib
import json
import threading
from pathlib import Path
from typing import Iterable

from . import __version__


class RowAppender:
    """Single writer for a line-delimited file; safe to call from worker threads."""

    def __init__(self, path: Path):
        self.path = path
        self._lock = threading.Lock()
        self._fh = path.open("w", encoding="utf-8", newline="\n")

    def write(self, line: str) -> None:
        with self._lock:
            self._fh.write(line.rstrip("\n") + "\n")

    def close(self) -> None:
        with self._lock:
            self._fh.close()

    def __enter__(self) -> "RowAppender":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class RunDir:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)

    def file(self, name: str) -> Path:
        return self.path / name

    def write_text(self, name: str, text: str) -> Path:
        p = self.file(name)
        p.write_text(text, encoding="utf-8", newline="\n")
        return p

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")

    def write_lines(self, name: str, lines: Iterable[str]) -> Path:
        with RowAppender(self.file(name)) as app:
            for line in lines:
                app.write(line)
        return self.file(name)

    def appender(self, name: str) -> RowAppender:
        return RowAppender(self.file(name))

    def snapshot(self, raw_text: str, resolved_yaml: str) -> None:
        """``config.yaml`` is the file as given; ``resolved_config.yaml`` includes overrides."""
        self.write_text("config.yaml", raw_text)
        self.write_text("resolved_config.yaml", resolved_yaml)

    def manifest(self, command: str, resolved_yaml: str, **fields) -> Path:
        body = {
            "command": command,
            "code_version": __version__,
            "config_digest": hashlib.sha256(resolved_yaml.encode("utf-8")).hexdigest()[:16],
            **fields,
        }
        return self.write_json("manifest.json", body)


__all__ = ["RowAppender", "RunDir"]
