"""Append-only JSON-lines stores with single-writer discipline.

Every durable record type in the service (predictions, corrections,
resolutions, latency samples) lives in its own `.jsonl` file: one JSON
object per line, appends only, never rewritten in place. Recovery is a
linear replay of the file. Writers are serialized through a per-store
lock; readers take a snapshot.
"""

from __future__ import annotations

import json
import os
import threading
from pathlib import Path
from typing import Any, Iterator


class StorageFailure(Exception):
    """An append could not be made durable; the record must not be counted."""


class JsonlStore:
    """Append-only JSON-lines file with optional fsync-per-append.

    Holds the file open in append mode; the single-writer lock serializes
    appends and every write is flushed before the call returns, so readers
    that reopen the path see complete lines only.
    """

    def __init__(self, path: str | Path, fsync: bool = False):
        self.path = Path(path)
        self.fsync = fsync
        self._lock = threading.Lock()
        self._fh = None
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict[str, Any]) -> None:
        line = json.dumps(record, sort_keys=True, separators=(",", ":"))
        with self._lock:
            try:
                if self._fh is None:
                    self._fh = open(self.path, "a", encoding="utf-8")
                self._fh.write(line + "\n")
                self._fh.flush()
                if self.fsync:
                    os.fsync(self._fh.fileno())
            except OSError as exc:
                raise StorageFailure(f"append to {self.path} failed: {exc}") from exc

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def read_all(self) -> list[dict[str, Any]]:
        with self._lock:
            if self._fh is not None:
                self._fh.flush()
            if not self.path.exists():
                return []
            text = self.path.read_text(encoding="utf-8")
        records = []
        for line in text.splitlines():
            line = line.strip()
            if line:
                records.append(json.loads(line))
        return records

    def __iter__(self) -> Iterator[dict[str, Any]]:
        return iter(self.read_all())


def atomic_write_json(path: str | Path, payload: Any) -> None:
    """Write JSON via temp-file-then-rename so readers never see a torn file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    os.replace(tmp, path)


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))
