"""Structured diagnostics log shared by the build stages.

Merge conflicts, dropped records and skipped pages are facts about a build,
not errors, so they are collected as JSON-serializable events.  A sink can
stay in memory (tests inspect ``events``) or stream to a JSONL file.
"""

from __future__ import annotations

import json
import logging
import threading
from pathlib import Path
from typing import Any

logger = logging.getLogger(__name__)


class DiagnosticsLog:
    """Append-only event log; optionally mirrored to a JSONL file."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.events: list[dict[str, Any]] = []
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            # start each build with a fresh file
            self.path.write_text("", encoding="utf-8")

    def emit(self, event: str, **fields: Any) -> None:
        record = {"event": event}
        record.update(fields)
        with self._lock:
            self.events.append(record)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
        logger.debug("diagnostic: %s", record)

    def count(self, event: str) -> int:
        with self._lock:
            return sum(1 for e in self.events if e["event"] == event)

    def of(self, event: str) -> list[dict[str, Any]]:
        with self._lock:
            return [e for e in self.events if e["event"] == event]
