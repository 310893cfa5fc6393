"""Structured event logging for simulation runs.

Events are appended as plain tuples so a hot simulation loop pays almost
nothing for control-plane logging; packet-level events are only recorded
when ``verbose`` is set.  Logs serialize to line-delimited JSON records
of the form ``{"time_us": ..., "category": ..., "event": ..., ...}``.
"""

from __future__ import annotations

import json
from typing import Iterator


class EventLog:
    __slots__ = ("events", "verbose")

    def __init__(self, verbose: bool = False):
        self.events: list[tuple] = []
        self.verbose = verbose

    def emit(self, time_us: int, category: str, event: str, **fields) -> None:
        self.events.append((time_us, category, event, fields))

    def named(self, event: str) -> Iterator[tuple]:
        return (e for e in self.events if e[2] == event)

    def in_category(self, category: str) -> Iterator[tuple]:
        return (e for e in self.events if e[1] == category)

    def first_time(self, event: str) -> int | None:
        for e in self.events:
            if e[2] == event:
                return e[0]
        return None

    def to_jsonl(self) -> str:
        lines = []
        for time_us, category, event, fields in self.events:
            rec = {"time_us": time_us, "category": category, "event": event}
            rec.update(fields)
            lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
        return "\n".join(lines) + ("\n" if lines else "")

    def dump_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    def __len__(self) -> int:
        return len(self.events)
