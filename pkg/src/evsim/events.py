"""Time-stamped events and the queue that drives a simulation."""

from __future__ import annotations

import heapq
import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional

from .hardware import SessionEV

# Same-timestamp order: departures free spaces before arrivals claim them.
PRIORITY = {"unplug": 0, "plugin": 1, "recompute": 2}


@dataclass
class Event:
    timestamp: int
    kind: str
    ev: Optional[SessionEV] = None
    session_id: Optional[str] = None
    sequence: int = -1

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError("event timestamp must be non-negative")
        if self.kind not in PRIORITY:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.kind == "plugin" and self.ev is None:
            raise ValueError("plugin event needs an EV")
        if self.kind == "plugin" and self.session_id is None:
            self.session_id = self.ev.session_id

    @property
    def key(self):
        return (self.timestamp, PRIORITY[self.kind], self.sequence)

    def to_dict(self) -> dict:
        d = {"timestamp": self.timestamp, "kind": self.kind}
        if self.kind == "plugin":
            d["ev"] = self.ev.to_dict()
        elif self.session_id is not None:
            d["session_id"] = self.session_id
        return d

    @classmethod
    def from_dict(cls, d) -> "Event":
        ev = SessionEV.from_dict(d["ev"]) if "ev" in d else None
        return cls(int(d["timestamp"]), d["kind"], ev, d.get("session_id"))


def PluginEvent(timestamp: int, ev: SessionEV) -> Event:
    return Event(timestamp, "plugin", ev)


def UnplugEvent(timestamp: int, session_id: str) -> Event:
    return Event(timestamp, "unplug", session_id=session_id)


def RecomputeEvent(timestamp: int) -> Event:
    return Event(timestamp, "recompute")


class EventQueue:
    """Min-heap on (timestamp, kind priority, insertion sequence)."""

    def __init__(self, events: Iterable[Event] = ()):
        self._heap: list = []
        self._seq = itertools.count()
        for e in events:
            self.enqueue(e)

    def enqueue(self, event: Event):
        event.sequence = next(self._seq)
        heapq.heappush(self._heap, (event.key, event))

    def add_events(self, events: Iterable[Event]):
        for e in events:
            self.enqueue(e)

    def pop_due(self, now: int) -> List[Event]:
        out = []
        while self._heap and self._heap[0][0][0] <= now:
            out.append(heapq.heappop(self._heap)[1])
        return out

    def peek_time(self) -> Optional[int]:
        return self._heap[0][0][0] if self._heap else None

    def has_only(self, kind: str) -> bool:
        return all(e.kind == kind for _, e in self._heap)

    def empty(self) -> bool:
        return not self._heap

    def __len__(self):
        return len(self._heap)

    def events(self) -> List[Event]:
        """Pending events in pop order (non-destructive)."""
        return [e for _, e in sorted(self._heap, key=lambda kv: kv[0])]

    def to_jsonl(self, path):
        with open(path, "w") as f:
            for e in self.events():
                f.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "EventQueue":
        lines = Path(path).read_text().splitlines()
        return cls(Event.from_dict(json.loads(line)) for line in lines if line.strip())


def enqueue(queue: EventQueue, event: Event):
    queue.enqueue(event)


def pop_due(queue: EventQueue, now: int) -> List[Event]:
    return queue.pop_due(now)
