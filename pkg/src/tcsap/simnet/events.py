"""Time-ordered event queue with a sequence-number tie-break."""

from __future__ import annotations

import heapq
import itertools
from typing import Any


class EventQueue:
    def __init__(self):
        self._heap: list[tuple[float, int, str, tuple]] = []
        self._seq = itertools.count()
        self.now = 0.0

    def __len__(self) -> int:
        return len(self._heap)

    def schedule(self, time: float, kind: str, *args: Any) -> None:
        if time < self.now:
            raise ValueError(f"cannot schedule {kind} at {time} before now={self.now}")
        heapq.heappush(self._heap, (time, next(self._seq), kind, args))

    def pop(self) -> tuple[float, str, tuple]:
        time, _, kind, args = heapq.heappop(self._heap)
        self.now = time
        return time, kind, args

    def peek_time(self) -> float | None:
        return self._heap[0][0] if self._heap else None
