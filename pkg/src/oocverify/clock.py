"""Per-sample accounting of provider wall time.

Provider calls record ``(start, end)`` intervals into the clock bound to the
current context. Overlapping intervals from concurrent calls are merged, so
the provider share of a sample is the length of the union, and pipeline
overhead is whatever remains of the sample's total wall time.
"""

from __future__ import annotations

import contextvars
import threading
import time
from contextlib import contextmanager
from typing import Iterator

_current: contextvars.ContextVar["ProviderClock | None"] = contextvars.ContextVar(
    "provider_clock", default=None
)


def union_length(intervals: list[tuple[float, float]]) -> float:
    total = 0.0
    end = float("-inf")
    for s, e in sorted(intervals):
        if s > end:
            total += e - s
            end = e
        elif e > end:
            total += e - end
            end = e
    return total


class ProviderClock:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.intervals: dict[str, list[tuple[float, float]]] = {}

    def record(self, category: str, start: float, end: float) -> None:
        with self._lock:
            self.intervals.setdefault(category, []).append((start, end))

    def wall(self, *categories: str) -> float:
        spans = [iv for c in (categories or self.intervals) for iv in self.intervals.get(c, [])]
        return union_length(spans)

    @contextmanager
    def bind(self) -> Iterator["ProviderClock"]:
        token = _current.set(self)
        try:
            yield self
        finally:
            _current.reset(token)


@contextmanager
def provider_call(category: str) -> Iterator[None]:
    clock = _current.get()
    start = time.perf_counter()
    try:
        yield
    finally:
        if clock is not None:
            clock.record(category, start, time.perf_counter())
