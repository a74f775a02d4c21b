"""Instrumented buffer allocation.

The runtime and the loop executor allocate working buffers through
:func:`alloc_array` so tests can measure allocation behaviour (buffer reuse
with the garbage-collection toggle off, constant-memory loop outputs).
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

_state = threading.local()


@dataclass
class AllocStats:
    count: int = 0
    bytes: int = 0
    by_tag: dict = field(default_factory=dict)

    def record(self, nbytes: int, tag: str) -> None:
        self.count += 1
        self.bytes += nbytes
        entry = self.by_tag.setdefault(tag, [0, 0])
        entry[0] += 1
        entry[1] += nbytes


def alloc_array(shape, dtype, tag: str = "buffer") -> np.ndarray:
    arr = np.empty(shape, dtype=dtype)
    note_alloc(arr.nbytes, tag)
    return arr


def note_alloc(nbytes: int, tag: str) -> None:
    """Record an allocation that happened elsewhere (e.g. inside a kernel)."""
    for stats in getattr(_state, "trackers", ()):
        stats.record(nbytes, tag)


@contextlib.contextmanager
def track_allocations():
    """Collect AllocStats for every alloc_array call inside the block."""
    stats = AllocStats()
    trackers = getattr(_state, "trackers", ())
    _state.trackers = trackers + (stats,)
    try:
        yield stats
    finally:
        _state.trackers = trackers
