"""Creation-site capture for variables.

Every variable records where user code created it (one frame by default,
optionally the caller's frame too). Frames inside this package are skipped
so the trace points at user code, and capture can be suppressed while the
rewriter builds replacement variables -- those inherit the trace of the
variable they replace instead.
"""
from __future__ import annotations

import contextlib
import os
import threading
import traceback
from dataclasses import dataclass

_PKG_DIR = os.path.dirname(os.path.abspath(__file__))

_state = threading.local()


@dataclass(frozen=True)
class CreationTrace:
    filename: str
    lineno: int
    snippet: str
    caller: str | None = None  # "file:line" of the frame above, when captured

    def __str__(self):
        base = f"{self.filename}:{self.lineno}"
        if self.snippet:
            base += f" ({self.snippet})"
        return base


def set_trace_depth(frames: int) -> None:
    """0 disables capture, 1 records the creation site, 2 adds the caller."""
    if frames not in (0, 1, 2):
        raise ValueError("trace depth must be 0, 1 or 2")
    _state.depth = frames


def _depth() -> int:
    return getattr(_state, "depth", 1)


@contextlib.contextmanager
def suppress_traces():
    """Disable capture while creating variables that will inherit a trace."""
    prev = getattr(_state, "suppressed", 0)
    _state.suppressed = prev + 1
    try:
        yield
    finally:
        _state.suppressed = prev


def capture_trace() -> CreationTrace | None:
    if getattr(_state, "suppressed", 0) or _depth() == 0:
        return None
    stack = traceback.extract_stack()
    # Walk outward past frames that live inside this package.
    external = [f for f in stack if not f.filename.startswith(_PKG_DIR)]
    if not external:
        return None
    site = external[-1]
    caller = None
    if _depth() == 2 and len(external) >= 2:
        up = external[-2]
        caller = f"{up.filename}:{up.lineno}"
    return CreationTrace(site.filename, site.lineno, (site.line or "").strip(), caller)
