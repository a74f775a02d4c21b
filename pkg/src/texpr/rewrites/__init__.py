"""Staged graph rewrites. Importing the submodules registers them."""

from . import algebra, convselect, fusion, inplace, scanopt, stability  # noqa: F401
from .engine import (
    PRESETS,
    REGISTRY,
    Rewrite,
    RewriteContext,
    RewriteLog,
    STAGES,
    find_rewrite,
    graph_signature,
    replay_log,
    run_preset,
)
