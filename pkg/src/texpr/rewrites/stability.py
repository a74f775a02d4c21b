"""Numerical-stability substitutions."""
from __future__ import annotations

import numpy as np

from ..graph import Constant
from ..ops import make
from ..ops.elemwise import Elemwise
from .engine import register_rewrite


@register_rewrite("log1p_stabilize", "stabilize", "local")
def log1p_stabilize(fgraph, node, ctx):
    """log(1 + x) -> log1p(x), which keeps precision for |x| << 1.

    Matches the constant one in either addend slot.
    """
    if not (isinstance(node.op, Elemwise) and node.op.kernel == "log"):
        return None
    add_node = node.inputs[0].owner
    if add_node is None or not (
        isinstance(add_node.op, Elemwise) and add_node.op.kernel == "add"
    ):
        return None
    out = node.outputs[0]
    for i, j in ((0, 1), (1, 0)):
        one, x = add_node.inputs[i], add_node.inputs[j]
        if isinstance(one, Constant) and bool(np.all(one.value == 1)):
            replacement = make("log1p", [x])
            if replacement.type == out.type:
                return [(out, replacement)]
    return None
