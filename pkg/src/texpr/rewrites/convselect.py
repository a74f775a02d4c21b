"""Swap abstract convolution placeholders for concrete implementations."""
from __future__ import annotations

from ..graph import apply
from ..ops.conv import Conv2d, GEMM, REFERENCE
from ..srcinfo import suppress_traces
from .engine import register_rewrite


@register_rewrite("conv_select_implementation", "abstract_select", "global")
def conv_select_implementation(fgraph, ctx, emit) -> int:
    """Replace every placeholder convolution node with the implementation the
    configuration asks for (gemm by default; "none" leaves placeholders in
    place, which is an error when the graph is headed for execution)."""
    if ctx.conv_impl == "none":
        return 0
    algo = GEMM if ctx.conv_impl == "gemm" else REFERENCE
    applied = 0
    for node in fgraph.toposort():
        if node.id not in fgraph.nodes:
            continue
        if not (isinstance(node.op, Conv2d) and node.op.is_abstract):
            continue
        with suppress_traces():
            outs = apply(node.op.with_algo(algo), node.inputs)
        fgraph.replace_all(list(zip(node.outputs, outs)), "conv_select_implementation")
        emit(
            node=node,
            replaced=node.op.display_name,
            replacement=outs[0].owner.op.display_name,
        )
        applied += 1
    return applied
