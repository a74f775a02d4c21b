"""Loop-specific rewrites: hoist invariant work out of the body, and keep
only the last step of histories nobody reads in full."""
from __future__ import annotations

from ..graph import Constant, Variable, apply, clone_outputs
from ..ops.shaping import Subtensor
from ..scan import FULL, LAST, ScanOp
from ..srcinfo import suppress_traces
from .engine import register_rewrite


@register_rewrite("loop_pushout_invariants", "scan", "global")
def loop_pushout_invariants(fgraph, ctx, emit) -> int:
    """Inner computations that depend only on loop invariants are computed
    once outside the loop; their value becomes a fresh invariant input."""
    applied = 0
    for node in list(fgraph.toposort()):
        if node.id not in fgraph.nodes or not isinstance(node.op, ScanOp):
            continue
        if _pushout_one(fgraph, node, emit):
            applied += 1
    return applied


def _pushout_one(fgraph, node, emit) -> bool:
    op: ScanOp = node.op
    invariant = {id(v) for v in op.inner_nonseq_vars()}
    hoistable_nodes = []
    hoisted_out_ids = set()
    for inner_node in op._order:
        if all(
            id(x) in invariant or isinstance(x, Constant) for x in inner_node.inputs
        ):
            hoistable_nodes.append(inner_node)
            for out in inner_node.outputs:
                invariant.add(id(out))
                hoisted_out_ids.add(id(out))
    if not hoistable_nodes:
        return False

    hoist_ids = {n.id for n in hoistable_nodes}
    boundary: list[Variable] = []
    seen = set()
    for inner_node in op._order:
        if inner_node.id in hoist_ids:
            continue
        for x in inner_node.inputs:
            if id(x) in hoisted_out_ids and id(x) not in seen:
                seen.add(id(x))
                boundary.append(x)
    for out in op.inner_outputs:
        if id(out) in hoisted_out_ids and id(out) not in seen:
            seen.add(id(out))
            boundary.append(out)
    if not boundary:
        return False

    _, _, _, outer_nonseqs = op.split_inputs(node.inputs)
    with suppress_traces():
        outer_exprs, _ = clone_outputs(
            boundary,
            dict(zip(op.inner_nonseq_vars(), outer_nonseqs)),
            copy_free=True,
        )
        fresh = [Variable(b.type) for b in boundary]
        new_outputs, _ = clone_outputs(
            op.inner_outputs, dict(zip(boundary, fresh)), copy_free=False
        )
        new_op = ScanOp(
            op.inner_seq_vars() + op.inner_state_vars() + op.inner_nonseq_vars() + fresh,
            new_outputs,
            n_seqs=op.n_seqs,
            n_states=op.n_states,
            n_nonseqs=op.n_nonseqs + len(fresh),
            has_nsteps=op.has_nsteps,
            strict=op.strict,
            retention=op.retention,
        )
        outs = apply(new_op, list(node.inputs) + outer_exprs)
    fgraph.replace_all(list(zip(node.outputs, outs)), "loop_pushout_invariants")
    emit(
        node=node,
        replaced=op.display_name,
        replacement=f"{new_op.display_name}+hoisted[{len(hoistable_nodes)}]",
    )
    return True


@register_rewrite("loop_last_step_only", "scan", "global")
def loop_last_step_only(fgraph, ctx, emit) -> int:
    """When every consumer of a per-step history takes only its final entry,
    record one step instead of the whole sequence (constant memory)."""
    applied = 0
    for node in list(fgraph.toposort()):
        if node.id not in fgraph.nodes or not isinstance(node.op, ScanOp):
            continue
        op: ScanOp = node.op
        retention = list(op.retention)
        changed = False
        for i in range(len(op.inner_outputs)):
            if retention[i] == LAST:
                continue
            if _only_last_step_used(fgraph, node.outputs[i]):
                retention[i] = LAST
                changed = True
        if not changed:
            continue
        with suppress_traces():
            outs = apply(op.with_retention(tuple(retention)), node.inputs)
        fgraph.replace_all(list(zip(node.outputs, outs)), "loop_last_step_only")
        emit(node=node, replaced=op.display_name, replacement="retention=last")
        applied += 1
    return applied


def _only_last_step_used(fgraph, history) -> bool:
    for entry in fgraph.clients.get(history, ()):
        client = entry[0]
        if isinstance(client, str):
            return False  # the whole history escapes as a graph output
        sub = client.op
        if not isinstance(sub, Subtensor):
            return False
        if not sub.items or sub.items[0] != -1:
            return False
    return True
