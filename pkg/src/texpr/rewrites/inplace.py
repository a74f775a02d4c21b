"""Destructive-execution marking.

Transpositions and basic slices already execute as constant-time views of
their input buffer (the ops declare view maps). This stage additionally
marks eligible elementwise nodes to overwrite one of their inputs instead
of allocating. A destroyed value may only be overwritten by the last
reader, so each candidate is checked against the dataflow order and
silently rejected (with a log note) when the required ordering would be
cyclic.
"""
from __future__ import annotations

from ..graph import Constant, apply
from ..ops.elemwise import Elemwise
from .engine import register_rewrite


def _descendant_ids(fgraph, node) -> set:
    seen = set()
    stack = [node]
    while stack:
        n = stack.pop()
        for out in n.outputs:
            for entry in fgraph.clients.get(out, ()):
                client = entry[0]
                if isinstance(client, str) or client.id in seen:
                    continue
                seen.add(client.id)
                stack.append(client)
    return seen


@register_rewrite("mark_destructive", "inplace", "global")
def mark_destructive(fgraph, ctx, emit) -> int:
    if any(n.op.lazy for n in fgraph.nodes.values()):
        # A reader inside an untaken branch never runs, so destroy-before-
        # read ordering cannot be enforced; skip destructive marking.
        return 0
    protected = {id(v) for v in getattr(fgraph, "protected_inputs", ())}
    for out in fgraph.outputs:
        protected.add(id(out))
    # One destroyer per buffer, including marks from earlier passes.
    destroyed: set[int] = {
        id(n.inputs[i])
        for n in fgraph.nodes.values()
        for i in n.op.destroy_map.values()
    }
    applied = 0
    for node in fgraph.toposort():
        if node.id not in fgraph.nodes:
            continue
        op = node.op
        if not (isinstance(op, Elemwise) and op.destroy is None and op.inplace_capable):
            continue
        out = node.outputs[0]
        chosen = None
        for i, candidate in enumerate(node.inputs):
            if not _eligible(fgraph, candidate, out, protected, destroyed):
                continue
            readers = [
                entry[0]
                for entry in fgraph.clients.get(candidate, ())
                if not isinstance(entry[0], str) and entry[0] is not node
            ]
            if readers:
                below = _descendant_ids(fgraph, node)
                if any(r.id in below for r in readers):
                    # Ordering the reader before the destroyer would conflict
                    # with dataflow: candidate rejected, not an error.
                    note = getattr(emit, "note", None)
                    if note is not None:
                        note(
                            f"rejected destroy of input {i} at node {node.id}: "
                            "a reader depends on this node's output"
                        )
                    continue
            chosen = i
            break
        if chosen is None:
            continue
        with_destroy = Elemwise(op.kernel, destroy=chosen)
        from ..srcinfo import suppress_traces

        with suppress_traces():
            new_out = apply(with_destroy, node.inputs)[0]
        fgraph.replace(out, new_out, "mark_destructive")
        destroyed.add(id(node.inputs[chosen]))
        emit(
            node=node,
            replaced=op.display_name,
            replacement=with_destroy.display_name,
        )
        applied += 1
    return applied


def _eligible(fgraph, candidate, out, protected, destroyed) -> bool:
    if id(candidate) in protected or id(candidate) in destroyed:
        return False
    if isinstance(candidate, Constant):
        return False
    if candidate.type.dtype != out.type.dtype:
        return False
    if candidate.type.broadcastable != out.type.broadcastable:
        return False  # buffer shapes must provably match
    owner = candidate.owner
    if owner is not None and owner.op.view_map:
        return False  # writing into a view clobbers someone else's buffer
    for entry in fgraph.clients.get(candidate, ()):
        client = entry[0]
        if not isinstance(client, str) and client.op.view_map:
            return False  # a view of this buffer may be read later
    return True
