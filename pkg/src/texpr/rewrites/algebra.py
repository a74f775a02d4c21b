"""Canonicalization rewrites: duplicate merging, constant folding, and
algebraic identities."""
from __future__ import annotations

import numpy as np

from ..errors import TexprError
from ..graph import Constant, apply
from ..ops import make
from ..ops.elemwise import Elemwise
from .engine import register_rewrite

COMMUTATIVE = ("add", "mul", "maximum")


def _kernel(node):
    return node.op.kernel if isinstance(node.op, Elemwise) else None


def _all_equal(constant: Constant, value) -> bool:
    return bool(np.all(constant.value == value))


@register_rewrite("merge_duplicates", "canonicalize", "global")
def merge_duplicates(fgraph, ctx, emit) -> int:
    """Unify interchangeable constants and identical (op, inputs) nodes."""
    applied = 0
    while True:
        changed = 0
        by_sig: dict[tuple, Constant] = {}
        const_pairs = []
        for node in fgraph.toposort():
            for x in node.inputs:
                if isinstance(x, Constant) and x in fgraph.clients:
                    canon = by_sig.setdefault(x.signature(), x)
                    if canon is not x and canon.type == x.type:
                        const_pairs.append((x, canon))
        seen_pairs = set()
        for old, new in const_pairs:
            if old.id in seen_pairs or old not in fgraph.clients:
                continue
            seen_pairs.add(old.id)
            fgraph.replace(old, new, "merge_duplicates")
            changed += 1
        seen: dict[tuple, object] = {}
        for node in fgraph.toposort():
            if node.id not in fgraph.nodes or not _cse_safe(node):
                continue
            key = (node.op, tuple(x.id for x in node.inputs))
            canon = seen.get(key)
            if canon is None:
                seen[key] = node
                continue
            pairs = list(zip(node.outputs, canon.outputs))
            fgraph.replace_all(pairs, "merge_duplicates")
            emit(
                node=node,
                replaced=getattr(node.op, "display_name", node.op.name),
                replacement=getattr(canon.op, "display_name", canon.op.name),
            )
            changed += 1
        applied += changed
        if changed == 0:
            return applied


def _cse_safe(node) -> bool:
    from ..ops.control import Breakpoint

    return not isinstance(node.op, Breakpoint)


@register_rewrite("constant_fold", "canonicalize", "local")
def constant_fold(fgraph, node, ctx):
    """Evaluate nodes whose inputs are all known at construction time."""
    if not node.op.foldable or not node.inputs:
        return None
    if not all(isinstance(x, Constant) for x in node.inputs):
        return None
    try:
        values = node.op.perform([x.value for x in node.inputs])
    except (TexprError, ZeroDivisionError, FloatingPointError, ValueError):
        return None
    pairs = []
    for out, value in zip(node.outputs, values):
        folded = Constant(
            value, dtype=out.type.dtype, broadcastable=out.type.broadcastable
        )
        pairs.append((out, folded))
    return pairs


@register_rewrite("add_zero", "canonicalize", "local")
def add_zero(fgraph, node, ctx):
    """x + 0 -> x (and 0 + x), when dropping the zero keeps the type."""
    if _kernel(node) != "add":
        return None
    out = node.outputs[0]
    for i, j in ((0, 1), (1, 0)):
        z, keep = node.inputs[i], node.inputs[j]
        if isinstance(z, Constant) and _all_equal(z, 0) and keep.type == out.type:
            return [(out, keep)]
    return None


@register_rewrite("mul_one", "canonicalize", "local")
def mul_one(fgraph, node, ctx):
    """x * 1 -> x, when dropping the unit keeps the type."""
    if _kernel(node) != "mul":
        return None
    out = node.outputs[0]
    for i, j in ((0, 1), (1, 0)):
        one, keep = node.inputs[i], node.inputs[j]
        if isinstance(one, Constant) and _all_equal(one, 1) and keep.type == out.type:
            return [(out, keep)]
    return None


@register_rewrite("mul_self_to_sqr", "canonicalize", "local")
def mul_self_to_sqr(fgraph, node, ctx):
    """x * x -> square(x)."""
    if _kernel(node) != "mul":
        return None
    a, b = node.inputs
    if a is not b:
        return None
    return [(node.outputs[0], make("sqr", [a]))]


@register_rewrite("neg_neg", "canonicalize", "local")
def neg_neg(fgraph, node, ctx):
    """-(-x) -> x."""
    if _kernel(node) != "neg":
        return None
    inner = node.inputs[0].owner
    if inner is None or _kernel(inner) != "neg":
        return None
    x = inner.inputs[0]
    if x.type != node.outputs[0].type:
        return None
    return [(node.outputs[0], x)]


def _match_div_cancel(node):
    if _kernel(node) != "div":
        return None
    num, den = node.inputs
    mul_node = num.owner
    if mul_node is None or _kernel(mul_node) != "mul":
        return None
    for i, j in ((0, 1), (1, 0)):
        y, x = mul_node.inputs[i], mul_node.inputs[j]
        same = y is den or (
            isinstance(y, Constant)
            and isinstance(den, Constant)
            and y.signature() == den.signature()
        )
        if same and x.type == node.outputs[0].type:
            return x, y
    return None


@register_rewrite("div_cancel", "canonicalize", "local")
def div_cancel(fgraph, node, ctx):
    """(x * y) / y -> x, guarded: only when y is a constant that is provably
    nonzero everywhere. The unguarded version ships under the unsafe tag."""
    match = _match_div_cancel(node)
    if match is None:
        return None
    x, y = match
    if not (isinstance(y, Constant) and bool(np.all(y.value != 0))):
        return None
    return [(node.outputs[0], x)]


@register_rewrite("div_cancel_unsafe", "canonicalize", "local", tags=("unsafe",))
def div_cancel_unsafe(fgraph, node, ctx):
    """(x * y) / y -> x for any y; wrong when y has zeros (0/0 is NaN)."""
    match = _match_div_cancel(node)
    if match is None:
        return None
    return [(node.outputs[0], match[0])]


@register_rewrite("commutative_sort", "canonicalize", "local")
def commutative_sort(fgraph, node, ctx):
    """Order commutative operands (by id, constants last) so duplicate
    detection and pattern matching see one spelling."""
    kernel = _kernel(node)
    if kernel not in COMMUTATIVE:
        return None
    a, b = node.inputs
    a_const, b_const = isinstance(a, Constant), isinstance(b, Constant)
    swap = (a_const and not b_const) or (a_const == b_const and a.id > b.id)
    if not swap:
        return None
    return [(node.outputs[0], apply(node.op, [b, a])[0])]
