"""Matrix and vector products."""
from __future__ import annotations

import numpy as np

from ..dtypes import is_float, promote
from ..errors import ShapeMismatch, TypeMismatch
from ..graph import TensorType, Variable, apply
from .base import DISCONNECTED, Op, UNKNOWN_SHAPE, register_op
from .shaping import dimshuffle


@register_op
class Dot(Op):
    """Inner product for rank-1/rank-2 operands (vector-vector, matrix-vector,
    vector-matrix, matrix-matrix)."""

    name = "dot"

    def infer_types(self, input_types):
        a, b = input_types
        if a.ndim not in (1, 2) or b.ndim not in (1, 2):
            raise TypeMismatch(f"dot expects rank 1 or 2 operands, got {a.ndim} and {b.ndim}")
        dtype = promote(a.dtype, b.dtype)
        if a.ndim == 2 and b.ndim == 2:
            pattern = (a.broadcastable[0], b.broadcastable[1])
        elif a.ndim == 2:
            pattern = (a.broadcastable[0],)
        elif b.ndim == 2:
            pattern = (b.broadcastable[1],)
        else:
            pattern = ()
        return [TensorType(dtype, pattern)]

    def check_runtime_shapes(self, node, shapes):
        a, b = shapes
        inner_a = a[-1]
        inner_b = b[0] if len(b) >= 1 else 1
        if inner_a != inner_b:
            raise ShapeMismatch(f"dot: inner dimensions disagree ({a} vs {b})")

    def perform(self, inputs, output_buffers=None):
        a, b = inputs
        if a.shape[-1] != b.shape[0]:
            raise ShapeMismatch(f"dot: inner dimensions disagree ({a.shape} vs {b.shape})")
        buf = output_buffers[0] if output_buffers else None
        if not (
            isinstance(buf, np.ndarray)
            and buf.dtype == np.result_type(a, b)
            and buf.flags["C_CONTIGUOUS"]
        ):
            buf = None
        if buf is not None and buf.ndim > 0:
            try:
                return [np.dot(a, b, out=buf)]
            except ValueError:
                pass
        result = np.asarray(np.dot(a, b))
        if buf is not None and buf.shape == result.shape:
            np.copyto(buf, result)
            return [buf]
        return [result]

    def grad(self, inputs, output_grads):
        a, b = inputs
        (v,) = output_grads
        an, bn = a.type.ndim, b.type.ndim
        if an == 2 and bn == 2:
            ga = dot(v, dimshuffle(b, (1, 0)))
            gb = dot(dimshuffle(a, (1, 0)), v)
        elif an == 2 and bn == 1:
            ga = dimshuffle(v, (0, "x")) * dimshuffle(b, ("x", 0))
            gb = dot(dimshuffle(a, (1, 0)), v)
        elif an == 1 and bn == 2:
            ga = dot(b, v)
            gb = dimshuffle(a, (0, "x")) * dimshuffle(v, ("x", 0))
        else:
            ga = v * b
            gb = v * a
        out = []
        for x, g in ((a, ga), (b, gb)):
            if not is_float(x.type.dtype):
                out.append(DISCONNECTED)
            else:
                out.append(_match_pattern(g, x))
        return out

    def rop(self, inputs, input_perturbations):
        a, b = inputs
        da, db = input_perturbations
        terms = []
        if da is not None:
            terms.append(dot(da, b))
        if db is not None:
            terms.append(dot(a, db))
        if not terms:
            return [None]
        return [terms[0] if len(terms) == 1 else terms[0] + terms[1]]

    def infer_shape(self, node, input_shapes):
        a, b = input_shapes
        if a is UNKNOWN_SHAPE or b is UNKNOWN_SHAPE:
            return [UNKNOWN_SHAPE]
        an, bn = node.inputs[0].type.ndim, node.inputs[1].type.ndim
        if an == 2 and bn == 2:
            return [(a[0], b[1])]
        if an == 2:
            return [(a[0],)]
        if bn == 2:
            return [(b[1],)]
        return [()]


def _match_pattern(g: Variable, target: Variable) -> Variable:
    """Gradients built from shuffles can carry a stricter broadcast pattern
    than the input; reduce/keep dims so types line up for accumulation."""
    from .elemwise import sum_to_matching_shape

    return sum_to_matching_shape(g, target)


def dot(a: Variable, b: Variable) -> Variable:
    return apply(Dot(), [a, b])[0]
