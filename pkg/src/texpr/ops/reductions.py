"""Reductions over fixed axis sets.

An empty axis tuple is an identity copy (forced by composition laws).
The max gradient routes to the first maximal element along the reduced
axes, matching the tie-break of the one-hot helper below.
"""
from __future__ import annotations

import numpy as np

from ..dtypes import is_float
from ..errors import TypeMismatch
from ..graph import TensorType, Variable, apply
from .base import DISCONNECTED, Op, UNKNOWN_SHAPE, register_op


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    axes = tuple(sorted(int(a) % ndim if int(a) < 0 else int(a) for a in axis))
    for a in axes:
        if not 0 <= a < ndim:
            raise TypeMismatch(f"reduction axis {a} out of range for rank {ndim}")
    if len(set(axes)) != len(axes):
        raise TypeMismatch("duplicate reduction axes")
    return axes


def _usable(output_buffers):
    if not output_buffers:
        return None
    buf = output_buffers[0]
    return buf if isinstance(buf, np.ndarray) else None


class _Reduction(Op):
    def __init__(self, axes):
        self.axes = tuple(axes)

    @property
    def display_name(self):
        return f"{self.name}{list(self.axes)}"

    def attrs_key(self):
        return (self.axes,)

    def infer_types(self, input_types):
        (t,) = input_types
        for a in self.axes:
            if not 0 <= a < t.ndim:
                raise TypeMismatch(f"axis {a} out of range for rank {t.ndim}")
        out = tuple(b for i, b in enumerate(t.broadcastable) if i not in self.axes)
        return [TensorType(t.dtype, out)]

    def infer_shape(self, node, input_shapes):
        (s,) = input_shapes
        if s is UNKNOWN_SHAPE:
            return [UNKNOWN_SHAPE]
        return [tuple(d for i, d in enumerate(s) if i not in self.axes)]

    def _broadcast_back(self, x: Variable, v: Variable) -> Variable:
        """v (reduced shape) -> array shaped like x, repeating along axes."""
        from .elemwise import fill
        from .shaping import dimshuffle

        pattern = []
        cursor = 0
        for i in range(x.type.ndim):
            if i in self.axes:
                pattern.append("x")
            else:
                pattern.append(cursor)
                cursor += 1
        expanded = dimshuffle(v, tuple(pattern)) if pattern else v
        return fill(x, expanded)

    def attrs_payload(self, encode_graph=None):
        return {"axes": list(self.axes)}

    @classmethod
    def from_payload(cls, payload, decode_graph=None):
        return cls(tuple(payload["axes"]))


@register_op
class Sum(_Reduction):
    name = "sum"

    def perform(self, inputs, output_buffers=None):
        (x,) = inputs
        if not self.axes:
            return [x.copy()]
        buf = _usable(output_buffers)
        if buf is not None:
            try:
                return [np.add.reduce(x, axis=self.axes, out=buf)]
            except (ValueError, TypeError):
                pass
        return [np.asarray(np.add.reduce(x, axis=self.axes))]

    def grad(self, inputs, output_grads):
        (x,) = inputs
        (v,) = output_grads
        if not is_float(x.type.dtype):
            return [DISCONNECTED]
        return [self._broadcast_back(x, v)]

    def rop(self, inputs, input_perturbations):
        (dx,) = input_perturbations
        return [None if dx is None else apply(Sum(self.axes), [dx])[0]]


@register_op
class Max(_Reduction):
    name = "max"

    def perform(self, inputs, output_buffers=None):
        (x,) = inputs
        if not self.axes:
            return [x.copy()]
        buf = _usable(output_buffers)
        if buf is not None:
            try:
                return [np.maximum.reduce(x, axis=self.axes, out=buf)]
            except (ValueError, TypeError):
                pass
        return [np.asarray(np.maximum.reduce(x, axis=self.axes))]

    def grad(self, inputs, output_grads):
        (x,) = inputs
        (v,) = output_grads
        if not is_float(x.type.dtype):
            return [DISCONNECTED]
        onehot = apply(ArgmaxOnehot(self.axes), [x])[0]
        return [onehot * self._broadcast_back(x, v)]

    def rop(self, inputs, input_perturbations):
        (dx,) = input_perturbations
        if dx is None:
            return [None]
        onehot = apply(ArgmaxOnehot(self.axes), [inputs[0]])[0]
        if not self.axes:
            return [onehot * dx]
        return [apply(Sum(self.axes), [onehot * dx])[0]]


@register_op
class ArgmaxOnehot(_Reduction):
    """Indicator of the first maximal element along the reduced axes.

    Piecewise constant, so it contributes no derivative of its own; max
    gradients multiply by it to route flow to the winning element.
    """

    name = "argmax_onehot"

    def infer_types(self, input_types):
        (t,) = input_types
        for a in self.axes:
            if not 0 <= a < t.ndim:
                raise TypeMismatch(f"axis {a} out of range for rank {t.ndim}")
        return [t]

    def perform(self, inputs, output_buffers=None):
        (x,) = inputs
        if not self.axes:
            return [np.ones_like(x)]
        others = [i for i in range(x.ndim) if i not in self.axes]
        perm = others + list(self.axes)
        moved = x.transpose(perm)
        lead = moved.shape[: len(others)]
        flat = moved.reshape(lead + (-1,))
        onehot = np.zeros_like(flat)
        idx = np.argmax(flat, axis=-1)  # ties: first occurrence
        np.put_along_axis(onehot, np.expand_dims(idx, -1), 1, axis=-1)
        back = onehot.reshape(moved.shape).transpose(np.argsort(perm))
        return [back]

    def grad(self, inputs, output_grads):
        return [DISCONNECTED]

    def rop(self, inputs, input_perturbations):
        return [None]

    def infer_shape(self, node, input_shapes):
        return [input_shapes[0]]


def sum(x: Variable, axis=None) -> Variable:  # noqa: A001 - mirrors numpy naming
    return apply(Sum(_norm_axes(axis, x.type.ndim)), [x])[0]


def max(x: Variable, axis=None) -> Variable:  # noqa: A001
    return apply(Max(_norm_axes(axis, x.type.ndim)), [x])[0]
