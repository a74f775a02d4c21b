"""Axis manipulation and basic indexing.

Dimshuffle (permute / insert / drop unit axes), reshape against a symbolic
shape vector, basic slicing, its scatter-add inverse, and concatenation.
Dimshuffle and slicing return constant-time views of their input buffer.
"""
from __future__ import annotations

import numpy as np

from ..dtypes import INT64, is_float
from ..errors import ShapeMismatch, TypeMismatch
from ..graph import TensorType, Variable, apply, as_variable
from .base import DISCONNECTED, Op, UNKNOWN_SHAPE, register_op


@register_op
class DimShuffle(Op):
    """Reorder dimensions per ``pattern``: entries are input dim indices or
    'x' for a fresh guaranteed-1 axis. Unreferenced input dims are dropped,
    which is only legal where the input is guaranteed extent 1."""

    name = "dimshuffle"
    view_capable = True
    view_map = {0: 0}

    def __init__(self, pattern):
        self.pattern = tuple(pattern)
        for p in self.pattern:
            if p != "x" and not isinstance(p, int):
                raise TypeMismatch(f"bad dimshuffle pattern entry {p!r}")

    @property
    def display_name(self):
        return f"dimshuffle{self.pattern}"

    def attrs_key(self):
        return (self.pattern,)

    def _dims(self):
        return [p for p in self.pattern if p != "x"]

    def infer_types(self, input_types):
        (t,) = input_types
        dims = self._dims()
        if len(set(dims)) != len(dims):
            raise TypeMismatch("dimshuffle pattern repeats a dimension")
        for d in dims:
            if not 0 <= d < t.ndim:
                raise TypeMismatch(f"dimshuffle dim {d} out of range for rank {t.ndim}")
        for i in range(t.ndim):
            if i not in dims and not t.broadcastable[i]:
                raise TypeMismatch(
                    f"dimshuffle drops dim {i} which is not guaranteed extent 1"
                )
        out = tuple(True if p == "x" else t.broadcastable[p] for p in self.pattern)
        return [TensorType(t.dtype, out)]

    def perform(self, inputs, output_buffers=None):
        (x,) = inputs
        kept = self._dims()
        dropped = [i for i in range(x.ndim) if i not in kept]
        y = x.transpose(kept + dropped)
        index = tuple(
            [slice(None) if p != "x" else None for p in self.pattern] + [0] * len(dropped)
        )
        return [y[index]]

    def grad(self, inputs, output_grads):
        (x,) = inputs
        (v,) = output_grads
        if not is_float(x.type.dtype):
            return [DISCONNECTED]
        inverse = []
        for i in range(x.type.ndim):
            inverse.append(self.pattern.index(i) if i in self.pattern else "x")
        return [dimshuffle(v, tuple(inverse))]

    def rop(self, inputs, input_perturbations):
        (dx,) = input_perturbations
        return [None if dx is None else dimshuffle(dx, self.pattern)]

    def infer_shape(self, node, input_shapes):
        (s,) = input_shapes
        if s is UNKNOWN_SHAPE:
            return [UNKNOWN_SHAPE]
        return [tuple(1 if p == "x" else s[p] for p in self.pattern)]

    def attrs_payload(self, encode_graph=None):
        return {"pattern": list(self.pattern)}

    @classmethod
    def from_payload(cls, payload, decode_graph=None):
        return cls(tuple(p if p == "x" else int(p) for p in payload["pattern"]))


def dimshuffle(x: Variable, pattern) -> Variable:
    return apply(DimShuffle(pattern), [x])[0]


def transpose(x: Variable, axes=None) -> Variable:
    if axes is None:
        axes = tuple(reversed(range(x.type.ndim)))
    return dimshuffle(x, tuple(axes))


def _norm_item(item, what="index"):
    if isinstance(item, (int, np.integer)):
        return int(item)
    if isinstance(item, tuple) and len(item) == 3:
        return item  # already normalized
    if isinstance(item, slice):
        to_int = lambda v: None if v is None else int(v)
        return (to_int(item.start), to_int(item.stop), to_int(item.step))
    raise TypeMismatch(f"unsupported {what} entry {item!r} (basic slicing only)")


def _as_index(items):
    return tuple(i if isinstance(i, int) else slice(*i) for i in items)


def _is_full_slice(entry):
    return entry in ((None, None, None), (None, None, 1))


@register_op
class Subtensor(Op):
    """Basic slicing: per-dim integer index or (start, stop, step) triple
    with None for unspecified bounds. Produces a view."""

    name = "subtensor"
    view_capable = True
    view_map = {0: 0}

    def __init__(self, items):
        self.items = tuple(_norm_item(i) for i in items)

    @property
    def display_name(self):
        return f"subtensor{self.items}"

    def attrs_key(self):
        return (self.items,)

    def infer_types(self, input_types):
        (t,) = input_types
        if len(self.items) > t.ndim:
            raise TypeMismatch(f"{len(self.items)} index entries for rank {t.ndim}")
        out = []
        for i, item in enumerate(self.items):
            if isinstance(item, int):
                continue  # dim dropped
            out.append(t.broadcastable[i] if _is_full_slice(item) else False)
        out.extend(t.broadcastable[len(self.items) :])
        return [TensorType(t.dtype, tuple(out))]

    def perform(self, inputs, output_buffers=None):
        (x,) = inputs
        try:
            return [x[_as_index(self.items)]]
        except IndexError as exc:
            raise ShapeMismatch(f"subtensor index out of bounds: {exc}") from exc

    def grad(self, inputs, output_grads):
        from .elemwise import zeros_like

        (x,) = inputs
        (v,) = output_grads
        if not is_float(x.type.dtype):
            return [DISCONNECTED]
        return [inc_subtensor(zeros_like(x), v, self.items)]

    def rop(self, inputs, input_perturbations):
        (dx,) = input_perturbations
        return [None if dx is None else apply(Subtensor(self.items), [dx])[0]]

    def infer_shape(self, node, input_shapes):
        (s,) = input_shapes
        if s is UNKNOWN_SHAPE:
            return [UNKNOWN_SHAPE]
        out = []
        for i, item in enumerate(self.items):
            if isinstance(item, int):
                continue
            if s[i] is None:
                out.append(None)
            else:
                out.append(len(range(*slice(*item).indices(s[i]))))
        out.extend(s[len(self.items) :])
        return [tuple(out)]

    def attrs_payload(self, encode_graph=None):
        return {"items": [i if isinstance(i, int) else list(i) for i in self.items]}

    @classmethod
    def from_payload(cls, payload, decode_graph=None):
        return cls(
            tuple(i if isinstance(i, int) else slice(*i) for i in payload["items"])
        )


def subtensor(x: Variable, key) -> Variable:
    if not isinstance(key, tuple):
        key = (key,)
    return apply(Subtensor(key), [x])[0]


def flip0(x: Variable) -> Variable:
    """Reverse along the leading axis (a view)."""
    return subtensor(x, (slice(None, None, -1),))


@register_op
class IncSubtensor(Op):
    """Copy of ``target`` with ``value`` added into the indexed region."""

    name = "inc_subtensor"

    def __init__(self, items):
        self.items = tuple(_norm_item(i) for i in items)

    @property
    def display_name(self):
        return f"inc_subtensor{self.items}"

    def attrs_key(self):
        return (self.items,)

    def infer_types(self, input_types):
        target, value = input_types
        probe = Subtensor(self.items).infer_types([target])[0]
        if probe.dtype != value.dtype or probe.ndim != value.ndim:
            raise TypeMismatch(
                f"inc_subtensor value {value} does not match region type {probe}"
            )
        return [target]

    def perform(self, inputs, output_buffers=None):
        target, value = inputs
        out = target.copy()
        out[_as_index(self.items)] += value
        return [out]

    def grad(self, inputs, output_grads):
        (v,) = output_grads
        grads = []
        for i, x in enumerate(inputs):
            if not is_float(x.type.dtype):
                grads.append(DISCONNECTED)
            elif i == 0:
                grads.append(v)
            else:
                grads.append(apply(Subtensor(self.items), [v])[0])
        return grads

    def rop(self, inputs, input_perturbations):
        from .elemwise import zeros_like

        dt, dv = input_perturbations
        if dt is None and dv is None:
            return [None]
        dt = dt if dt is not None else zeros_like(inputs[0])
        if dv is None:
            return [dt]
        return [inc_subtensor(dt, dv, self.items)]

    def infer_shape(self, node, input_shapes):
        return [input_shapes[0]]

    def attrs_payload(self, encode_graph=None):
        return {"items": [i if isinstance(i, int) else list(i) for i in self.items]}

    @classmethod
    def from_payload(cls, payload, decode_graph=None):
        return cls(
            tuple(i if isinstance(i, int) else slice(*i) for i in payload["items"])
        )


def inc_subtensor(target: Variable, value: Variable, items) -> Variable:
    return apply(IncSubtensor(items), [target, value])[0]


@register_op
class ShapeOf(Op):
    """Runtime shape of a tensor as an int64 vector of static length."""

    name = "shape_of"

    def infer_types(self, input_types):
        (t,) = input_types
        return [TensorType(INT64, (t.ndim == 1,))]

    def perform(self, inputs, output_buffers=None):
        return [np.asarray(inputs[0].shape, dtype=np.int64)]

    def grad(self, inputs, output_grads):
        return [DISCONNECTED]

    def rop(self, inputs, input_perturbations):
        return [None]

    def infer_shape(self, node, input_shapes):
        return [(node.inputs[0].type.ndim,)]


def shape_of(x: Variable) -> Variable:
    return apply(ShapeOf(), [x])[0]


@register_op
class Reshape(Op):
    """Reshape against a symbolic shape vector; output rank is static."""

    name = "reshape"

    def __init__(self, ndim: int):
        self.ndim = int(ndim)

    @property
    def display_name(self):
        return f"reshape{{{self.ndim}}}"

    def attrs_key(self):
        return (self.ndim,)

    def infer_types(self, input_types):
        x, shp = input_types
        if shp.ndim != 1 or shp.dtype not in ("int32", "int64"):
            raise TypeMismatch("reshape expects a 1-d integer shape vector")
        return [TensorType(x.dtype, (False,) * self.ndim)]

    def perform(self, inputs, output_buffers=None):
        x, shp = inputs
        try:
            return [np.reshape(x, tuple(int(s) for s in shp))]
        except ValueError as exc:
            raise ShapeMismatch(f"reshape: {exc}") from exc

    def grad(self, inputs, output_grads):
        x, shp = inputs
        (v,) = output_grads
        if not is_float(x.type.dtype):
            return [DISCONNECTED, DISCONNECTED]
        return [reshape(v, shape_of(x), ndim=x.type.ndim), DISCONNECTED]

    def rop(self, inputs, input_perturbations):
        dx, _ = input_perturbations
        return [None if dx is None else reshape(dx, inputs[1], ndim=self.ndim)]

    def infer_shape(self, node, input_shapes):
        from ..graph import Constant

        shp = node.inputs[1]
        if isinstance(shp, Constant):
            dims = tuple(int(s) for s in shp.value)
            if -1 not in dims:
                return [dims]
        return [(None,) * self.ndim]

    def attrs_payload(self, encode_graph=None):
        return {"ndim": self.ndim}

    @classmethod
    def from_payload(cls, payload, decode_graph=None):
        return cls(payload["ndim"])


def reshape(x: Variable, shape, ndim: int | None = None) -> Variable:
    if isinstance(shape, (tuple, list)):
        ndim = len(shape)
        shape = as_variable(np.asarray(shape, dtype=np.int64))
    elif ndim is None:
        raise TypeMismatch("reshape with a symbolic shape needs an explicit ndim")
    return apply(Reshape(ndim), [x, shape])[0]


@register_op
class Join(Op):
    """Concatenate along one axis.

    Differentiable only when every piece is guaranteed extent 1 along the
    axis: then the split boundaries are static and basic slicing can route
    the gradient. General piece lengths are runtime values, which static
    slicing cannot express.
    """

    name = "join"

    def __init__(self, axis: int):
        self.axis = int(axis)

    @property
    def display_name(self):
        return f"join[{self.axis}]"

    def attrs_key(self):
        return (self.axis,)

    def infer_types(self, input_types):
        if not input_types:
            raise TypeMismatch("join of nothing")
        ndim = input_types[0].ndim
        dtype = input_types[0].dtype
        for t in input_types:
            if t.ndim != ndim or t.dtype != dtype:
                raise TypeMismatch("join inputs must share rank and dtype")
        if not 0 <= self.axis < ndim:
            raise TypeMismatch(f"join axis {self.axis} out of range for rank {ndim}")
        out = [
            all(t.broadcastable[i] for t in input_types) and i != self.axis
            for i in range(ndim)
        ]
        return [TensorType(dtype, tuple(out))]

    def perform(self, inputs, output_buffers=None):
        try:
            return [np.concatenate(inputs, axis=self.axis)]
        except ValueError as exc:
            raise ShapeMismatch(f"join: {exc}") from exc

    def grad(self, inputs, output_grads):
        from ..errors import NotDifferentiable
        from .elemwise import sum_to_matching_shape

        (v,) = output_grads
        if any(not x.type.broadcastable[self.axis] for x in inputs):
            raise NotDifferentiable(
                "join gradient needs guaranteed extent-1 pieces along the axis "
                "(general split boundaries are runtime values)"
            )
        grads = []
        for i, x in enumerate(inputs):
            if not is_float(x.type.dtype):
                grads.append(DISCONNECTED)
                continue
            items = ((None, None, None),) * self.axis + (i,)
            piece = apply(Subtensor(items), [v])[0]
            pattern = list(range(piece.type.ndim))
            pattern.insert(self.axis, "x")
            g = dimshuffle(piece, tuple(pattern))
            grads.append(sum_to_matching_shape(g, x))
        return grads

    def rop(self, inputs, input_perturbations):
        from .elemwise import zeros_like

        if all(p is None for p in input_perturbations):
            return [None]
        parts = [
            p if p is not None else zeros_like(x)
            for x, p in zip(inputs, input_perturbations)
        ]
        return [apply(Join(self.axis), parts)[0]]

    def infer_shape(self, node, input_shapes):
        if any(s is UNKNOWN_SHAPE for s in input_shapes):
            return [UNKNOWN_SHAPE]
        ndim = node.outputs[0].type.ndim
        out = []
        for i in range(ndim):
            if i == self.axis:
                dims = [s[i] for s in input_shapes]
                out.append(None if any(d is None for d in dims) else sum(dims))
            else:
                known = [s[i] for s in input_shapes if s[i] is not None]
                out.append(known[0] if known else None)
        return [tuple(out)]

    def attrs_payload(self, encode_graph=None):
        return {"axis": self.axis}

    @classmethod
    def from_payload(cls, payload, decode_graph=None):
        return cls(payload["axis"])


def join(axis: int, *tensors: Variable) -> Variable:
    return apply(Join(axis), list(tensors))[0]
