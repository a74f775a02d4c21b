"""Op base class and registry.

An op bundles type inference, host evaluation, a gradient rule
(vector-Jacobian product), an R-operator rule (Jacobian-vector product),
and shape inference. Ops are stateless values compared by (name, attrs):
two equal ops applied to the same inputs compute the same thing and are
mergeable by the rewriter.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import NotDifferentiable, NotSupported, ShapeMismatch, TypeMismatch
from ..graph import TensorType, Variable


class _Disconnected:
    """Marker: no gradient flows through this input (integer data, etc.)."""

    def __repr__(self):
        return "<disconnected>"


DISCONNECTED = _Disconnected()


class _UnknownShape:
    def __repr__(self):
        return "<unknown-shape>"


UNKNOWN_SHAPE = _UnknownShape()


class Op:
    name: str = "op"
    # capability flags
    has_grad = True
    has_rop = True
    inplace_capable = False
    view_capable = False
    lazy = False
    fusable = False
    foldable = True  # eligible for constant folding
    # out-index -> in-index maps; filled in by the inplace stage (destroy)
    # or inherent to the op (views).
    destroy_map: dict[int, int] = {}
    view_map: dict[int, int] = {}

    def attrs_key(self) -> tuple:
        """Value identity beyond the op name. Must be hashable."""
        return ()

    def __eq__(self, other):
        return type(self) is type(other) and self.attrs_key() == other.attrs_key()

    def __hash__(self):
        return hash((type(self).__name__, self.attrs_key()))

    def __repr__(self):
        return f"<op {self.name}>"

    # -- contract -------------------------------------------------------

    def infer_types(self, input_types: Sequence[TensorType]) -> list[TensorType]:
        raise NotImplementedError

    def perform(self, inputs: list[np.ndarray], output_buffers=None) -> list[np.ndarray]:
        """Evaluate on host arrays. May write into output_buffers when they
        match in shape/dtype; must still return the result arrays."""
        raise NotImplementedError

    def check_runtime_shapes(self, node, shapes: list[tuple]) -> None:
        """Raise ShapeMismatch when runtime shapes are incompatible."""

    def grad(self, inputs: list[Variable], output_grads: list[Variable]) -> list:
        raise NotDifferentiable(f"op {self.name} has no gradient rule")

    def rop(self, inputs: list[Variable], input_perturbations: list) -> list:
        """Forward-mode rule. ``None`` entries mean a zero perturbation and
        may be returned for outputs untouched by any perturbation."""
        raise NotSupported(f"op {self.name} has no R-operator rule")

    def infer_shape(self, node, input_shapes: list) -> list:
        """Symbolic shapes (tuples of int-or-None) or UNKNOWN_SHAPE entries."""
        return [UNKNOWN_SHAPE for _ in node.outputs]

    # -- serialization ----------------------------------------------------

    def attrs_payload(self, encode_graph=None) -> dict:
        return {}

    @classmethod
    def from_payload(cls, payload: dict, decode_graph=None) -> "Op":
        return cls()


OP_REGISTRY: dict[str, type] = {}


def register_op(cls):
    OP_REGISTRY[cls.name] = cls
    return cls


def op_from_payload(name: str, payload: dict, decode_graph=None) -> Op:
    if name not in OP_REGISTRY:
        raise TypeMismatch(f"unknown op {name!r} in graph document")
    return OP_REGISTRY[name].from_payload(payload, decode_graph)


# -- shared helpers ---------------------------------------------------------


def broadcast_pattern(patterns: Sequence[tuple[bool, ...]]) -> tuple[bool, ...]:
    """Right-aligned broadcast of patterns: missing leading dims count as
    guaranteed-1; a result dim is guaranteed-1 only if every input's is."""
    ndim = max((len(p) for p in patterns), default=0)
    out = []
    for i in range(ndim):
        flag = True
        for p in patterns:
            j = i - (ndim - len(p))
            if j >= 0:
                flag = flag and p[j]
        out.append(flag)
    return tuple(out)


def check_broadcast_shapes(node, shapes: list[tuple]) -> tuple:
    """Validate runtime shapes against the inputs' declared patterns.

    Broadcasting a dimension of extent 1 is only legal where the input's
    type declared it broadcastable; otherwise extents must match exactly.
    Returns the broadcast output shape.
    """
    ndim = max((len(s) for s in shapes), default=0)
    out = []
    for i in range(ndim):
        extent = 1
        for s in shapes:
            j = i - (ndim - len(s))
            if j < 0 or s[j] == 1:
                continue
            if extent == 1:
                extent = s[j]
            elif extent != s[j]:
                raise ShapeMismatch(
                    f"{node.op.name}: incompatible extents {extent} and {s[j]} at dim {i}"
                )
        out.append(extent)
    # Broadcasting an extent-1 dim is only legal when the type declared it.
    for x, s in zip(node.inputs, shapes):
        for j, e in enumerate(s):
            i = j + (ndim - len(s))
            if e == 1 and out[i] != 1 and not x.type.broadcastable[j]:
                raise ShapeMismatch(
                    f"{node.op.name}: {x!r} has runtime extent 1 at dim {j} where the "
                    f"type does not declare broadcastability (needs {out[i]})"
                )
    return tuple(out)
