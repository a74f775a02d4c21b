"""Control-flow ops: the lazy conditional and the runtime breakpoint."""
from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import BreakpointAbort, TypeMismatch
from ..graph import Variable, apply, as_variable
from .base import DISCONNECTED, Op, register_op


@register_op
class IfElse(Op):
    """Select one of two same-typed branches by a scalar condition.

    The op is lazy: the runtime evaluates the condition first and only the
    thunks feeding the chosen branch ever run. Evaluating it eagerly (e.g.
    inside the plain interpreter) computes both branches but returns the
    same value.
    """

    name = "ifelse"
    lazy = True
    foldable = False

    def infer_types(self, input_types):
        cond, a, b = input_types
        if cond.ndim != 0:
            raise TypeMismatch("ifelse condition must be a scalar")
        if a != b:
            raise TypeMismatch(f"ifelse branches must share one type ({a} vs {b})")
        return [a]

    def perform(self, inputs, output_buffers=None):
        cond, a, b = inputs
        return [a if bool(cond) else b]

    def grad(self, inputs, output_grads):
        from .elemwise import zeros_like

        cond, a, b = inputs
        (v,) = output_grads
        zero = zeros_like(v)
        return [DISCONNECTED, ifelse(cond, v, zero), ifelse(cond, zero, v)]

    def rop(self, inputs, input_perturbations):
        from .elemwise import zeros_like

        cond, a, b = inputs
        _, da, db = input_perturbations
        if da is None and db is None:
            return [None]
        da = da if da is not None else zeros_like(a)
        db = db if db is not None else zeros_like(b)
        return [ifelse(cond, da, db)]

    def infer_shape(self, node, input_shapes):
        _, a, b = input_shapes
        return [a]


def ifelse(condition, then_value: Variable, else_value: Variable) -> Variable:
    return apply(IfElse(), [as_variable(condition), then_value, else_value])[0]


_HANDLERS: dict[str, Callable] = {}


def register_breakpoint_handler(label: str, handler: Callable | None) -> None:
    """Install the callback fired when a breakpoint's condition is nonzero.

    ``handler(names, values)`` may return "abort" to fail the current call;
    anything else continues. Passing None removes the handler.
    """
    if handler is None:
        _HANDLERS.pop(label, None)
    else:
        _HANDLERS[label] = handler


@register_op
class Breakpoint(Op):
    """Identity on its monitored inputs; fires a registered callback with
    their values whenever the scalar condition evaluates nonzero."""

    name = "breakpoint"
    foldable = False

    def __init__(self, label: str, names):
        self.label = label
        self.names = tuple(names)
        # Outputs alias the monitored inputs one-to-one (input 0 is the
        # condition), which the runtime's alias analysis must know about.
        self.view_map = {i: i + 1 for i in range(len(self.names))}

    @property
    def display_name(self):
        return f"breakpoint[{self.label}]"

    def attrs_key(self):
        return (self.label, self.names)

    def infer_types(self, input_types):
        cond = input_types[0]
        if cond.ndim != 0:
            raise TypeMismatch("breakpoint condition must be a scalar")
        if len(input_types) - 1 != len(self.names):
            raise TypeMismatch("breakpoint arity does not match monitored names")
        return list(input_types[1:])

    def perform(self, inputs, output_buffers=None):
        cond, *monitored = inputs
        if bool(cond):
            handler = _HANDLERS.get(self.label)
            if handler is not None:
                outcome = handler(self.names, [np.asarray(m) for m in monitored])
                if outcome == "abort":
                    raise BreakpointAbort(f"breakpoint {self.label!r} requested abort")
        return list(monitored)

    def grad(self, inputs, output_grads):
        return [DISCONNECTED] + list(output_grads)

    def rop(self, inputs, input_perturbations):
        return list(input_perturbations[1:])

    def infer_shape(self, node, input_shapes):
        return list(input_shapes[1:])

    def attrs_payload(self, encode_graph=None):
        return {"label": self.label, "names": list(self.names)}

    @classmethod
    def from_payload(cls, payload, decode_graph=None):
        return cls(payload["label"], payload["names"])


def breakpoint_op(condition, monitored: list[Variable], label: str = "default"):
    """Passthrough of ``monitored`` that triggers the registered handler when
    ``condition`` is nonzero at runtime."""
    names = tuple(v.name or f"v{v.id}" for v in monitored)
    outs = apply(Breakpoint(label, names), [as_variable(condition)] + list(monitored))
    return outs
