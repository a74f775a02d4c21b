"""The built-in operation library.

Every op bundles type inference, host evaluation, a gradient rule
(vector-Jacobian product), an R-operator rule (Jacobian-vector product),
and shape inference. The module-level helpers below expose those five
contracts uniformly; the builder functions are the day-to-day API.
"""
from __future__ import annotations

from ..graph import Variable, apply
from .base import (
    DISCONNECTED,
    OP_REGISTRY,
    Op,
    UNKNOWN_SHAPE,
    op_from_payload,
    register_op,
)
from .elemwise import (
    CompositeElemwise,
    Elemwise,
    KERNELS,
    fill,
    make,
    ones_like,
    sum_to_matching_shape,
    zeros_like,
)
from .shaping import (
    DimShuffle,
    IncSubtensor,
    Join,
    Reshape,
    ShapeOf,
    Subtensor,
    dimshuffle,
    flip0,
    inc_subtensor,
    join,
    reshape,
    shape_of,
    subtensor,
    transpose,
)
from .reductions import ArgmaxOnehot, Max, Sum, max, sum
from .linalg import Dot, dot
from .control import (
    Breakpoint,
    IfElse,
    breakpoint_op,
    ifelse,
    register_breakpoint_handler,
)
from .conv import (
    Conv2d,
    conv2d,
    conv2d_gemm,
    conv2d_gemm_grad_inputs,
    conv2d_gemm_grad_weights,
    conv2d_reference,
    conv2d_reference_grad_inputs,
    conv2d_reference_grad_weights,
    conv_output_size,
)


def _binary(kernel):
    def build(a, b):
        return make(kernel, [a, b])

    build.__name__ = kernel
    return build


def _unary(kernel):
    def build(a):
        return make(kernel, [a])

    build.__name__ = kernel
    return build


add = _binary("add")
sub = _binary("sub")
mul = _binary("mul")
div = _binary("div")
pow = _binary("pow")  # noqa: A001 - mirrors numpy naming
maximum = _binary("maximum")
lt = _binary("lt")
gt = _binary("gt")
le = _binary("le")
ge = _binary("ge")
eq = _binary("eq")
neq = _binary("neq")
neg = _unary("neg")
exp = _unary("exp")
log = _unary("log")
log1p = _unary("log1p")
sqr = _unary("sqr")
sqrt = _unary("sqrt")
sigmoid = _unary("sigmoid")
tanh = _unary("tanh")
isnan = _unary("isnan")


def switch(condition, a, b) -> Variable:
    return make("switch", [condition, a, b])


# -- the op-level contracts, exposed functionally ---------------------------


def infer_types(op: Op, input_types):
    """Output types for the op on the given input types (or TypeMismatch)."""
    return op.infer_types(list(input_types))


def perform(op: Op, inputs, output_buffers=None):
    """Evaluate the op on host arrays."""
    return op.perform(list(inputs), output_buffers)


def grad_rule(op: Op, inputs, output_grads):
    """Symbolic vector-Jacobian product per input; DISCONNECTED marks inputs
    that no gradient flows through."""
    return op.grad(list(inputs), list(output_grads))


def rop_rule(op: Op, inputs, input_perturbations):
    """Symbolic Jacobian-vector product per output; None marks a zero
    perturbation."""
    return op.rop(list(inputs), list(input_perturbations))


def infer_shape(op: Op, node, input_shapes):
    """Symbolic output shapes (tuples of int-or-None, or UNKNOWN_SHAPE)."""
    return op.infer_shape(node, list(input_shapes))
