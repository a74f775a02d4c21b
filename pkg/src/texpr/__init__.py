"""texpr: a tensor-expression compiler.

Expressions over typed tensor variables form acyclic single-assignment
graphs; gradients come from reverse-mode traversal (and directional
derivatives from forward mode); staged rewrites simplify, stabilize, fuse,
and mark in-place execution; a small virtual machine evaluates compiled
functions with shared state, update rules, lazy conditionals, and
serializable results.
"""

from .dtypes import ALL_DTYPES, promote
from .errors import *  # noqa: F401,F403 - the exception vocabulary is the API
from .graph import (
    ApplyNode,
    Constant,
    FunctionGraph,
    TensorType,
    Variable,
    apply,
    as_variable,
    clone_outputs,
    clone_with_replacements,
    make_input,
    tensor_type,
    toposort,
    validate,
)
from .ops import (  # noqa: F401
    add,
    breakpoint_op,
    conv2d,
    conv2d_gemm,
    conv2d_reference,
    dimshuffle,
    div,
    dot,
    eq,
    exp,
    fill,
    ge,
    grad_rule,
    gt,
    ifelse,
    infer_shape,
    infer_types,
    isnan,
    join,
    le,
    log,
    log1p,
    lt,
    max,
    maximum,
    mul,
    neg,
    neq,
    ones_like,
    perform,
    pow,
    reshape,
    register_breakpoint_handler,
    rop_rule,
    shape_of,
    sigmoid,
    sqr,
    sqrt,
    sub,
    subtensor,
    sum,
    switch,
    tanh,
    transpose,
    zeros_like,
)
from .autodiff import GradCheckReport, grad, lop, rop, verify_grad
from .scan import scan
from .rewrites.engine import (
    PRESETS,
    RewriteContext,
    RewriteLog,
    graph_signature,
    replay_log,
    run_preset,
)
from .runtime import (
    CompiledFunction,
    Profile,
    SharedVariable,
    compile,
    get_shared,
    load,
    save,
    set_shared,
    shared,
)
from .diagnostics import (
    NanGuardConfig,
    debug_print,
    dot_export,
    nan_guard_check,
    propagate_test_values,
)
from .interp import eval_graph
from .serialize import (
    decode_graph,
    dump_graph,
    encode_graph,
    load_graph,
    read_tensor,
    write_tensor,
)

# Convenience input constructors.


def scalar(name=None, dtype="float64"):
    return make_input(tensor_type(dtype, 0), name)


def vector(name=None, dtype="float64", broadcastable=None):
    return make_input(tensor_type(dtype, 1, broadcastable), name)


def matrix(name=None, dtype="float64", broadcastable=None):
    return make_input(tensor_type(dtype, 2, broadcastable), name)


def tensor3(name=None, dtype="float64", broadcastable=None):
    return make_input(tensor_type(dtype, 3, broadcastable), name)


def tensor4(name=None, dtype="float64", broadcastable=None):
    return make_input(tensor_type(dtype, 4, broadcastable), name)


__version__ = "0.1.0"
