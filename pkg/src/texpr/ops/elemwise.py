"""Elementwise operations.

Each scalar kernel knows how to evaluate itself on host arrays, its
per-input partial derivatives (as graph builders), and its forward-mode
rule. ``Elemwise`` lifts a kernel over tensors with right-aligned
broadcasting; ``CompositeElemwise`` evaluates a whole scalar subgraph per
element so a chain of elementwise nodes costs one pass over the data.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..dtypes import BOOL, is_float, np_dtype, promote_all
from ..errors import TypeMismatch
from ..graph import (
    ApplyNode,
    Constant,
    TensorType,
    Variable,
    apply,
    as_variable,
    io_toposort,
)
from .base import (
    DISCONNECTED,
    Op,
    UNKNOWN_SHAPE,
    broadcast_pattern,
    check_broadcast_shapes,
    register_op,
)

_ERRSTATE = {"divide": "ignore", "invalid": "ignore", "over": "ignore", "under": "ignore"}


def _c(value, like: Variable) -> Constant:
    """Scalar constant in the dtype of ``like``."""
    return Constant(value, dtype=like.type.dtype)


def _stable_sigmoid(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _div(a, b, out=None):
    if a.dtype.kind in "iub" or b.dtype.kind in "iub":
        if np.issubdtype(np.result_type(a, b), np.integer):
            if np.any(b == 0):
                raise ZeroDivisionError("integer division by zero")
            return np.floor_divide(a, b, out=out)
    return np.true_divide(a, b, out=out)


@dataclass(frozen=True)
class Kernel:
    name: str
    arity: int
    fn: Callable
    bool_out: bool = False
    ufunc: bool = True  # fn accepts an out= keyword

    def apply(self, args, out=None):
        if self.ufunc:
            return self.fn(*args, out=out)
        result = self.fn(*args)
        if out is not None:
            np.copyto(out, result)
            return out
        return result


def _second(a, b):
    shape = np.broadcast_shapes(a.shape, b.shape)
    dtype = np.result_type(a, b)
    out = np.empty(shape, dtype=dtype)
    np.copyto(out, b)
    return out


KERNELS: dict[str, Kernel] = {}


def _kernel(name, arity, fn, bool_out=False, ufunc=True):
    KERNELS[name] = Kernel(name, arity, fn, bool_out, ufunc)


_kernel("add", 2, np.add)
_kernel("sub", 2, np.subtract)
_kernel("mul", 2, np.multiply)
_kernel("div", 2, _div)
_kernel("neg", 1, np.negative)
_kernel("exp", 1, np.exp)
_kernel("log", 1, np.log)
_kernel("log1p", 1, np.log1p)
_kernel("pow", 2, np.power)
_kernel("sqr", 1, np.square)
_kernel("sqrt", 1, np.sqrt)
_kernel("sigmoid", 1, _stable_sigmoid, ufunc=False)
_kernel("tanh", 1, np.tanh)
_kernel("maximum", 2, np.maximum)
_kernel("switch", 3, lambda c, a, b: np.where(c, a, b), ufunc=False)
_kernel("second", 2, _second, ufunc=False)
_kernel("lt", 2, np.less, bool_out=True)
_kernel("gt", 2, np.greater, bool_out=True)
_kernel("le", 2, np.less_equal, bool_out=True)
_kernel("ge", 2, np.greater_equal, bool_out=True)
_kernel("eq", 2, np.equal, bool_out=True)
_kernel("neq", 2, np.not_equal, bool_out=True)
_kernel("isnan", 1, np.isnan, bool_out=True)


def _grad_pow(inputs, v):
    x, y = inputs
    return [
        v * y * make(  # d/dx = y * x**(y-1); NaN at 0**neg per IEEE propagation
            "pow", [x, y - _c(1, y)]
        ),
        v * make("pow", [x, y]) * make("log", [x]),
    ]


GRADS: dict[str, Callable] = {
    "add": lambda inputs, v: [v, v],
    "sub": lambda inputs, v: [v, make("neg", [v])],
    "mul": lambda inputs, v: [v * inputs[1], v * inputs[0]],
    "div": lambda inputs, v: [
        v / inputs[1],
        make("neg", [v * inputs[0] / (inputs[1] * inputs[1])]),
    ],
    "neg": lambda inputs, v: [make("neg", [v])],
    "exp": lambda inputs, v: [v * make("exp", inputs)],
    "log": lambda inputs, v: [v / inputs[0]],
    "log1p": lambda inputs, v: [v / (inputs[0] + _c(1, inputs[0]))],
    "pow": _grad_pow,
    "sqr": lambda inputs, v: [v * inputs[0] * _c(2, inputs[0])],
    "sqrt": lambda inputs, v: [v / (make("sqrt", inputs) * _c(2, inputs[0]))],
    "sigmoid": lambda inputs, v: [
        (lambda s: v * s * (_c(1, s) - s))(make("sigmoid", inputs))
    ],
    "tanh": lambda inputs, v: [
        (lambda t: v * (_c(1, t) - make("sqr", [t])))(make("tanh", inputs))
    ],
    "maximum": lambda inputs, v: [
        v * make("ge", inputs),  # ties route to the first operand
        v * make("lt", inputs),
    ],
    "switch": lambda inputs, v: [
        DISCONNECTED,
        make("switch", [inputs[0], v, _c(0, v)]),
        make("switch", [inputs[0], _c(0, v), v]),
    ],
    "second": lambda inputs, v: [DISCONNECTED, v],
}


def _rop_linear2(sign):
    def rule(inputs, dx):
        a, b = dx
        if a is None and b is None:
            return [None]
        if a is None:
            return [make("neg", [b]) if sign < 0 else b]
        if b is None:
            return [a]
        return [a - b if sign < 0 else a + b]

    return rule


def _rop_mul(inputs, dx):
    x, y = inputs
    da, db = dx
    terms = []
    if da is not None:
        terms.append(da * y)
    if db is not None:
        terms.append(x * db)
    if not terms:
        return [None]
    return [terms[0] if len(terms) == 1 else terms[0] + terms[1]]


def _rop_div(inputs, dx):
    x, y = inputs
    da, db = dx
    terms = []
    if da is not None:
        terms.append(da / y)
    if db is not None:
        terms.append(make("neg", [x * db / (y * y)]))
    if not terms:
        return [None]
    return [terms[0] if len(terms) == 1 else terms[0] + terms[1]]


def _rop_chain(factor_builder):
    """Unary op whose tangent is factor(x) * dx."""

    def rule(inputs, dx):
        if dx[0] is None:
            return [None]
        return [factor_builder(inputs[0]) * dx[0]]

    return rule


def _rop_pow(inputs, dx):
    x, y = inputs
    da, db = dx
    terms = []
    if da is not None:
        terms.append(y * make("pow", [x, y - _c(1, y)]) * da)
    if db is not None:
        terms.append(make("pow", [x, y]) * make("log", [x]) * db)
    if not terms:
        return [None]
    return [terms[0] if len(terms) == 1 else terms[0] + terms[1]]


def _rop_switch(inputs, dx):
    _, da, db = dx
    if da is None and db is None:
        return [None]
    da = da if da is not None else _c(0, inputs[1])
    db = db if db is not None else _c(0, inputs[2])
    return [make("switch", [inputs[0], da, db])]


def _rop_maximum(inputs, dx):
    da, db = dx
    if da is None and db is None:
        return [None]
    da = da if da is not None else _c(0, inputs[0])
    db = db if db is not None else _c(0, inputs[1])
    return [make("switch", [make("ge", inputs), da, db])]


ROPS: dict[str, Callable] = {
    "add": _rop_linear2(+1),
    "sub": _rop_linear2(-1),
    "mul": _rop_mul,
    "div": _rop_div,
    "neg": lambda inputs, dx: [None if dx[0] is None else make("neg", [dx[0]])],
    "exp": _rop_chain(lambda x: make("exp", [x])),
    "log": _rop_chain(lambda x: _c(1, x) / x),
    "log1p": _rop_chain(lambda x: _c(1, x) / (x + _c(1, x))),
    "pow": _rop_pow,
    "sqr": _rop_chain(lambda x: x * _c(2, x)),
    "sqrt": _rop_chain(lambda x: _c(1, x) / (make("sqrt", [x]) * _c(2, x))),
    "sigmoid": _rop_chain(
        lambda x: (lambda s: s * (_c(1, s) - s))(make("sigmoid", [x]))
    ),
    "tanh": _rop_chain(lambda x: (lambda t: _c(1, t) - make("sqr", [t]))(make("tanh", [x]))),
    "maximum": _rop_maximum,
    "switch": _rop_switch,
    "second": lambda inputs, dx: [
        None if dx[1] is None else make("second", [inputs[0], dx[1]])
    ],
    "lt": lambda inputs, dx: [None],
    "gt": lambda inputs, dx: [None],
    "le": lambda inputs, dx: [None],
    "ge": lambda inputs, dx: [None],
    "eq": lambda inputs, dx: [None],
    "neq": lambda inputs, dx: [None],
    "isnan": lambda inputs, dx: [None],
}


@register_op
class Elemwise(Op):
    """Pointwise application of one scalar kernel with broadcasting."""

    name = "elemwise"
    inplace_capable = True
    fusable = True

    def __init__(self, kernel: str, destroy: int | None = None):
        if kernel not in KERNELS:
            raise TypeMismatch(f"unknown scalar kernel {kernel!r}")
        self.kernel = kernel
        self.destroy = destroy
        self.destroy_map = {} if destroy is None else {0: destroy}

    @property
    def display_name(self):
        base = self.kernel
        return base + "[inplace]" if self.destroy is not None else base

    def attrs_key(self):
        return (self.kernel, self.destroy)

    def infer_types(self, input_types):
        spec = KERNELS[self.kernel]
        if len(input_types) != spec.arity:
            raise TypeMismatch(
                f"{self.kernel} expects {spec.arity} inputs, got {len(input_types)}"
            )
        if spec.bool_out:
            dtype = BOOL
        elif self.kernel == "switch":
            dtype = promote_all([t.dtype for t in input_types[1:]])
        else:
            dtype = promote_all([t.dtype for t in input_types])
        pattern = broadcast_pattern([t.broadcastable for t in input_types])
        return [TensorType(dtype, pattern)]

    def check_runtime_shapes(self, node, shapes):
        check_broadcast_shapes(node, shapes)

    def perform(self, inputs, output_buffers=None):
        spec = KERNELS[self.kernel]
        out = None
        if output_buffers is not None and isinstance(output_buffers[0], np.ndarray):
            buf = output_buffers[0]
            shape = np.broadcast_shapes(*(a.shape for a in inputs))
            if buf.shape == shape:
                out = buf
        with np.errstate(**_ERRSTATE):
            result = spec.apply(inputs, out=out)
        if spec.bool_out and result.dtype != np.bool_:
            result = result.astype(np.bool_)
        return [result]

    def grad(self, inputs, output_grads):
        (v,) = output_grads
        out_type = self.infer_types([x.type for x in inputs])[0]
        if self.kernel not in GRADS or not is_float(out_type.dtype):
            return [DISCONNECTED for _ in inputs]
        raws = GRADS[self.kernel](inputs, v)
        grads = []
        for x, g in zip(inputs, raws):
            if g is DISCONNECTED or not is_float(x.type.dtype):
                grads.append(DISCONNECTED)
            else:
                grads.append(sum_to_matching_shape(g, x))
        return grads

    def rop(self, inputs, input_perturbations):
        return ROPS[self.kernel](inputs, input_perturbations)

    def infer_shape(self, node, input_shapes):
        ndim = node.outputs[0].type.ndim
        out = []
        for i in range(ndim):
            extent = None
            for s in input_shapes:
                if s is UNKNOWN_SHAPE:
                    continue
                j = i - (ndim - len(s))
                if j < 0 or s[j] is None:
                    continue
                if s[j] != 1:
                    extent = s[j]
                elif extent is None:
                    extent = 1
            out.append(extent)
        return [tuple(out)]

    def attrs_payload(self, encode_graph=None):
        payload = {"kernel": self.kernel}
        if self.destroy is not None:
            payload["destroy"] = self.destroy
        return payload

    @classmethod
    def from_payload(cls, payload, decode_graph=None):
        return cls(payload["kernel"], payload.get("destroy"))


def make(kernel: str, args: Sequence) -> Variable:
    """Apply a scalar kernel elementwise; coerces plain numbers to constants."""
    variables = []
    anchor = next((a for a in args if isinstance(a, Variable)), None)
    for a in args:
        if isinstance(a, Variable):
            variables.append(a)
        elif (
            anchor is not None
            and isinstance(a, (int, bool))
            and not isinstance(a, np.ndarray)
        ):
            variables.append(Constant(a, dtype=anchor.type.dtype))
        elif (
            anchor is not None
            and isinstance(a, float)
            and is_float(anchor.type.dtype)
        ):
            variables.append(Constant(a, dtype=anchor.type.dtype))
        else:
            variables.append(as_variable(a))
    return apply(Elemwise(kernel), variables)[0]


def fill(template: Variable, value) -> Variable:
    """Array shaped like ``template`` filled with the broadcast of ``value``."""
    return make("second", [template, value])


def zeros_like(x: Variable) -> Variable:
    return fill(x, _c(0, x))


def ones_like(x: Variable) -> Variable:
    return fill(x, _c(1, x))


def sum_to_matching_shape(g: Variable, target: Variable) -> Variable:
    """Reduce a broadcast gradient back to the shape of ``target``.

    Sums over leading dims the target lacks and over dims where the target
    is guaranteed extent 1 but the gradient is not, then reinserts those
    unit dims so the result's type equals the target's.
    """
    from . import reductions, shaping

    t_pattern = target.type.broadcastable
    g_pattern = g.type.broadcastable
    lead = len(g_pattern) - len(t_pattern)
    axes = list(range(lead))
    keep_with_unit = []
    for i, t_b in enumerate(t_pattern):
        if t_b and not g_pattern[lead + i]:
            axes.append(lead + i)
            keep_with_unit.append(i)
    if not axes:
        return g
    reduced = reductions.sum(g, axis=tuple(axes))
    if not keep_with_unit:
        return reduced
    pattern = []
    cursor = 0
    for i in range(len(t_pattern)):
        if i in keep_with_unit:
            pattern.append("x")
        else:
            pattern.append(cursor)
            cursor += 1
    return shaping.dimshuffle(reduced, tuple(pattern))


# ---------------------------------------------------------------------------
# Fused composite


_CHUNK = 1 << 15


@register_op
class CompositeElemwise(Op):
    """One node evaluating an inner scalar graph elementwise.

    Semantics are identical to running the constituent elementwise nodes
    unfused; evaluation walks the data in cache-sized chunks when inputs
    share one contiguous shape so the whole chain costs a single pass.
    """

    name = "composite"
    # Chunked evaluation may revisit an aliased buffer mid-pass, so fused
    # nodes never overwrite their inputs; plain elementwise nodes do.
    inplace_capable = False
    fusable = True

    def __init__(self, inner_inputs: list[Variable], inner_outputs: list[Variable], destroy=None):
        self.inner_inputs = list(inner_inputs)
        self.inner_outputs = list(inner_outputs)
        self.destroy = destroy
        self.destroy_map = {} if destroy is None else {0: destroy}
        self._order = io_toposort(self.inner_outputs)
        self._key = self._signature()

    @property
    def display_name(self):
        return f"composite[{len(self._order)}]"

    def _signature(self):
        index = {v: ("in", i, v.type.dtype) for i, v in enumerate(self.inner_inputs)}
        entries = []
        for n, node in enumerate(self._order):
            refs = []
            for x in node.inputs:
                if x in index:
                    refs.append(index[x])
                elif isinstance(x, Constant):
                    refs.append(("const", x.type.dtype, x.value.tobytes()))
                else:
                    raise TypeMismatch("composite inner graph references a free variable")
            for i, out in enumerate(node.outputs):
                index[out] = ("node", n, i)
            entries.append((node.op.attrs_key(), tuple(refs)))
        outs = tuple(index[v] for v in self.inner_outputs)
        return (tuple(entries), outs)

    def attrs_key(self):
        return (self._key, self.destroy)

    def infer_types(self, input_types):
        if len(input_types) != len(self.inner_inputs):
            raise TypeMismatch("composite arity mismatch")
        for t, leaf in zip(input_types, self.inner_inputs):
            if t.dtype != leaf.type.dtype:
                raise TypeMismatch(
                    f"composite input dtype {t.dtype} != expected {leaf.type.dtype}"
                )
        reachable = self._reachable_leaves()
        out_types = []
        for out, leaves in zip(self.inner_outputs, reachable):
            pattern = broadcast_pattern(
                [input_types[i].broadcastable for i in leaves]
            ) if leaves else ()
            out_types.append(TensorType(out.type.dtype, pattern))
        return out_types

    def _reachable_leaves(self):
        pos = {id(v): i for i, v in enumerate(self.inner_inputs)}
        result = []
        for out in self.inner_outputs:
            leaves = set()
            stack, seen = [out], set()
            while stack:
                v = stack.pop()
                if id(v) in seen:
                    continue
                seen.add(id(v))
                if id(v) in pos:
                    leaves.add(pos[id(v)])
                elif v.owner is not None:
                    stack.extend(v.owner.inputs)
            result.append(sorted(leaves))
        return result

    def check_runtime_shapes(self, node, shapes):
        check_broadcast_shapes(node, shapes)

    def perform(self, inputs, output_buffers=None):
        same_shape = len({a.shape for a in inputs}) <= 1
        contiguous = all(a.flags["C_CONTIGUOUS"] for a in inputs)
        size = inputs[0].size if inputs else 0
        if same_shape and contiguous and size >= _CHUNK and inputs:
            return self._perform_chunked(inputs, output_buffers)
        return self._perform_plain(inputs, output_buffers)

    def _perform_plain(self, inputs, output_buffers=None):
        env = {id(v): a for v, a in zip(self.inner_inputs, inputs)}
        with np.errstate(**_ERRSTATE):
            for node in self._order:
                args = [
                    env[id(x)] if id(x) in env else x.value for x in node.inputs
                ]
                results = node.op.perform(args)
                for out, r in zip(node.outputs, results):
                    env[id(out)] = r
        return [np.asarray(env[id(v)]) for v in self.inner_outputs]

    def _perform_chunked(self, inputs, output_buffers=None):
        shape = inputs[0].shape
        size = inputs[0].size
        flats = [a.reshape(-1) for a in inputs]
        outs = []
        for i, v in enumerate(self.inner_outputs):
            buf = None
            if output_buffers is not None and output_buffers[i] is not None:
                candidate = output_buffers[i]
                if candidate.shape == shape and candidate.flags["C_CONTIGUOUS"]:
                    buf = candidate
            if buf is None:
                buf = np.empty(shape, dtype=np_dtype(v.type.dtype))
            outs.append(buf)
        out_flats = [o.reshape(-1) for o in outs]
        out_for = {id(v): f for v, f in zip(self.inner_outputs, out_flats)}
        scratch = {}
        for node in self._order:
            for out in node.outputs:
                if id(out) not in out_for:
                    scratch[id(out)] = np.empty(_CHUNK, dtype=np_dtype(out.type.dtype))
        with np.errstate(**_ERRSTATE):
            for start in range(0, size, _CHUNK):
                stop = min(start + _CHUNK, size)
                n = stop - start
                env = {
                    id(v): f[start:stop] for v, f in zip(self.inner_inputs, flats)
                }
                for node in self._order:
                    args = [
                        env[id(x)] if id(x) in env else x.value for x in node.inputs
                    ]
                    out_var = node.outputs[0]
                    if id(out_var) in out_for:
                        target = out_for[id(out_var)][start:stop]
                    else:
                        target = scratch[id(out_var)][:n]
                    node.op.perform(args, [target])
                    env[id(out_var)] = target
        return outs

    def rebuild(self, inputs: Sequence[Variable]) -> list[Variable]:
        """Re-express the fused computation as plain elementwise nodes over
        the given tensor inputs (used for differentiation)."""
        env = {id(v): x for v, x in zip(self.inner_inputs, inputs)}
        for node in self._order:
            args = [env[id(x)] if id(x) in env else x for x in node.inputs]
            results = apply(node.op, args)
            for out, r in zip(node.outputs, results):
                env[id(out)] = r
        return [env[id(v)] for v in self.inner_outputs]

    def grad(self, inputs, output_grads):
        from .. import autodiff

        rebuilt = self.rebuild(inputs)
        return autodiff.lop(rebuilt, output_grads, inputs)

    def rop(self, inputs, input_perturbations):
        from .. import autodiff

        rebuilt = self.rebuild(inputs)
        return autodiff.forward_perturbations(
            rebuilt, dict(zip(inputs, input_perturbations))
        )

    def infer_shape(self, node, input_shapes):
        known = [s for s in input_shapes if s is not UNKNOWN_SHAPE]
        if not known:
            return [UNKNOWN_SHAPE for _ in node.outputs]
        out = []
        for o in node.outputs:
            ndim = o.type.ndim
            dims = []
            for i in range(ndim):
                extent = None
                for s in known:
                    j = i - (ndim - len(s))
                    if j < 0 or s[j] is None:
                        continue
                    if s[j] != 1:
                        extent = s[j]
                    elif extent is None:
                        extent = 1
                dims.append(extent)
            out.append(tuple(dims))
        return out

    def attrs_payload(self, encode_graph=None):
        ref: dict[int, list] = {}
        inputs_doc = []
        for i, v in enumerate(self.inner_inputs):
            ref[id(v)] = ["in", i]
            inputs_doc.append({"dtype": v.type.dtype})
        consts_doc: list[dict] = []
        nodes_doc: list[dict] = []
        for n, node in enumerate(self._order):
            refs = []
            for x in node.inputs:
                if id(x) not in ref:
                    if not isinstance(x, Constant):
                        raise TypeMismatch("composite inner graph references a free variable")
                    ref[id(x)] = ["const", len(consts_doc)]
                    consts_doc.append({"dtype": x.type.dtype, "value": x.value.tolist()})
                refs.append(ref[id(x)])
            nodes_doc.append({"kernel": node.op.kernel, "inputs": refs})
            ref[id(node.outputs[0])] = ["node", n]
        payload = {
            "inputs": inputs_doc,
            "consts": consts_doc,
            "nodes": nodes_doc,
            "outputs": [ref[id(v)] for v in self.inner_outputs],
        }
        if self.destroy is not None:
            payload["destroy"] = self.destroy
        return payload

    @classmethod
    def from_payload(cls, payload, decode_graph=None):
        scalars = [Variable(TensorType(e["dtype"], ())) for e in payload["inputs"]]
        consts = [
            Constant(np.asarray(e["value"]), dtype=e["dtype"]) for e in payload["consts"]
        ]
        node_outs: list[Variable] = []

        def resolve(r):
            kind, idx = r
            if kind == "in":
                return scalars[idx]
            if kind == "const":
                return consts[idx]
            return node_outs[idx]

        for node in payload["nodes"]:
            args = [resolve(r) for r in node["inputs"]]
            node_outs.append(apply(Elemwise(node["kernel"]), args)[0])
        outputs = [resolve(r) for r in payload["outputs"]]
        return cls(scalars, outputs, payload.get("destroy"))
