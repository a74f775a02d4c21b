"""Random graph generation for property suites and randomized fixtures.

Two op pools: SMOOTH keeps every sampled function differentiable and safely
away from branch points and singularities (finite differences stay
trustworthy); FULL adds the piecewise and boolean ops for equivalence
testing where only exact evaluation matters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Constant, Variable, tensor_type
from .ops import (
    add,
    dimshuffle,
    dot,
    exp,
    ge,
    log,
    log1p,
    maximum,
    mul,
    neg,
    sigmoid,
    sqr,
    sqrt,
    sub,
    sum as tsum,
    switch,
    tanh,
)

SMOOTH_UNARY = ("tanh", "sigmoid", "exp_s", "sqr", "neg", "log_s", "sqrt_s", "log1p_s")
SMOOTH_BINARY = ("add", "sub", "mul", "div_s")
FULL_EXTRA = ("maximum", "switch_ge")


@dataclass
class RandomGraph:
    inputs: list
    output: Variable
    shapes: list = field(default_factory=list)

    def sample_point(self, rng, scale: float = 1.0):
        return [rng.uniform(-1.5, 1.5, size=s) * scale for s in self.shapes]


def _apply_unary(name, x):
    if name == "tanh":
        return tanh(x)
    if name == "sigmoid":
        return sigmoid(x)
    if name == "exp_s":
        return exp(x * 0.5)  # keep magnitudes moderate
    if name == "sqr":
        return sqr(x)
    if name == "neg":
        return neg(x)
    if name == "log_s":
        return log(sqr(x) + 1.5)  # argument bounded away from 0
    if name == "sqrt_s":
        return sqrt(sqr(x) + 1.0)
    if name == "log1p_s":
        return log1p(sqr(x) + 0.25)
    raise KeyError(name)


def _apply_binary(name, a, b):
    if name == "add":
        return add(a, b)
    if name == "sub":
        return sub(a, b)
    if name == "mul":
        return mul(a, b)
    if name == "div_s":
        return a / (sqr(b) + 1.0)  # denominator bounded away from 0
    if name == "maximum":
        return maximum(a, b)
    if name == "switch_ge":
        return switch(ge(a, b), a + b, a * b)
    raise KeyError(name)


def random_graph(
    rng: np.random.Generator,
    n_ops: int = 6,
    n_inputs: int = 2,
    max_rank: int = 3,
    smooth: bool = True,
    allow_dot: bool = True,
    allow_reduce: bool = True,
) -> RandomGraph:
    """Sample a float64 expression with concrete (small) input shapes.

    Broadcastable type dims are assigned where a sampled extent is 1, so
    runtime broadcasting always matches the static patterns.
    """
    dims = [int(d) for d in rng.integers(1, 4, size=max_rank)]
    inputs, shapes, pool = [], [], []
    for i in range(n_inputs):
        rank = int(rng.integers(0, max_rank + 1))
        shape = tuple(dims[d] if rng.random() > 0.2 else 1 for d in range(rank))
        vtype = tensor_type("float64", rank, tuple(s == 1 for s in shape))
        v = Variable(vtype, name=f"in{i}")
        inputs.append(v)
        shapes.append(shape)
        pool.append((v, shape))

    unary = list(SMOOTH_UNARY)
    binary = list(SMOOTH_BINARY) + ([] if smooth else list(FULL_EXTRA))

    def runtime_shape(a, b):
        return tuple(np.broadcast_shapes(a, b))

    for _ in range(n_ops):
        choice = rng.random()
        if allow_dot and choice < 0.12:
            mats = [(v, s) for v, s in pool if len(s) == 2]
            vecs = [(v, s) for v, s in pool if len(s) == 1]
            built = None
            if mats and rng.random() < 0.6:
                a, ashape = mats[int(rng.integers(len(mats)))]
                candidates = [
                    (v, s)
                    for v, s in pool
                    if len(s) in (1, 2) and s[0] == ashape[1]
                ]
                if candidates:
                    b, bshape = candidates[int(rng.integers(len(candidates)))]
                    built = (
                        dot(a, b),
                        (ashape[0],) + (bshape[1:] if len(bshape) == 2 else ()),
                    )
            if built is None and vecs:
                a, ashape = vecs[int(rng.integers(len(vecs)))]
                same = [(v, s) for v, s in vecs if s == ashape]
                b, bshape = same[int(rng.integers(len(same)))]
                built = (dot(a, b), ())
            if built is not None:
                pool.append(built)
                continue
        if allow_reduce and choice < 0.22:
            cands = [(v, s) for v, s in pool if len(s) >= 1]
            if cands:
                v, s = cands[int(rng.integers(len(cands)))]
                axis = int(rng.integers(len(s)))
                pool.append((tsum(v, axis=axis), s[:axis] + s[axis + 1 :]))
                continue
        if choice < 0.55:
            v, s = pool[int(rng.integers(len(pool)))]
            name = unary[int(rng.integers(len(unary)))]
            pool.append((_apply_unary(name, v), s))
        else:
            a, ashape = pool[int(rng.integers(len(pool)))]
            compatible = [
                (v, s)
                for v, s in pool
                if _broadcast_ok(ashape, s, a.type, v.type)
            ]
            b, bshape = compatible[int(rng.integers(len(compatible)))]
            name = binary[int(rng.integers(len(binary)))]
            pool.append((_apply_binary(name, a, b), runtime_shape(ashape, bshape)))

    out, out_shape = pool[-1]
    if out_shape != ():
        out = tsum(out)
    return RandomGraph(inputs=inputs, output=out, shapes=shapes)


def _broadcast_ok(sa, sb, ta, tb) -> bool:
    """Shapes broadcast AND every extent-1 dim that meets a bigger extent is
    declared broadcastable in the type (the runtime enforces this)."""
    ndim = max(len(sa), len(sb))
    for i in range(ndim):
        ja, jb = i - (ndim - len(sa)), i - (ndim - len(sb))
        ea = sa[ja] if ja >= 0 else 1
        eb = sb[jb] if jb >= 0 else 1
        if ea != eb and 1 not in (ea, eb):
            return False
        if ja >= 0 and ea == 1 and eb > 1 and not ta.broadcastable[ja]:
            return False
        if jb >= 0 and eb == 1 and ea > 1 and not tb.broadcastable[jb]:
            return False
    return True


def random_loop(rng: np.random.Generator, n_inner_ops: int = 4):
    """Sample a loop: one sequence, one carried state, one invariant, and a
    smooth random step expression. Returns (scan inputs, per-step, finals,
    make_point(length))."""
    from .scan import scan

    state_rank = int(rng.integers(0, 2))
    state_shape = tuple(int(d) for d in rng.integers(2, 4, size=state_rank))
    seq = Variable(tensor_type("float64", state_rank + 1), name="seq")
    init = Variable(tensor_type("float64", state_rank), name="init")
    inv = Variable(tensor_type("float64", state_rank), name="inv")

    ops_unary = ("tanh", "sigmoid", "sqr", "neg")
    picks = [ops_unary[int(rng.integers(len(ops_unary)))] for _ in range(n_inner_ops)]
    with_extra = bool(rng.random() < 0.5)

    def step(x_t, h_prev, w):
        h = x_t * 0.5 + h_prev * 0.8 + w
        for name in picks:
            h = _apply_unary(name, h)
        h = h + x_t * 0.1
        if with_extra:
            return [h, h * w]
        return [h]

    per_step, finals = scan(
        step, sequences=[seq], initial_states=[init], non_sequences=[inv]
    )

    def make_point(length):
        return [
            rng.uniform(-1.0, 1.0, size=(length,) + state_shape),
            rng.uniform(-1.0, 1.0, size=state_shape),
            rng.uniform(-0.5, 0.5, size=state_shape),
        ]

    return [seq, init, inv], per_step, finals, make_point
