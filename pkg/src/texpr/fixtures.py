"""Named benchmark fixtures used by the CLI bench command and the scripts.

Each builder returns (inputs, outputs, make_point) where make_point(rng)
samples concrete input arrays of the requested size.
"""
from __future__ import annotations

import numpy as np

from . import matrix, scalar, tensor4, vector
from .ops import conv2d, dot, exp, log, mul, sigmoid, sqr, tanh
from .scan import scan

FIXTURES = {}


def fixture(name):
    def register(fn):
        FIXTURES[name] = fn
        return fn

    return register


@fixture("elementwise-chain")
def elementwise_chain(size: int = 1_000_000):
    x = vector("x")
    y = vector("y")
    z = tanh(x) * y
    z = sigmoid(z) + x
    z = exp(z * 0.25)
    z = z + sqr(y)
    z = z * 0.5
    out = log(z + 1.5)

    def make_point(rng):
        return [rng.standard_normal(size), rng.standard_normal(size)]

    return [x, y], [out], make_point


@fixture("matmul-chain")
def matmul_chain(size: int = 192):
    x = matrix("x")
    w1 = matrix("w1")
    w2 = matrix("w2")
    w3 = matrix("w3")
    h = tanh(dot(x, w1))
    h = tanh(dot(h, w2))
    out = dot(h, w3)

    def make_point(rng):
        return [
            rng.standard_normal((size, size)) * 0.1,
            rng.standard_normal((size, size)) * 0.1,
            rng.standard_normal((size, size)) * 0.1,
            rng.standard_normal((size, size)) * 0.1,
        ]

    return [x, w1, w2, w3], [out], make_point


@fixture("rnn-scan")
def rnn_scan(size: int = 64, length: int = 64):
    xs = matrix("xs")  # (time, input)
    h0 = vector("h0")
    w = matrix("w")
    u = matrix("u")

    def step(x_t, h_prev, w_, u_):
        return tanh(dot(w_, h_prev) + dot(u_, x_t))

    _, (h_final,) = scan(
        step, sequences=[xs], initial_states=[h0], non_sequences=[w, u]
    )

    def make_point(rng):
        return [
            rng.standard_normal((length, size)) * 0.1,
            rng.standard_normal(size) * 0.1,
            rng.standard_normal((size, size)) * (0.9 / np.sqrt(size)),
            rng.standard_normal((size, size)) * (0.9 / np.sqrt(size)),
        ]

    return [xs, h0, w, u], [h_final], make_point


@fixture("conv-small")
def conv_small(size: int = 16):
    x = tensor4("x")
    f = tensor4("f")
    out = conv2d(x, f, stride=(1, 1), pad=(1, 1))

    def make_point(rng):
        return [
            rng.standard_normal((4, 3, size, size)),
            rng.standard_normal((8, 3, 3, 3)),
        ]

    return [x, f], [out], make_point


def build_fixture(name: str, size: int | None = None):
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; have {sorted(FIXTURES)}")
    if size is None:
        return FIXTURES[name]()
    return FIXTURES[name](size)


def deep_elemwise_graph(n_nodes: int = 2000):
    """A long elementwise chain with fodder for several rewrite stages;
    used to compare optimization time across presets."""
    x = vector("x")
    y = vector("y")
    out = x
    for i in range(n_nodes):
        k = i % 6
        if k == 0:
            out = out + y
        elif k == 1:
            out = tanh(out)
        elif k == 2:
            out = out * 1.0  # canonicalization fodder
        elif k == 3:
            out = sigmoid(out)
        elif k == 4:
            out = log((out * out) + 1.5)
        else:
            out = mul(out, y)
    return [x, y], [out]
