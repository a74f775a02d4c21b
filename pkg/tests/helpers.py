"""Shared test utilities: the unrolled-loop oracle and a DOT syntax checker."""
from __future__ import annotations

import re

import numpy as np

from texpr import Variable
from texpr.ops import dimshuffle, join, subtensor


def expand0(v):
    return dimshuffle(v, ("x",) + tuple(range(v.type.ndim)))


def unroll(fn, sequences, initial_states, non_sequences, length):
    """Explicitly unrolled equivalent of scan(fn, ...) for a known length.

    Builds an ordinary graph (no loop node) by applying the step function
    ``length`` times to sliced sequences; serves as the independent oracle
    for loop values, gradients, and directional derivatives.
    """
    states = list(initial_states)
    collected: list[list] = []
    for t in range(length):
        xs = [subtensor(s, (t,)) for s in sequences]
        outs = fn(*xs, *states, *non_sequences)
        if isinstance(outs, Variable):
            outs = [outs]
        outs = list(outs)
        if not collected:
            collected = [[] for _ in outs]
        for i, o in enumerate(outs):
            collected[i].append(o)
        states = outs[: len(initial_states)]
    histories = [
        join(0, *[expand0(o) for o in h]) if h else None for h in collected
    ]
    return histories, states


def rel_err(a, b, floor=1e-12):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# -- tiny DOT grammar checker --------------------------------------------------

_TOKEN = re.compile(
    r'\s*(?:(?P<id>[A-Za-z_][A-Za-z0-9_.]*|[-+]?[0-9.]+)|(?P<str>"(?:[^"\\]|\\.)*")'
    r"|(?P<sym>->|[{}\[\];=,]))"
)


def _tokenize(text):
    pos, out = 0, []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            if text[pos:].strip() == "":
                break
            raise AssertionError(f"DOT: cannot tokenize at {text[pos:pos+30]!r}")
        pos = m.end()
        if m.lastgroup == "id":
            out.append(("id", m.group("id")))
        elif m.lastgroup == "str":
            out.append(("str", m.group("str")))
        else:
            out.append(("sym", m.group("sym")))
    return out


def check_dot_grammar(text: str) -> None:
    """Parse the subset of the DOT grammar our exporter emits; raises on
    malformed output."""
    tokens = _tokenize(text)
    i = 0

    def expect(kind, value=None):
        nonlocal i
        assert i < len(tokens), "DOT: unexpected end"
        k, v = tokens[i]
        assert k == kind and (value is None or v == value), (
            f"DOT: expected {value or kind} at token {i}, got {v!r}"
        )
        i += 1
        return v

    def maybe(kind, value=None):
        nonlocal i
        if i < len(tokens) and tokens[i][0] == kind and (
            value is None or tokens[i][1] == value
        ):
            i += 1
            return True
        return False

    def attr_block():
        expect("sym", "[")
        while True:
            expect("id")
            expect("sym", "=")
            k, _ = tokens[i]
            assert k in ("id", "str"), "DOT: attribute value expected"
            nonlocal_i_advance()
            if maybe("sym", ","):
                continue
            break
        expect("sym", "]")

    def nonlocal_i_advance():
        nonlocal i
        i += 1

    expect("id", "digraph")
    expect("id")
    expect("sym", "{")
    while not maybe("sym", "}"):
        expect("id")  # node or edge head
        if maybe("sym", "->"):
            expect("id")
        if i < len(tokens) and tokens[i] == ("sym", "["):
            attr_block()
        expect("sym", ";")
    assert i == len(tokens), "DOT: trailing tokens"
