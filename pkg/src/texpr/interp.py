"""Plain reference interpreter.

Evaluates graph outputs from a variable binding by walking nodes in
topological order and calling each op's host kernel. Deliberately simple:
this is the independent oracle the compiled runtime is checked against,
and the evaluator used for constant folding, test-value propagation, and
loop bodies.
"""
from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from .dtypes import np_dtype
from .errors import ShapeMismatch, UnderdeterminedOutputs
from .graph import Constant, Variable, io_toposort


def eval_graph(
    outputs: Iterable[Variable],
    bindings: Mapping[Variable, np.ndarray] | None = None,
    check_shapes: bool = True,
) -> list[np.ndarray]:
    outputs = list(outputs)
    env: dict[int, np.ndarray] = {}
    for var, value in (bindings or {}).items():
        env[var.id] = np.asarray(value, dtype=np_dtype(var.type.dtype))
    for node in io_toposort(outputs):
        args = []
        for x in node.inputs:
            if x.id in env:
                args.append(env[x.id])
            elif isinstance(x, Constant):
                args.append(x.value)
            else:
                raise UnderdeterminedOutputs(f"no value bound for {x!r}")
        if check_shapes:
            node.op.check_runtime_shapes(node, [a.shape for a in args])
        results = node.op.perform(args)
        for out, r in zip(node.outputs, results):
            env[out.id] = np.asarray(r)
    values = []
    for out in outputs:
        if out.id in env:
            values.append(np.asarray(env[out.id]))
        elif isinstance(out, Constant):
            values.append(out.value)
        else:
            raise UnderdeterminedOutputs(f"no value bound for output {out!r}")
    return values
