"""Construction-time and run-time diagnostics.

Test values let shape mistakes surface the moment an expression is built:
attach concrete arrays to the inputs and propagate them through the raw,
unrewritten graph. (Stability substitutions have not run at that point, so
a NaN seen here may be absent from the optimized function -- the propagated
values are a debugging aid, not the runtime's numbers.)

The NaN guard scans every apply node's inputs and outputs during execution
for NaN, infinity, or suspiciously large magnitudes and reports the node
together with the creation site of its output.

Graphs print either as deterministic text (one line per node, ids relative
to the graph so equal structures print identically) or as DOT: variables
are ellipses, apply nodes boxes, view edges blue, destroy edges red, and
with profiling enabled node fill saturation encodes relative time share.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MissingTestValue, ShapeMismatch, TexprError
from .graph import Constant, FunctionGraph, Variable, io_toposort


@dataclass
class NanGuardConfig:
    check_nan: bool = True
    check_inf: bool = True
    big_threshold: float = 1e10


@dataclass
class NanReport:
    node_id: int
    op: str
    check: str  # "nan" | "inf" | "big"
    tensor: str  # e.g. "input 0" / "output 1"
    trace: str
    value_summary: str

    def __str__(self):
        return (
            f"{self.check} detected at node {self.node_id} ({self.op}), "
            f"{self.tensor}; created at {self.trace or '<unknown>'}; "
            f"{self.value_summary}"
        )


def nan_guard_check(node, in_values, out_values, config: NanGuardConfig):
    """Scan one node's float tensors; returns a NanReport or None."""
    trace = ""
    for out in node.outputs:
        if out.trace is not None:
            trace = str(out.trace)
            break
    for label, values in (("input", in_values), ("output", out_values)):
        for i, value in enumerate(values):
            arr = np.asarray(value)
            if arr.dtype.kind != "f":
                continue
            if config.check_nan and bool(np.isnan(arr).any()):
                check = "nan"
            elif config.check_inf and bool(np.isinf(arr).any()):
                check = "inf"
            elif config.big_threshold is not None and bool(
                (np.abs(arr[np.isfinite(arr)]) > config.big_threshold).any()
            ):
                check = "big"
            else:
                continue
            finite = arr[np.isfinite(arr)]
            summary = (
                f"shape {arr.shape}, finite range "
                f"[{finite.min() if finite.size else float('nan')}, "
                f"{finite.max() if finite.size else float('nan')}]"
            )
            return NanReport(
                node_id=node.id,
                op=getattr(node.op, "display_name", node.op.name),
                check=check,
                tensor=f"{label} {i}",
                trace=trace,
                value_summary=summary,
            )
    return None


def propagate_test_values(outputs) -> dict:
    """Forward-evaluate the unrewritten graph on attached test values.

    Every reachable free input must carry a test value (shared variables use
    their current value, constants theirs). Intermediate variables get their
    computed test value attached. Shape errors are raised immediately,
    naming the offending node's creation site.
    """
    if isinstance(outputs, FunctionGraph):
        outputs = outputs.outputs
    if isinstance(outputs, Variable):
        outputs = [outputs]
    env: dict[int, np.ndarray] = {}
    computed: dict[Variable, np.ndarray] = {}

    def leaf_value(v: Variable):
        if isinstance(v, Constant):
            return v.value
        reader = getattr(v, "_read", None)
        if reader is not None:
            return reader()
        if v.test_value is not None:
            return v.test_value
        raise MissingTestValue(
            f"{v!r} has no test value (created at {v.trace or '<unknown>'})"
        )

    order = io_toposort(outputs)
    for node in order:
        args = []
        for x in node.inputs:
            if x.id not in env:
                env[x.id] = leaf_value(x)
                computed[x] = env[x.id]
            args.append(env[x.id])
        try:
            node.op.check_runtime_shapes(node, [np.shape(a) for a in args])
            results = node.op.perform(args)
        except (ShapeMismatch, TexprError) as exc:
            site = ""
            for out in node.outputs:
                if out.trace is not None:
                    site = f" (created at {out.trace})"
                    break
            raise ShapeMismatch(
                f"test-value propagation failed at node {node.id} "
                f"[{getattr(node.op, 'display_name', node.op.name)}]{site}: {exc}"
            ) from exc
        for out, r in zip(node.outputs, results):
            env[out.id] = r
            computed[out] = r
            try:
                out.test_value = r
            except TexprError:
                pass  # value legitimately disagrees with a stricter pattern
    for v in outputs:
        if v.id not in env:
            env[v.id] = leaf_value(v)
            computed[v] = env[v.id]
    return computed


# -- printing -----------------------------------------------------------------


def _graph_parts(obj):
    if hasattr(obj, "fgraph"):  # a compiled function
        return obj.fgraph.inputs, obj.fgraph.outputs, obj
    if isinstance(obj, FunctionGraph):
        return obj.inputs, obj.outputs, None
    if isinstance(obj, Variable):
        return [], [obj], None
    return [], list(obj), None


def _operand_label(v: Variable, names: dict) -> str:
    if v.id in names:
        return names[v.id]
    if isinstance(v, Constant):
        if v.value.ndim == 0:
            return repr(v.value.item())
        return f"const<{v.type}>"
    return v.name or "?"


def debug_print(obj) -> str:
    """Deterministic text form: one line per apply node plus a return line."""
    _, outputs, _ = _graph_parts(obj)
    names: dict[int, str] = {}
    lines = []
    for i, node in enumerate(io_toposort(outputs)):
        for j, out in enumerate(node.outputs):
            suffix = f".{j}" if len(node.outputs) > 1 else ""
            names[out.id] = f"%{i}{suffix}"
        operands = ", ".join(_operand_label(x, names) for x in node.inputs)
        op_name = getattr(node.op, "display_name", node.op.name)
        outs = ", ".join(names[out.id] for out in node.outputs)
        lines.append(f"{outs} = {op_name}({operands}) :: {node.outputs[0].type}")
    rendered = [
        names.get(v.id, _operand_label(v, names)) for v in outputs
    ]
    lines.append("return " + ", ".join(rendered))
    return "\n".join(lines)


def dot_export(obj, with_profile: bool = False) -> str:
    """Graphviz DOT text. Ellipses are variables, boxes apply nodes; blue
    edges feed ops that return a view of that input, red edges feed ops
    that destroy it. Profile coloring saturates node fill by time share."""
    inputs, outputs, fn = _graph_parts(obj)
    profile = fn.profile if (fn is not None and with_profile) else None
    order = io_toposort(outputs)
    var_names: dict[int, str] = {}
    node_names: dict[int, str] = {}
    lines = ["digraph G {"]

    def var_name(v: Variable) -> str:
        if v.id not in var_names:
            var_names[v.id] = f"v{len(var_names)}"
            if isinstance(v, Constant) and v.value.ndim == 0:
                label = f"{v.value.item()}"
            else:
                label = v.name or var_names[v.id]
            lines.append(
                f'  {var_names[v.id]} [shape=ellipse, label="{label} : {v.type}"];'
            )
        return var_names[v.id]

    for v in inputs:
        var_name(v)
    total_time = max(
        sum(profile.node_time.values()) if profile else 0.0, 1e-12
    )
    for i, node in enumerate(order):
        node_names[node.id] = f"a{i}"
        op_label = getattr(node.op, "display_name", node.op.name)
        attrs = f'shape=box, label="{op_label}"'
        if profile is not None:
            share = profile.node_time.get(node.id, 0.0) / total_time
            attrs += f', style=filled, fillcolor="0.000 {share:.3f} 1.000"'
        lines.append(f"  {node_names[node.id]} [{attrs}];")
        views = set(node.op.view_map.values())
        destroys = set(node.op.destroy_map.values())
        for j, x in enumerate(node.inputs):
            style = ""
            if j in destroys:
                style = ' [color=red, label="destroy"]'
            elif j in views:
                style = ' [color=blue, label="view"]'
            lines.append(f"  {var_name(x)} -> {node_names[node.id]}{style};")
        for out in node.outputs:
            lines.append(f"  {node_names[node.id]} -> {var_name(out)};")
    for pos, v in enumerate(outputs):
        sink = f"out{pos}"
        lines.append(f'  {sink} [shape=ellipse, style=dashed, label="output {pos}"];')
        lines.append(f"  {var_name(v)} -> {sink};")
    lines.append("}")
    return "\n".join(lines)
