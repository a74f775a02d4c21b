"""Graph-level differentiation drivers.

Reverse mode traverses from outputs toward inputs, calling each op's
gradient rule with the accumulated vector; where a variable fans out, its
gradient is the sum of all client contributions (ordered by client node id,
summed left to right, so emitted graphs are reproducible). Forward mode
walks the other way, pushing perturbations through each op's R-operator
rule. Gradients are ordinary graph variables: they compose into further
expressions and can be differentiated again.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dtypes import is_float, np_dtype
from .errors import DisconnectedInput, TypeMismatch
from .graph import Constant, Variable, io_toposort
from .interp import eval_graph
from .ops import DISCONNECTED, fill, zeros_like


@dataclass
class GradContext:
    """Accumulator for reverse traversal: per-variable gradient contributions
    tagged with (client node id, input index) so summation order is stable."""

    contributions: dict[Variable, list[tuple[int, int, Variable]]] = field(
        default_factory=dict
    )

    def seed(self, var: Variable, value: Variable) -> None:
        self.contributions.setdefault(var, []).append((-1, -1, value))

    def add(self, var: Variable, node_id: int, index: int, value: Variable) -> None:
        self.contributions.setdefault(var, []).append((node_id, index, value))

    def total(self, var: Variable):
        entries = self.contributions.get(var)
        if not entries:
            return None
        entries = sorted(entries, key=lambda e: (e[0], e[1]))
        acc = entries[0][2]
        for _, _, g in entries[1:]:
            acc = acc + g
        return acc


def lop(outputs, output_grads, wrt) -> list:
    """Vector-Jacobian products of ``outputs`` w.r.t. ``wrt`` seeded with
    ``output_grads``. Returns DISCONNECTED where nothing flows."""
    outputs, output_grads, wrt = list(outputs), list(output_grads), list(wrt)
    if len(outputs) != len(output_grads):
        raise TypeMismatch("one output gradient required per output")
    ctx = GradContext()
    for out, v in zip(outputs, output_grads):
        ctx.seed(out, v)
    for node in reversed(io_toposort(outputs)):
        if not any(out in ctx.contributions for out in node.outputs):
            continue
        vs = []
        for out in node.outputs:
            total = ctx.total(out)
            if total is None:
                # Sibling output off the differentiation path: a zero seed
                # shaped like the output keeps multi-output rules uniform.
                total = zeros_like(out) if is_float(out.type.dtype) else fill(out, 0)
            vs.append(total)
        input_grads = node.op.grad(node.inputs, vs)
        if len(input_grads) != len(node.inputs):
            raise TypeMismatch(
                f"gradient rule of {node.op.name} returned {len(input_grads)} "
                f"entries for {len(node.inputs)} inputs"
            )
        for i, (x, g) in enumerate(zip(node.inputs, input_grads)):
            if g is DISCONNECTED or g is None:
                continue
            ctx.add(x, node.id, i, g)
    results = []
    for w in wrt:
        total = ctx.total(w)
        results.append(DISCONNECTED if total is None else total)
    return results


def grad(cost: Variable, wrt, disconnected: str = "error"):
    """Reverse-mode gradients of a scalar float cost.

    ``disconnected`` picks what a wrt variable with no path to the cost
    yields: "error" raises DisconnectedInput, "zero" returns zeros shaped
    like the variable. Accepts one variable or a list; returns the same.
    """
    single = isinstance(wrt, Variable)
    wrt_list = [wrt] if single else list(wrt)
    if cost.type.ndim != 0 or not is_float(cost.type.dtype):
        raise TypeMismatch(f"cost must be a float scalar, got {cost.type}")
    for w in wrt_list:
        if not is_float(w.type.dtype):
            raise TypeMismatch(f"cannot differentiate w.r.t. integer-typed {w!r}")
    if disconnected not in ("error", "zero"):
        raise ValueError("disconnected policy must be 'error' or 'zero'")
    seed = Constant(1, dtype=cost.type.dtype)
    raw = lop([cost], [seed], wrt_list)
    results = []
    for w, g in zip(wrt_list, raw):
        if g is DISCONNECTED:
            if disconnected == "error":
                raise DisconnectedInput(
                    f"{w!r} does not influence the cost; pass disconnected='zero' "
                    "to get zeros instead"
                )
            results.append(zeros_like(w))
        else:
            results.append(g)
    return results[0] if single else results


def forward_perturbations(outputs, perturbations: dict) -> list:
    """Push input perturbations forward; None entries mean exactly zero."""
    env: dict[Variable, Variable | None] = dict(perturbations)
    for node in io_toposort(outputs):
        ps = [env.get(x) for x in node.inputs]
        if all(p is None for p in ps):
            continue
        out_ps = node.op.rop(node.inputs, ps)
        if len(out_ps) != len(node.outputs):
            raise TypeMismatch(
                f"R-operator rule of {node.op.name} returned {len(out_ps)} "
                f"entries for {len(node.outputs)} outputs"
            )
        for out, p in zip(node.outputs, out_ps):
            env[out] = p
    return [env.get(o) for o in outputs]


def rop(outputs, wrt, directions):
    """Jacobian-vector products: directional derivatives of each output along
    ``directions`` at the point represented by ``wrt``."""
    single = isinstance(outputs, Variable)
    outs = [outputs] if single else list(outputs)
    wrt, directions = list(wrt), list(directions)
    if len(wrt) != len(directions):
        raise TypeMismatch("one direction required per wrt variable")
    for w, d in zip(wrt, directions):
        if d is not None and w.type != d.type:
            raise TypeMismatch(
                f"direction for {w!r} has type {d.type}, expected {w.type}"
            )
    raw = forward_perturbations(outs, dict(zip(wrt, directions)))
    results = [zeros_like(o) if p is None else p for o, p in zip(outs, raw)]
    return results[0] if single else results


# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst_input: int | None = None
    worst_element: tuple | None = None
    analytic: float = 0.0
    numeric: float = 0.0
    n_checked: int = 0

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        loc = ""
        if self.worst_input is not None:
            loc = f" at input {self.worst_input}, element {self.worst_element}"
        return (
            f"gradient check {status}: max rel err {self.max_rel_err:.3e}{loc} "
            f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e}, "
            f"{self.n_checked} partials)"
        )


def verify_grad(
    inputs,
    outputs,
    point,
    seed: int = 0,
    rel_tol: float = 1e-5,
    abs_tol: float = 1e-8,
) -> GradCheckReport:
    """Check reverse-mode gradients against central finite differences.

    Outputs are contracted with a random projection vector to a scalar; the
    symbolic gradient of that scalar is compared partial-by-partial against
    central differences with step cbrt(machine eps) * max(1, |x|).
    """
    inputs, outputs = list(inputs), list(outputs)
    point = [
        np.asarray(p, dtype=np_dtype(x.type.dtype)) for x, p in zip(inputs, point)
    ]
    rng = np.random.default_rng(seed)
    base_outs = eval_graph(outputs, dict(zip(inputs, point)))
    projections = [rng.standard_normal(o.shape) for o in base_outs]

    cost = None
    from .ops import sum as tsum

    for out, u in zip(outputs, projections):
        term = tsum(out * Constant(u, dtype=out.type.dtype))
        cost = term if cost is None else cost + term
    diff_wrt = [x for x in inputs if is_float(x.type.dtype)]
    sym_grads = grad(cost, diff_wrt, disconnected="zero")
    analytic = eval_graph(sym_grads, dict(zip(inputs, point)))

    def cost_at(values):
        outs = eval_graph(outputs, dict(zip(inputs, values)))
        return sum(float(np.sum(u * o)) for u, o in zip(projections, outs))

    h0 = float(np.finfo(np.float64).eps) ** (1.0 / 3.0)
    worst = GradCheckReport(passed=True, max_rel_err=0.0)
    checked = 0
    for i, x in enumerate(inputs):
        if not is_float(x.type.dtype):
            continue
        gi = analytic[diff_wrt.index(x)]
        flat = point[i].reshape(-1)
        for k in range(flat.size):
            h = h0 * max(1.0, abs(float(flat[k])))
            bumped = [p.copy() for p in point]
            bumped[i].reshape(-1)[k] = flat[k] + h
            c_plus = cost_at(bumped)
            bumped[i].reshape(-1)[k] = flat[k] - h
            c_minus = cost_at(bumped)
            fd = (c_plus - c_minus) / (2 * h)
            a = float(gi.reshape(-1)[k]) if gi.ndim else float(gi)
            err = abs(a - fd)
            denom = max(abs(a), abs(fd))
            rel = 0.0 if denom <= abs_tol else err / denom
            checked += 1
            if rel > worst.max_rel_err:
                worst.max_rel_err = rel
                worst.worst_input = i
                worst.worst_element = np.unravel_index(k, point[i].shape)
                worst.analytic = a
                worst.numeric = fd
    worst.n_checked = checked
    worst.passed = worst.max_rel_err <= rel_tol
    return worst
