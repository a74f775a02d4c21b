"""Symbolic loops.

A loop is a single apply node whose op carries an isolated inner graph (no
variable is shared with the outer graph) plus role bookkeeping: sequences
are indexed per step along axis 0, carried states feed each step's output
back into the next (with initial values), and non-sequences are loop
invariants. The node's outputs are the stacked per-step history of every
inner output followed by the final value of every carried state.

The gradient is another loop over reversed sequences (backpropagation
through time): it carries the running state gradient backwards, accumulates
invariant gradients, and emits per-step sequence gradients, matching the
gradients of the explicitly unrolled graph. The forward-mode rule is a loop
in the original direction that carries the primal and tangent together.
"""
from __future__ import annotations

import numpy as np

from .alloc import alloc_array
from .dtypes import is_float, np_dtype
from .errors import (
    LengthMismatch,
    MissingNonSequence,
    NotDifferentiable,
    TypeMismatch,
)
from .graph import (
    Constant,
    TensorType,
    Variable,
    ancestor_vars,
    apply,
    as_variable,
    clone_outputs,
    io_toposort,
    structural_signature,
)
from .ops import DISCONNECTED, fill, zeros_like
from .ops.base import Op, UNKNOWN_SHAPE, register_op
from .ops.shaping import dimshuffle, flip0, join, subtensor

FULL = "full"
LAST = "last"


def _step_view(buffer: np.ndarray, idx: int) -> np.ndarray:
    """Writable view of one step of a history buffer (0-d safe)."""
    window = buffer[idx : idx + 1]
    return window.reshape(window.shape[1:])


@register_op
class ScanOp(Op):
    """One loop: an isolated inner graph plus role and retention metadata.

    Inner inputs are ordered [sequence elements, carried states, invariants];
    inner outputs are [next states, per-step extras]. Outer inputs mirror the
    roles (with an optional leading step count); outer outputs are the
    stacked histories of every inner output followed by each state's final
    value. ``retention`` picks, per history, whether the whole sequence is
    kept or only the last step's value (one step of memory).
    """

    name = "scan"
    foldable = False

    def __init__(
        self,
        inner_inputs,
        inner_outputs,
        n_seqs: int,
        n_states: int,
        n_nonseqs: int,
        has_nsteps: bool,
        strict: bool = False,
        retention=None,
    ):
        self.inner_inputs = list(inner_inputs)
        self.inner_outputs = list(inner_outputs)
        self.n_seqs = int(n_seqs)
        self.n_states = int(n_states)
        self.n_nonseqs = int(n_nonseqs)
        self.n_extras = len(self.inner_outputs) - self.n_states
        self.has_nsteps = bool(has_nsteps)
        self.strict = bool(strict)
        self.retention = tuple(retention or (FULL,) * len(self.inner_outputs))
        if len(self.inner_inputs) != self.n_seqs + self.n_states + self.n_nonseqs:
            raise TypeMismatch("loop role mapping does not cover the inner inputs")
        if self.n_extras < 0:
            raise TypeMismatch("loop has fewer inner outputs than carried states")
        if len(self.retention) != len(self.inner_outputs):
            raise TypeMismatch("one retention policy required per inner output")
        for k in range(self.n_states):
            state_in = self.inner_inputs[self.n_seqs + k].type
            state_out = self.inner_outputs[k].type
            if state_in != state_out:
                raise TypeMismatch(
                    f"carried state {k}: next value has type {state_out}, "
                    f"expected {state_in}"
                )
        inner_free = {id(v) for v in self.inner_inputs}
        for v in ancestor_vars(self.inner_outputs):
            if v.owner is None and not isinstance(v, Constant) and id(v) not in inner_free:
                raise MissingNonSequence(
                    f"inner graph depends on {v!r} which is not an inner input"
                )
        self._order = io_toposort(self.inner_outputs)
        self._key = (
            self.n_seqs,
            self.n_states,
            self.n_nonseqs,
            self.has_nsteps,
            self.strict,
            self.retention,
            structural_signature(self.inner_inputs, self.inner_outputs),
        )

    @property
    def display_name(self):
        return (
            f"scan[seq={self.n_seqs},state={self.n_states},extra={self.n_extras},"
            f"inv={self.n_nonseqs}]"
        )

    def attrs_key(self):
        return self._key

    def with_retention(self, retention) -> "ScanOp":
        return ScanOp(
            self.inner_inputs,
            self.inner_outputs,
            self.n_seqs,
            self.n_states,
            self.n_nonseqs,
            self.has_nsteps,
            self.strict,
            retention,
        )

    # -- role slicing helpers -------------------------------------------

    def split_inputs(self, outer_inputs):
        pos = 1 if self.has_nsteps else 0
        nsteps = outer_inputs[0] if self.has_nsteps else None
        seqs = outer_inputs[pos : pos + self.n_seqs]
        states = outer_inputs[pos + self.n_seqs : pos + self.n_seqs + self.n_states]
        nonseqs = outer_inputs[pos + self.n_seqs + self.n_states :]
        return nsteps, list(seqs), list(states), list(nonseqs)

    def inner_seq_vars(self):
        return self.inner_inputs[: self.n_seqs]

    def inner_state_vars(self):
        return self.inner_inputs[self.n_seqs : self.n_seqs + self.n_states]

    def inner_nonseq_vars(self):
        return self.inner_inputs[self.n_seqs + self.n_states :]

    # -- type contracts ---------------------------------------------------

    def infer_types(self, input_types):
        expected = (
            (1 if self.has_nsteps else 0) + self.n_seqs + self.n_states + self.n_nonseqs
        )
        if len(input_types) != expected:
            raise TypeMismatch(f"loop expects {expected} inputs, got {len(input_types)}")
        pos = 0
        if self.has_nsteps:
            t = input_types[0]
            if t.ndim != 0 or t.dtype not in ("int32", "int64"):
                raise TypeMismatch("step count must be an integer scalar")
            pos = 1
        for i, inner in enumerate(self.inner_seq_vars()):
            t = input_types[pos + i]
            if t.ndim != inner.type.ndim + 1 or t.dtype != inner.type.dtype:
                raise TypeMismatch(
                    f"sequence {i} has type {t}, expected rank "
                    f"{inner.type.ndim + 1} {inner.type.dtype}"
                )
            if tuple(t.broadcastable[1:]) != inner.type.broadcastable:
                raise TypeMismatch(f"sequence {i} broadcast pattern mismatch")
        for i, inner in enumerate(self.inner_state_vars()):
            t = input_types[pos + self.n_seqs + i]
            if t != inner.type:
                raise TypeMismatch(
                    f"initial state {i} has type {t}, expected {inner.type}"
                )
        for i, inner in enumerate(self.inner_nonseq_vars()):
            t = input_types[pos + self.n_seqs + self.n_states + i]
            if t != inner.type:
                raise TypeMismatch(
                    f"loop invariant {i} has type {t}, expected {inner.type}"
                )
        histories = [
            TensorType(out.type.dtype, (False,) + out.type.broadcastable)
            for out in self.inner_outputs
        ]
        finals = [v.type for v in self.inner_state_vars()]
        return histories + finals

    # -- execution ---------------------------------------------------------

    def _resolve_length(self, nsteps, seqs):
        lengths = {int(s.shape[0]) for s in seqs}
        if len(lengths) > 1:
            raise LengthMismatch(f"sequences disagree on length: {sorted(lengths)}")
        if nsteps is not None:
            t = int(nsteps)
            if t < 0:
                raise LengthMismatch(f"negative step count {t}")
            if lengths and t != next(iter(lengths)):
                raise LengthMismatch(
                    f"step count {t} != shared sequence length {next(iter(lengths))}"
                )
            return t
        if not lengths:
            raise LengthMismatch("loop without sequences needs an explicit step count")
        return next(iter(lengths))

    def _eval_inner(self, args, out_hints=None, check=False):
        env: dict[int, np.ndarray] = {
            id(v): a for v, a in zip(self.inner_inputs, args)
        }
        hints = {}
        if out_hints:
            for v, buf in zip(self.inner_outputs, out_hints):
                if buf is not None:
                    hints.setdefault(id(v), buf)
        for node in self._order:
            xs = [env[id(x)] if id(x) in env else x.value for x in node.inputs]
            if check:
                node.op.check_runtime_shapes(node, [np.shape(x) for x in xs])
            buffers = [hints.get(id(out)) for out in node.outputs]
            results = node.op.perform(xs, buffers if any(
                b is not None for b in buffers
            ) else None)
            for out, r in zip(node.outputs, results):
                env[id(out)] = np.asarray(r)
        outs = []
        for v in self.inner_outputs:
            if id(v) in env:
                outs.append(np.asarray(env[id(v)]))
            else:
                outs.append(np.asarray(v.value))  # constant output
        return outs

    def perform(self, inputs, output_buffers=None):
        pos = 1 if self.has_nsteps else 0
        nsteps = inputs[0] if self.has_nsteps else None
        seqs = inputs[pos : pos + self.n_seqs]
        init_states = inputs[pos + self.n_seqs : pos + self.n_seqs + self.n_states]
        nonseqs = list(inputs[pos + self.n_seqs + self.n_states :])
        length = self._resolve_length(nsteps, seqs)

        n_out = len(self.inner_outputs)
        histories: list[np.ndarray | None] = [None] * n_out
        state_vals = [np.asarray(s) for s in init_states]

        def allocate(shapes):
            for i, shape in enumerate(shapes):
                depth = length if self.retention[i] == FULL else 1
                dtype = np_dtype(self.inner_outputs[i].type.dtype)
                histories[i] = alloc_array((depth,) + tuple(shape), dtype, f"loop_out_{i}")

        if length == 0:
            probe = [np.ones(s.shape[1:], dtype=s.dtype) for s in seqs]
            probe += [np.asarray(s) for s in init_states]
            probe += [np.asarray(w) for w in nonseqs]
            shapes = [np.shape(o) for o in self._eval_inner(probe)]
            for i, shape in enumerate(shapes):
                dtype = np_dtype(self.inner_outputs[i].type.dtype)
                histories[i] = alloc_array((0,) + tuple(shape), dtype, f"loop_out_{i}")
            finals = [np.array(s, copy=True) for s in state_vals]
            return list(histories) + finals

        for t in range(length):
            args = [s[t] for s in seqs] + state_vals + nonseqs
            hints = None
            if histories[0] is not None:
                hints = [
                    _step_view(h, t) if self.retention[i] == FULL else None
                    for i, h in enumerate(histories)
                ]
            outs = self._eval_inner(args, out_hints=hints, check=(t == 0))
            if histories[0] is None:
                allocate([np.shape(o) for o in outs])
            for i, value in enumerate(outs):
                slot = t if self.retention[i] == FULL else 0
                target = _step_view(histories[i], slot)
                if target is not value:
                    target[...] = value
            state_vals = [
                _step_view(histories[k], t)
                if self.retention[k] == FULL
                else np.array(outs[k])
                for k in range(self.n_states)
            ]
        finals = [np.array(s, copy=True) for s in state_vals]
        return list(histories) + finals

    def check_runtime_shapes(self, node, shapes):
        pass  # validated per step inside perform

    # -- differentiation --------------------------------------------------

    def grad(self, inputs, output_grads):
        return _loop_grad(self, list(inputs), list(output_grads))

    def rop(self, inputs, input_perturbations):
        return _loop_rop(self, list(inputs), list(input_perturbations))

    def infer_shape(self, node, input_shapes):
        return [UNKNOWN_SHAPE for _ in node.outputs]

    # -- serialization ------------------------------------------------------

    def attrs_payload(self, encode_graph=None):
        if encode_graph is None:
            raise TypeMismatch("loop ops need a graph codec to serialize")
        return {
            "inner": encode_graph(self.inner_inputs, self.inner_outputs),
            "n_seqs": self.n_seqs,
            "n_states": self.n_states,
            "n_nonseqs": self.n_nonseqs,
            "has_nsteps": self.has_nsteps,
            "strict": self.strict,
            "retention": list(self.retention),
        }

    @classmethod
    def from_payload(cls, payload, decode_graph=None):
        if decode_graph is None:
            raise TypeMismatch("loop ops need a graph codec to deserialize")
        inner_inputs, inner_outputs = decode_graph(payload["inner"])
        return cls(
            inner_inputs,
            inner_outputs,
            payload["n_seqs"],
            payload["n_states"],
            payload["n_nonseqs"],
            payload["has_nsteps"],
            payload["strict"],
            tuple(payload["retention"]),
        )


def _expand0(v: Variable) -> Variable:
    return dimshuffle(v, ("x",) + tuple(range(v.type.ndim)))


def _seq_elem_type(t: TensorType) -> TensorType:
    if t.ndim < 1:
        raise TypeMismatch("sequences must have a leading step axis")
    return TensorType(t.dtype, t.broadcastable[1:])


def scan(
    fn,
    sequences=(),
    initial_states=(),
    non_sequences=(),
    n_steps=None,
    strict: bool = False,
):
    """Build a symbolic loop.

    ``fn`` receives one variable per sequence element, per carried state and
    per invariant (in that order) and returns the next state values followed
    by any extra per-step outputs. Returns (per_step_outputs, final_states):
    the stacked history of every ``fn`` output, then each state's final
    value. With ``strict`` every outer dependency of the body must be passed
    via ``non_sequences``; otherwise outer values are captured automatically
    and appended as invariants.
    """
    sequences = [as_variable(s) for s in sequences]
    initial_states = [as_variable(s) for s in initial_states]
    non_sequences = [as_variable(w) for w in non_sequences]

    seq_vars = [
        Variable(_seq_elem_type(s.type), name=(s.name or "seq") + "[t]")
        for s in sequences
    ]
    state_vars = [
        Variable(s.type, name=(s.name or "state") + "[t-1]") for s in initial_states
    ]
    nonseq_vars = [Variable(w.type, name=w.name) for w in non_sequences]

    results = fn(*seq_vars, *state_vars, *nonseq_vars)
    if isinstance(results, Variable):
        results = [results]
    results = list(results)
    if len(results) < len(initial_states):
        raise TypeMismatch(
            f"loop body returned {len(results)} outputs but there are "
            f"{len(initial_states)} carried states"
        )

    inner_declared = {id(v) for v in seq_vars + state_vars + nonseq_vars}
    captured = []
    for v in ancestor_vars(results):
        if v.owner is None and not isinstance(v, Constant) and id(v) not in inner_declared:
            captured.append(v)
    captured.sort(key=lambda v: v.id)
    if captured and strict:
        names = ", ".join(repr(v) for v in captured)
        raise MissingNonSequence(
            f"strict loop body uses outer variables not passed as invariants: {names}"
        )
    if captured:
        fresh = [Variable(c.type, name=c.name) for c in captured]
        results, _ = clone_outputs(
            results, dict(zip(captured, fresh)), copy_free=False
        )
        nonseq_vars = nonseq_vars + fresh
        non_sequences = non_sequences + captured

    op = ScanOp(
        inner_inputs=seq_vars + state_vars + nonseq_vars,
        inner_outputs=results,
        n_seqs=len(sequences),
        n_states=len(initial_states),
        n_nonseqs=len(nonseq_vars),
        has_nsteps=n_steps is not None,
        strict=strict,
    )
    outer_inputs = []
    if n_steps is not None:
        n_steps = as_variable(n_steps)
        outer_inputs.append(n_steps)
    elif not sequences:
        raise LengthMismatch("a loop without sequences needs n_steps")
    outer_inputs += sequences + initial_states + non_sequences
    outputs = apply(op, outer_inputs)
    n_out = len(results)
    per_step = outputs[:n_out]
    finals = outputs[n_out : n_out + len(initial_states)]
    return per_step, finals


# ---------------------------------------------------------------------------
# Reverse mode: a loop over reversed sequences.


def _loop_grad(op: ScanOp, inputs, output_grads):
    K, E, S, M = op.n_states, op.n_extras, op.n_seqs, op.n_nonseqs
    nsteps, seqs, inits, nonseqs = op.split_inputs(inputs)
    hist_grads = output_grads[: K + E]
    final_grads = output_grads[K + E :]

    for k, v in enumerate(op.inner_state_vars()):
        if not is_float(v.type.dtype):
            raise NotDifferentiable(
                f"loop state {k} is integer-typed; its recurrence has no gradient"
            )

    # The forward histories are needed to replay each step's previous state;
    # re-applying the op gives them symbolically (duplicate-merging unifies
    # this node with the original).
    fwd_outputs = apply(op, list(inputs))
    state_histories = fwd_outputs[:K]

    rev_seqs = [flip0(s) for s in seqs]
    rev_hist_grads = [flip0(g) for g in hist_grads]
    # Previous-state stream [h_{-1} .. h_{T-2}]: prepend the initial value,
    # then drop the last entry *after* joining so the length is T even when
    # the loop ran zero steps.
    rev_prev_states = [
        flip0(subtensor(join(0, _expand0(init), hist), (slice(None, -1, None),)))
        for init, hist in zip(inits, state_histories)
    ]

    float_nonseq_idx = [m for m, w in enumerate(nonseqs) if is_float(w.type.dtype)]

    # Inner graph of the reversed loop.
    r_seq_vars = [Variable(v.type) for v in op.inner_seq_vars()]
    r_histgrad_vars = [Variable(out.type) for out in op.inner_outputs]
    r_prev_vars = [Variable(v.type) for v in op.inner_state_vars()]
    r_lambda_vars = [Variable(v.type) for v in op.inner_state_vars()]
    r_acc_vars = [Variable(nonseqs[m].type) for m in float_nonseq_idx]
    r_nonseq_vars = [Variable(v.type) for v in op.inner_nonseq_vars()]

    replace = {}
    for old, new in zip(op.inner_seq_vars(), r_seq_vars):
        replace[old] = new
    for old, new in zip(op.inner_state_vars(), r_prev_vars):
        replace[old] = new
    for old, new in zip(op.inner_nonseq_vars(), r_nonseq_vars):
        replace[old] = new
    step_outputs, _ = clone_outputs(op.inner_outputs, replace, copy_free=True)

    from .autodiff import lop

    seeds = []
    for k in range(K):
        seeds.append(r_lambda_vars[k] + r_histgrad_vars[k])
    for j in range(E):
        seeds.append(r_histgrad_vars[K + j])
    wrt = r_seq_vars + r_prev_vars + [r_nonseq_vars[m] for m in float_nonseq_idx]
    raw = lop(step_outputs, seeds, wrt)
    g_seq = raw[:S]
    g_prev = raw[S : S + K]
    g_nonseq = raw[S + K :]

    def _or_zero(g, template):
        return zeros_like(template) if g is DISCONNECTED else g

    new_lambdas = [
        _coerce_state(_or_zero(g, r_prev_vars[k]), r_lambda_vars[k]) for k, g in enumerate(g_prev)
    ]
    new_accs = [
        _coerce_state(acc + _or_zero(g, acc), acc)
        for acc, g in zip(r_acc_vars, g_nonseq)
    ]
    step_seq_grads = [
        _or_zero(g, r_seq_vars[s]) if is_float(r_seq_vars[s].type.dtype) else None
        for s, g in enumerate(g_seq)
    ]
    emitted_seq_idx = [s for s, g in enumerate(step_seq_grads) if g is not None]

    inner_inputs = (
        r_seq_vars
        + r_histgrad_vars
        + r_prev_vars
        + r_lambda_vars
        + r_acc_vars
        + r_nonseq_vars
    )
    inner_outputs = (
        new_lambdas + new_accs + [step_seq_grads[s] for s in emitted_seq_idx]
    )
    rev_op = ScanOp(
        inner_inputs,
        inner_outputs,
        n_seqs=S + (K + E) + K,
        n_states=K + len(r_acc_vars),
        n_nonseqs=M,
        has_nsteps=False,
    )
    outer = (
        rev_seqs
        + rev_hist_grads
        + rev_prev_states
        + list(final_grads)
        + [zeros_like(nonseqs[m]) for m in float_nonseq_idx]
        + nonseqs
    )
    rev_outputs = apply(rev_op, outer)
    n_rev_out = K + len(r_acc_vars) + len(emitted_seq_idx)
    rev_finals = rev_outputs[n_rev_out:]

    grads = []
    if op.has_nsteps:
        grads.append(DISCONNECTED)
    for s in range(S):
        if s in emitted_seq_idx:
            hist_idx = K + len(r_acc_vars) + emitted_seq_idx.index(s)
            grads.append(flip0(rev_outputs[hist_idx]))
        else:
            grads.append(DISCONNECTED)
    for k in range(K):
        grads.append(rev_finals[k])
    acc_cursor = 0
    for m in range(M):
        if m in float_nonseq_idx:
            grads.append(rev_finals[K + acc_cursor])
            acc_cursor += 1
        else:
            grads.append(DISCONNECTED)
    return grads


def _coerce_state(expr: Variable, state_var: Variable) -> Variable:
    """Force a state-update expression to the carried state's exact type."""
    if expr.type == state_var.type:
        return expr
    coerced = fill(state_var, expr)
    if coerced.type != state_var.type:
        raise TypeMismatch(
            f"loop gradient state has type {expr.type}, cannot coerce to "
            f"{state_var.type}"
        )
    return coerced


# ---------------------------------------------------------------------------
# Forward mode: a loop in the original direction carrying (primal, tangent).


def _loop_rop(op: ScanOp, inputs, perturbations):
    K, E, S, M = op.n_states, op.n_extras, op.n_seqs, op.n_nonseqs
    nsteps, seqs, inits, nonseqs = op.split_inputs(inputs)
    offset = 1 if op.has_nsteps else 0
    d_seqs = perturbations[offset : offset + S]
    d_inits = perturbations[offset + S : offset + S + K]
    d_nonseqs = perturbations[offset + S + K :]

    if all(p is None for p in perturbations):
        return [None] * (K + E + K)

    d_seqs = [d if d is not None else zeros_like(s) for d, s in zip(d_seqs, seqs)]
    d_inits = [d if d is not None else zeros_like(s) for d, s in zip(d_inits, inits)]
    float_nonseq_idx = [m for m, w in enumerate(nonseqs) if is_float(w.type.dtype)]
    d_nonseqs_f = [
        d_nonseqs[m] if d_nonseqs[m] is not None else zeros_like(nonseqs[m])
        for m in float_nonseq_idx
    ]

    r_seq_vars = [Variable(v.type) for v in op.inner_seq_vars()]
    r_dseq_vars = [Variable(v.type) for v in op.inner_seq_vars()]
    r_prev_vars = [Variable(v.type) for v in op.inner_state_vars()]
    r_dprev_vars = [Variable(v.type) for v in op.inner_state_vars()]
    r_nonseq_vars = [Variable(v.type) for v in op.inner_nonseq_vars()]
    r_dnonseq_vars = [Variable(nonseqs[m].type) for m in float_nonseq_idx]

    replace = {}
    for old, new in zip(op.inner_seq_vars(), r_seq_vars):
        replace[old] = new
    for old, new in zip(op.inner_state_vars(), r_prev_vars):
        replace[old] = new
    for old, new in zip(op.inner_nonseq_vars(), r_nonseq_vars):
        replace[old] = new
    primal_outputs, _ = clone_outputs(op.inner_outputs, replace, copy_free=True)

    from .autodiff import forward_perturbations

    pmap = {}
    for v, d in zip(r_seq_vars, r_dseq_vars):
        pmap[v] = d
    for v, d in zip(r_prev_vars, r_dprev_vars):
        pmap[v] = d
    for m, d in zip(float_nonseq_idx, r_dnonseq_vars):
        pmap[r_nonseq_vars[m]] = d
    tangents = forward_perturbations(primal_outputs, pmap)
    tangents = [
        t if t is not None else zeros_like(out)
        for t, out in zip(tangents, primal_outputs)
    ]
    tangent_states = [
        _coerce_state(t, r_dprev_vars[k]) for k, t in enumerate(tangents[:K])
    ]

    inner_inputs = (
        r_seq_vars
        + r_dseq_vars
        + r_prev_vars
        + r_dprev_vars
        + r_nonseq_vars
        + r_dnonseq_vars
    )
    inner_outputs = (
        list(primal_outputs[:K])
        + tangent_states
        + list(primal_outputs[K:])
        + list(tangents[K:])
    )
    rop_op = ScanOp(
        inner_inputs,
        inner_outputs,
        n_seqs=2 * S,
        n_states=2 * K,
        n_nonseqs=M + len(r_dnonseq_vars),
        has_nsteps=op.has_nsteps,
    )
    outer = []
    if op.has_nsteps:
        outer.append(nsteps)
    outer += seqs + d_seqs + inits + d_inits + nonseqs + d_nonseqs_f
    outs = apply(rop_op, outer)

    # outs layout: histories [h_k, dh_k, y_j, dy_j] then finals [h_k, dh_k]
    results = []
    for k in range(K):
        results.append(outs[K + k])  # rop of each state history
    for j in range(E):
        results.append(outs[2 * K + E + j])  # rop of each extra history
    finals = outs[2 * (K + E) :]
    for k in range(K):
        results.append(finals[K + k])  # rop of each final state
    return results
