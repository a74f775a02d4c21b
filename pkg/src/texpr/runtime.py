"""Compilation and execution.

``compile`` clones the requested slice of the graph (so several functions
can be built over one region independently), rewrites it under a preset,
orders the thunks respecting dataflow and destroy-before-read constraints,
and returns a callable. Shared variables are persistent typed containers
that act as implicit inputs of every function referencing them; update
expressions are computed with the ordinary outputs and written back only
after the whole call succeeded.

Execution walks the thunk order linearly; when the graph contains lazy
conditionals it switches to demand-driven evaluation so untaken branches
never run. With the garbage-collection toggle off, intermediate buffers are
kept across calls and kernels write into them again instead of allocating.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import alloc
from .dtypes import np_dtype
from .errors import (
    AbstractOpRemaining,
    NanDetected,
    TexprError,
    TypeMismatch,
    UnderdeterminedOutputs,
)
from .graph import (
    ApplyNode,
    Constant,
    FunctionGraph,
    TensorType,
    Variable,
    ancestor_vars,
    clone_outputs,
)
from .rewrites.engine import RewriteContext, RewriteLog, run_preset


class SharedVariable(Variable):
    """A variable with a persistent value container.

    Every compiled function referencing it treats it as an implicit input.
    The type (dtype, rank, broadcastable dims) is fixed; the shape may
    change between calls. Value swaps are guarded so a reader on another
    thread sees the old or the new array, never a torn one.
    """

    def __init__(self, value, name=None, dtype=None, broadcastable=None):
        arr = np.asarray(value)
        if dtype is None:
            from .dtypes import dtype_of_value

            dtype = dtype_of_value(arr)
        arr = np.array(arr, dtype=np_dtype(dtype), copy=True)
        if broadcastable is None:
            broadcastable = (False,) * arr.ndim
        vtype = TensorType(dtype, broadcastable)
        reason = vtype.value_matches(arr)
        if reason is not None:
            raise TypeMismatch(f"initial value rejected: {reason}")
        super().__init__(vtype, name)
        self._value = arr
        self._lock = threading.Lock()

    def get_value(self, borrow: bool = False) -> np.ndarray:
        with self._lock:
            return self._value if borrow else self._value.copy()

    def set_value(self, value) -> None:
        try:
            arr = np.array(value, dtype=np_dtype(self.type.dtype), copy=True)
        except (ValueError, TypeError) as exc:
            raise TypeMismatch(f"cannot store value in {self!r}: {exc}") from exc
        reason = self.type.value_matches(arr)
        if reason is not None:
            raise TypeMismatch(f"value rejected for {self!r}: {reason}")
        with self._lock:
            self._value = arr

    def _read(self) -> np.ndarray:
        with self._lock:
            return self._value

    def __repr__(self):
        label = self.name or f"shared{self.id}"
        return f"<shared {label}:{self.type}>"


def shared(value, name=None, dtype=None, broadcastable=None) -> SharedVariable:
    return SharedVariable(value, name, dtype, broadcastable)


def set_shared(s: SharedVariable, value) -> None:
    s.set_value(value)


def get_shared(s: SharedVariable) -> np.ndarray:
    return s.get_value()


@dataclass(frozen=True)
class UpdatePair:
    shared: SharedVariable
    new_value: Variable


@dataclass
class Profile:
    call_count: int = 0
    total_time: float = 0.0
    node_calls: dict = field(default_factory=dict)
    node_time: dict = field(default_factory=dict)
    node_bytes: dict = field(default_factory=dict)
    stage_times: dict = field(default_factory=dict)

    def record_node(self, node_id: int, seconds: float, nbytes: int) -> None:
        self.node_calls[node_id] = self.node_calls.get(node_id, 0) + 1
        self.node_time[node_id] = self.node_time.get(node_id, 0.0) + seconds
        self.node_bytes[node_id] = self.node_bytes.get(node_id, 0) + nbytes

    def as_json(self, fn: "CompiledFunction") -> dict:
        nodes = []
        for node in fn.order:
            nodes.append(
                {
                    "id": node.id,
                    "op": getattr(node.op, "display_name", node.op.name),
                    "calls": self.node_calls.get(node.id, 0),
                    "time": self.node_time.get(node.id, 0.0),
                    "bytes": self.node_bytes.get(node.id, 0),
                }
            )
        return {
            "call_count": self.call_count,
            "total_time": self.total_time,
            "nodes": nodes,
            "stages": [
                {"stage": s, "time": t} for s, t in sorted(self.stage_times.items())
            ],
        }

    def as_table(self, fn: "CompiledFunction") -> str:
        lines = [
            f"calls: {self.call_count}   total: {self.total_time:.6f}s",
            f"{'op':<32}{'calls':>8}{'time (s)':>14}{'bytes':>14}",
        ]
        for entry in sorted(
            self.as_json(fn)["nodes"], key=lambda e: -e["time"]
        ):
            lines.append(
                f"{entry['op'][:31]:<32}{entry['calls']:>8}"
                f"{entry['time']:>14.6f}{entry['bytes']:>14}"
            )
        return "\n".join(lines)


def _coerce_input(var: Variable, value) -> np.ndarray:
    try:
        arr = np.array(value, dtype=np_dtype(var.type.dtype), copy=True)
    except (ValueError, TypeError) as exc:
        raise TypeMismatch(f"bad value for input {var!r}: {exc}") from exc
    reason = var.type.value_matches(arr)
    if reason is not None:
        raise TypeMismatch(f"value for input {var!r} rejected: {reason}")
    return arr


def compile(
    inputs,
    outputs,
    updates=(),
    preset: str = "fast_run",
    allow_gc: bool = True,
    nan_guard=None,
    include=(),
    exclude=(),
    conv_impl: str = "gemm",
    max_passes: int = 8,
) -> "CompiledFunction":
    """Build a callable computing ``outputs`` from ``inputs``.

    Inputs may be any variables (including intermediates) as long as they,
    the reachable shared variables, and constants determine the outputs.
    ``updates`` pairs (shared, new_value) are evaluated with the outputs and
    written back at the end of each successful call.
    """
    single_output = isinstance(outputs, Variable)
    outputs = [outputs] if single_output else list(outputs)
    inputs = list(inputs)
    norm_updates: list[UpdatePair] = []
    for u in updates:
        pair = u if isinstance(u, UpdatePair) else UpdatePair(*u)
        if not isinstance(pair.shared, SharedVariable):
            raise TypeMismatch(f"update target {pair.shared!r} is not a shared variable")
        if pair.shared.type != pair.new_value.type:
            raise TypeMismatch(
                f"update for {pair.shared!r} has type {pair.new_value.type}, "
                f"expected {pair.shared.type}"
            )
        norm_updates.append(pair)

    update_values = [p.new_value for p in norm_updates]
    declared = {id(v) for v in inputs}
    # Walk toward the roots but stop at declared inputs: they may be
    # intermediates, in which case their producers are irrelevant.
    shared_found, seen = [], set()
    stack = list(outputs + update_values)
    while stack:
        v = stack.pop()
        if v.id in seen or id(v) in declared:
            continue
        seen.add(v.id)
        if v.owner is not None:
            stack.extend(v.owner.inputs)
        elif isinstance(v, SharedVariable):
            shared_found.append(v)
        elif not isinstance(v, Constant):
            raise UnderdeterminedOutputs(
                f"{v!r} is needed to compute the outputs but is neither an "
                "input nor a shared variable"
            )
    shared_found.sort(key=lambda v: v.id)

    full_inputs = inputs + shared_found
    replace = {v: Variable(v.type, v.name) for v in full_inputs}
    cloned, mapping = clone_outputs(outputs + update_values, replace, copy_free=True)
    fgraph = FunctionGraph([replace[v] for v in full_inputs], cloned)
    fgraph.protected_inputs = {replace[v] for v in shared_found}

    ctx = RewriteContext(conv_impl=conv_impl, execution_bound=True, max_passes=max_passes)
    _, log = run_preset(fgraph, preset, include=include, exclude=exclude, ctx=ctx)

    from .ops.conv import Conv2d

    for node in fgraph.nodes.values():
        if isinstance(node.op, Conv2d) and node.op.is_abstract:
            raise AbstractOpRemaining(
                f"{node.op.display_name} has no implementation after preset "
                f"{preset!r}; use fast_run/fast_compile or pick one explicitly"
            )

    return CompiledFunction(
        fgraph=fgraph,
        n_outputs=len(outputs),
        input_vars=[replace[v] for v in inputs],
        shared_bindings=[(s, replace[s]) for s in shared_found],
        updates=[(p.shared, cloned[len(outputs) + i]) for i, p in enumerate(norm_updates)],
        allow_gc=allow_gc,
        nan_guard=nan_guard,
        rewrite_log=log,
        preset=preset,
        single_output=single_output,
    )


class CompiledFunction:
    def __init__(
        self,
        fgraph: FunctionGraph,
        n_outputs: int,
        input_vars,
        shared_bindings,
        updates,
        allow_gc: bool,
        nan_guard,
        rewrite_log: RewriteLog,
        preset: str,
        single_output: bool = False,
    ):
        self.fgraph = fgraph
        self.n_outputs = n_outputs
        self.input_vars = list(input_vars)
        self.shared_bindings = list(shared_bindings)
        self.updates = list(updates)
        self.allow_gc = allow_gc
        self.nan_guard = nan_guard
        self.rewrite_log = rewrite_log
        self.preset = preset
        self.single_output = single_output
        self.profile = Profile()
        for stage, t in rewrite_log.stage_times.items():
            self.profile.stage_times[stage] = t
        self.order = self._schedule()
        self.has_lazy = any(n.op.lazy for n in self.order)
        self._keep: dict[int, np.ndarray] = {}
        self._consts: dict[int, np.ndarray] = {}
        for node in self.order:
            for x in node.inputs:
                if isinstance(x, Constant):
                    self._consts[x.id] = x.value
        for v in self.fgraph.outputs:
            if isinstance(v, Constant):
                self._consts[v.id] = v.value
        self.thunks = {node.id: self._make_thunk(node) for node in self.order}
        self._lock = threading.Lock()

    # -- scheduling -------------------------------------------------------

    def _schedule(self) -> list[ApplyNode]:
        extra: dict[ApplyNode, set] = {}
        for node in self.fgraph.nodes.values():
            for out_idx, in_idx in node.op.destroy_map.items():
                destroyed = node.inputs[in_idx]
                readers = set()
                for entry in self.fgraph.clients.get(destroyed, ()):
                    client = entry[0]
                    if not isinstance(client, str) and client is not node:
                        readers.add(client)
                if readers:
                    extra.setdefault(node, set()).update(readers)
        return self.fgraph.toposort(extra_deps=extra or None)

    # -- thunks -----------------------------------------------------------

    def _make_thunk(self, node: ApplyNode):
        op = node.op
        destroy = dict(op.destroy_map)
        is_view = bool(op.view_map)

        def thunk(env):
            ins = [
                env[x.id] if x.id in env else self._consts[x.id] for x in node.inputs
            ]
            op.check_runtime_shapes(node, [np.shape(a) for a in ins])
            buffers = None
            if destroy:
                buffers = [None] * len(node.outputs)
                for out_idx, in_idx in destroy.items():
                    buffers[out_idx] = ins[in_idx]
            elif not self.allow_gc and not is_view:
                buffers = [self._keep.get(out.id) for out in node.outputs]
                if all(b is None for b in buffers):
                    buffers = None
            results = op.perform(ins, buffers)
            results = [np.asarray(r) for r in results]
            for i, (out, r) in enumerate(zip(node.outputs, results)):
                provided = buffers[i] if buffers else None
                if r is not provided and not is_view and not destroy:
                    alloc.note_alloc(getattr(r, "nbytes", 0), "node_output")
                env[out.id] = r
                if not self.allow_gc:
                    self._keep[out.id] = r
            return results

        return thunk

    def _run_node(self, node, env):
        started = time.perf_counter()
        results = self.thunks[node.id](env)
        elapsed = time.perf_counter() - started
        nbytes = sum(getattr(r, "nbytes", 0) for r in results)
        self.profile.record_node(node.id, elapsed, nbytes)
        if self.nan_guard is not None:
            from .diagnostics import nan_guard_check

            ins = [
                env[x.id] if x.id in env else self._consts[x.id] for x in node.inputs
            ]
            report = nan_guard_check(node, ins, list(results), self.nan_guard)
            if report is not None:
                raise NanDetected(report)

    # -- execution ---------------------------------------------------------

    def __call__(self, *values):
        with self._lock:
            return self._call_locked(values)

    def _call_locked(self, values):
        started = time.perf_counter()
        if len(values) != len(self.input_vars):
            raise TypeMismatch(
                f"function expects {len(self.input_vars)} inputs, got {len(values)}"
            )
        env: dict[int, np.ndarray] = {}
        for var, value in zip(self.input_vars, values):
            arr = _coerce_input(var, value)
            if not self.allow_gc and var.id in self._keep:
                kept = self._keep[var.id]
                if kept.shape == arr.shape and kept.dtype == arr.dtype:
                    np.copyto(kept, arr)
                    env[var.id] = kept
                    continue
            env[var.id] = arr
            if not self.allow_gc:
                self._keep[var.id] = arr
        for s, var in self.shared_bindings:
            value = s._read()
            reason = var.type.value_matches(value)
            if reason is not None:
                raise TypeMismatch(f"shared {s!r} holds a nonconforming value: {reason}")
            env[var.id] = value

        if self.has_lazy:
            self._run_lazy(env)
        else:
            self._run_linear(env)

        def fetch(v):
            if v.id in env:
                return env[v.id]
            if v.id in self._consts or isinstance(v, Constant):
                return self._consts.get(v.id, getattr(v, "value", None))
            raise TexprError(f"output {v!r} was never computed")

        outputs = [
            np.array(fetch(v), copy=True) for v in self.fgraph.outputs[: self.n_outputs]
        ]
        update_values = [
            np.array(fetch(v), copy=True)
            for v in self.fgraph.outputs[self.n_outputs :]
        ]
        for (s, _), value in zip(self.updates, update_values):
            with s._lock:
                s._value = value
        self.profile.call_count += 1
        self.profile.total_time += time.perf_counter() - started
        if self.single_output:
            return outputs[0]
        return outputs

    def _run_linear(self, env):
        persistent = {v.id for v in self.fgraph.inputs}
        persistent |= {v.id for v in self.fgraph.outputs}
        remaining: dict[int, int] = {}
        if self.allow_gc:
            for node in self.order:
                for x in node.inputs:
                    remaining[x.id] = remaining.get(x.id, 0) + 1
        for node in self.order:
            self._run_node(node, env)
            if self.allow_gc:
                for x in node.inputs:
                    remaining[x.id] -= 1
                    if (
                        remaining[x.id] == 0
                        and x.id not in persistent
                        and x.id not in self._consts
                    ):
                        env.pop(x.id, None)

    def _run_lazy(self, env):
        from .ops.control import IfElse

        targets = [
            v for v in self.fgraph.outputs if v.owner is not None and v.id not in env
        ]
        for target in targets:
            stack = [target]
            while stack:
                v = stack[-1]
                if v.id in env or v.id in self._consts or isinstance(v, Constant):
                    stack.pop()
                    continue
                node = v.owner
                if node is None:
                    raise TexprError(f"variable {v!r} has no value and no producer")
                if isinstance(node.op, IfElse):
                    cond = node.inputs[0]
                    if cond.id not in env and cond.id not in self._consts and not isinstance(cond, Constant):
                        stack.append(cond)
                        continue
                    cond_val = env.get(cond.id, self._consts.get(cond.id))
                    if cond_val is None:
                        cond_val = cond.value
                    branch = node.inputs[1] if bool(cond_val) else node.inputs[2]
                    if (
                        branch.id not in env
                        and branch.id not in self._consts
                        and not isinstance(branch, Constant)
                    ):
                        stack.append(branch)
                        continue
                    started = time.perf_counter()
                    value = env.get(branch.id, self._consts.get(branch.id))
                    if value is None:
                        value = branch.value
                    env[v.id] = value
                    self.profile.record_node(
                        node.id, time.perf_counter() - started, getattr(value, "nbytes", 0)
                    )
                    stack.pop()
                    continue
                missing = [
                    x
                    for x in node.inputs
                    if x.id not in env and x.id not in self._consts and not isinstance(x, Constant)
                ]
                if missing:
                    stack.extend(missing)
                    continue
                self._run_node(node, env)
                stack.pop()

    # -- introspection ------------------------------------------------------

    @property
    def output_vars(self):
        return self.fgraph.outputs[: self.n_outputs]

    def thunk_count(self, node_id: int) -> int:
        return self.profile.node_calls.get(node_id, 0)

    # -- copying -------------------------------------------------------------

    def copy(
        self,
        swap: dict | None = None,
        carry_updates: bool = True,
        share_intermediate_storage: bool = False,
    ) -> "CompiledFunction":
        """New function over the same optimized graph; no rewrite pass runs.

        ``swap`` replaces shared-variable containers (types must match);
        dropping updates yields a side-effect-free copy; sharing intermediate
        storage points both functions' kept buffers at one pool.
        """
        swap = dict(swap or {})
        for old, new in swap.items():
            if old.type != new.type:
                raise TypeMismatch(
                    f"swap for {old!r} has type {new.type}, expected {old.type}"
                )
        twin = CompiledFunction.__new__(CompiledFunction)
        twin.fgraph = self.fgraph
        twin.n_outputs = self.n_outputs
        twin.input_vars = list(self.input_vars)
        twin.shared_bindings = [
            (swap.get(s, s), var) for s, var in self.shared_bindings
        ]
        twin.updates = (
            [(swap.get(s, s), var) for s, var in self.updates] if carry_updates else []
        )
        twin.allow_gc = self.allow_gc
        twin.nan_guard = self.nan_guard
        twin.rewrite_log = self.rewrite_log
        twin.preset = self.preset
        twin.single_output = self.single_output
        twin.profile = Profile()
        twin.profile.stage_times = dict(self.profile.stage_times)
        twin.order = self.order
        twin.has_lazy = self.has_lazy
        twin._keep = self._keep if share_intermediate_storage else {}
        twin._consts = self._consts
        twin.thunks = {node.id: twin._make_thunk(node) for node in twin.order}
        twin._lock = threading.Lock()
        return twin

    # -- serialization --------------------------------------------------------

    def save(self) -> bytes:
        from .serialize import encode_function

        return encode_function(self)


def save(fn: CompiledFunction) -> bytes:
    return fn.save()


def load(data: bytes, force_reoptimize: bool = False) -> CompiledFunction:
    from .serialize import decode_function

    return decode_function(data, force_reoptimize=force_reoptimize)
