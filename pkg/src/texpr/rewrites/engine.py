"""The staged graph-rewrite engine.

Rewrites are named, staged transformations. Local ones inspect a single
apply node and propose same-typed replacement variables; global ones see
the whole graph. Stages run in a fixed order (canonicalize, stabilize,
specialize, abstract_select, inplace, scan); within a stage a worklist
seeded in topological order iterates to a fixed point, re-enqueueing only
the neighbourhood of each successful replacement, with a hard cap of
``max_passes`` sweeps (a warning, never an error). A pair of rewrites that
keeps undoing each other is detected and reported as a cycle.

Every application is logged with enough information to replay the rewrite
sequence on a fresh copy of the original graph and reproduce the optimized
one (up to variable identity).
"""
from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

from ..errors import NoImplementationSelected, RewriteCycleDetected
from ..graph import ApplyNode, CycleDetected, FunctionGraph, ancestor_items, fresh_id
from ..srcinfo import suppress_traces

STAGES = ("canonicalize", "stabilize", "specialize", "abstract_select", "inplace", "scan")

PRESETS = {
    "none": (),
    "fast_compile": ("canonicalize", "abstract_select"),
    "fast_run": STAGES,
}

DEFAULT_MAX_PASSES = 8


@dataclass
class RewriteContext:
    conv_impl: str = "gemm"  # gemm | reference | none
    execution_bound: bool = False
    max_passes: int = DEFAULT_MAX_PASSES


@dataclass
class Rewrite:
    name: str
    stage: str
    kind: str  # "local" | "global"
    fn: object
    tags: tuple = ("default",)


REGISTRY: list[Rewrite] = []


def register_rewrite(name: str, stage: str, kind: str, tags=("default",)):
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")

    def decorate(fn):
        REGISTRY.append(Rewrite(name, stage, kind, fn, tuple(tags)))
        return fn

    return decorate


def find_rewrite(name: str) -> Rewrite:
    for rw in REGISTRY:
        if rw.name == name:
            return rw
    raise KeyError(f"no rewrite named {name!r}")


@dataclass
class LogRecord:
    stage: str
    rewrite: str
    kind: str
    pass_index: int
    node_id: int | None = None
    replaced_op: str | None = None
    replacement_op: str | None = None
    created_var_ids: tuple = ()
    created_node_ids: tuple = ()


@dataclass
class RewriteLog:
    records: list[LogRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    stage_times: dict = field(default_factory=dict)

    def add(self, record: LogRecord) -> None:
        self.records.append(record)

    def count(self, rewrite: str | None = None, stage: str | None = None) -> int:
        return sum(
            1
            for r in self.records
            if (rewrite is None or r.rewrite == rewrite)
            and (stage is None or r.stage == stage)
        )

    def rewrite_names(self) -> set:
        return {r.rewrite for r in self.records}

    def stage_counts(self) -> dict:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.stage] = out.get(r.stage, 0) + 1
        return out

    def summary(self) -> dict:
        return {
            "total": len(self.records),
            "by_stage": self.stage_counts(),
            "by_rewrite": {
                name: self.count(rewrite=name) for name in sorted(self.rewrite_names())
            },
            "stage_times": dict(self.stage_times),
            "warnings": list(self.warnings),
        }


def _display(op) -> str:
    return getattr(op, "display_name", op.name)


class _StageRunner:
    def __init__(self, fgraph, stage, rewrites, ctx, log):
        self.fgraph = fgraph
        self.stage = stage
        self.locals = [r for r in rewrites if r.kind == "local"]
        self.globals = [r for r in rewrites if r.kind == "global"]
        self.ctx = ctx
        self.log = log
        self.transitions: dict[tuple, tuple[int, str]] = {}
        self.pass_index = 0

    def run(self) -> int:
        applied_total = 0
        for round_ in range(max(1, self.ctx.max_passes)):
            self.pass_index = round_
            applied = self._run_locals()
            for rw in self.globals:
                applied += rw.fn(self.fgraph, self.ctx, self._global_logger(rw))
            applied_total += applied
            if applied == 0:
                return applied_total
        self.log.warnings.append(
            f"stage {self.stage} hit the {self.ctx.max_passes}-pass cap before "
            "reaching a fixed point"
        )
        return applied_total

    def _global_logger(self, rw):
        def emit(node=None, replaced=None, replacement=None, created=((), ())):
            self.log.add(
                LogRecord(
                    stage=self.stage,
                    rewrite=rw.name,
                    kind="global",
                    pass_index=self.pass_index,
                    node_id=None if node is None else node.id,
                    replaced_op=replaced,
                    replacement_op=replacement,
                    created_var_ids=tuple(created[0]),
                    created_node_ids=tuple(created[1]),
                )
            )

        emit.note = lambda text: self.log.notes.append(f"{rw.name}: {text}")
        return emit

    def _run_locals(self) -> int:
        if not self.locals:
            return 0
        order = self.fgraph.toposort()
        work = deque(order)
        queued = {n.id for n in order}
        budget = max(1, self.ctx.max_passes) * max(len(order), 1) * 4
        applied = 0
        while work:
            if budget <= 0:
                self.log.warnings.append(
                    f"stage {self.stage} exceeded its work budget; stopping early"
                )
                break
            budget -= 1
            node = work.popleft()
            queued.discard(node.id)
            if node.id not in self.fgraph.nodes:
                continue  # already rewritten away
            for rw in self.locals:
                outcome = apply_local(self.fgraph, rw, node, self.ctx)
                if outcome is None:
                    continue
                pairs, created = outcome
                if pairs is None:
                    self.log.notes.append(f"{rw.name}: rejected at node {node.id}")
                    continue
                applied += 1
                self._record_local(rw, node, pairs, created)
                self._check_oscillation(rw, node, pairs)
                for old, new in pairs:
                    for entry in self.fgraph.clients.get(new, ()):
                        if entry[0] is not None and not isinstance(entry[0], str):
                            self._enqueue(entry[0], work, queued)
                    if new.owner is not None and new.owner.id in self.fgraph.nodes:
                        self._enqueue(new.owner, work, queued)
                        for x in new.owner.inputs:
                            if x.owner is not None and x.owner.id in self.fgraph.nodes:
                                self._enqueue(x.owner, work, queued)
                break  # node was replaced; move on
        return applied

    def _enqueue(self, node, work, queued):
        if node.id not in queued:
            work.append(node)
            queued.add(node.id)

    def _record_local(self, rw, node, pairs, created):
        old, new = pairs[0]
        self.log.add(
            LogRecord(
                stage=self.stage,
                rewrite=rw.name,
                kind="local",
                pass_index=self.pass_index,
                node_id=node.id,
                replaced_op=_display(node.op),
                replacement_op=_display(new.owner.op) if new.owner else "<input>",
                created_var_ids=tuple(v.id for v in created[0]),
                created_node_ids=tuple(n.id for n in created[1]),
            )
        )

    def _check_oscillation(self, rw, node, pairs):
        old, new = pairs[0]
        src = _display(node.op)
        dst = _display(new.owner.op) if new.owner else "<input>"
        if src == dst:
            return
        count, _ = self.transitions.get((src, dst), (0, rw.name))
        self.transitions[(src, dst)] = (count + 1, rw.name)
        fwd = self.transitions.get((src, dst), (0, rw.name))
        rev = self.transitions.get((dst, src))
        if rev is not None and fwd[0] >= 4 and rev[0] >= 4:
            raise RewriteCycleDetected(
                f"rewrites {fwd[1]!r} and {rev[1]!r} keep undoing each other "
                f"({src} <-> {dst})"
            )


def apply_local(fgraph, rw: Rewrite, node: ApplyNode, ctx: RewriteContext):
    """Try one local rewrite at one node.

    Returns None on no match, (None, ...) when the match was rejected
    (e.g. it would create a cycle), or (pairs, (created_vars, created_nodes))
    after a successful transactional replacement.
    """
    watermark = fresh_id()
    with suppress_traces():
        pairs = rw.fn(fgraph, node, ctx)
    if not pairs:
        return None
    news = [new for _, new in pairs]
    variables, nodes = ancestor_items(news)
    created_vars = sorted((v for v in variables if v.id > watermark), key=lambda v: v.id)
    created_nodes = sorted((n for n in nodes if n.id > watermark), key=lambda n: n.id)
    try:
        fgraph.replace_all(pairs, reason=rw.name)
    except CycleDetected:
        return (None, None)
    return pairs, (created_vars, created_nodes)


def _select(preset: str, include=(), exclude=()):
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r} (choose from {sorted(PRESETS)})")
    stages = PRESETS[preset]
    selected: list[Rewrite] = []
    for rw in REGISTRY:
        if rw.name in exclude:
            continue
        if rw.name in include:
            selected.append(rw)
            continue
        if rw.stage in stages and "default" in rw.tags:
            selected.append(rw)
    return selected


def run_preset(
    fgraph: FunctionGraph,
    preset: str = "fast_run",
    include=(),
    exclude=(),
    ctx: RewriteContext | None = None,
) -> tuple[FunctionGraph, RewriteLog]:
    """Rewrite ``fgraph`` in place under a preset; returns it with the log.

    none: no rewrites. fast_compile: canonicalize and implementation
    selection only. fast_run: every default-tagged rewrite (unsafe and
    experimental ones must be named in ``include`` explicitly).
    """
    from . import algebra, convselect, fusion, inplace, scanopt, stability  # noqa: F401

    ctx = ctx or RewriteContext()
    log = RewriteLog()
    selected = _select(preset, include, exclude)
    for stage in STAGES:
        stage_rewrites = [r for r in selected if r.stage == stage]
        if not stage_rewrites:
            continue
        started = time.perf_counter()
        runner = _StageRunner(fgraph, stage, stage_rewrites, ctx, log)
        runner.run()
        log.stage_times[stage] = log.stage_times.get(stage, 0.0) + (
            time.perf_counter() - started
        )
        if stage == "abstract_select":
            _check_abstract(fgraph, ctx)
    return fgraph, log


def _check_abstract(fgraph, ctx):
    from ..ops.conv import Conv2d

    if ctx.conv_impl != "none":
        return
    remaining = [
        n for n in fgraph.nodes.values() if isinstance(n.op, Conv2d) and n.op.is_abstract
    ]
    if remaining:
        raise NoImplementationSelected(
            "implementation selection ran with every convolution implementation "
            f"excluded; {len(remaining)} placeholder node(s) remain"
        )


def replay_log(
    fgraph: FunctionGraph,
    log: RewriteLog,
    var_mapping: dict,
    ctx: RewriteContext | None = None,
) -> FunctionGraph:
    """Re-apply a recorded rewrite sequence to a copy of the original graph.

    ``var_mapping`` maps original variables to the copy's variables (as
    returned by cloning the graph before it was optimized). Rewrites are
    deterministic at a given site, so replaying them in log order makes the
    copy op-isomorphic to the optimized original.
    """
    ctx = ctx or RewriteContext()
    node_map: dict[int, ApplyNode] = {}
    for orig_var, new_var in var_mapping.items():
        if orig_var.owner is not None and new_var.owner is not None:
            node_map[orig_var.owner.id] = new_var.owner

    def noop_logger(node=None, replaced=None, replacement=None, created=((), ())):
        pass

    last_global = None
    for record in log.records:
        rw = find_rewrite(record.rewrite)
        if record.kind == "global":
            key = (record.rewrite, record.pass_index)
            if key == last_global:
                continue  # same invocation emitted several records
            last_global = key
            rw.fn(fgraph, ctx, noop_logger)
            continue
        last_global = None
        node = node_map.get(record.node_id)
        if node is None or node.id not in fgraph.nodes:
            raise RewriteCycleDetected(
                f"replay lost track of node {record.node_id} for {record.rewrite}"
            )
        outcome = apply_local(fgraph, rw, node, ctx)
        if outcome is None or outcome[0] is None:
            raise RewriteCycleDetected(
                f"replay of {record.rewrite} failed to re-match at node {record.node_id}"
            )
        _, (created_vars, created_nodes) = outcome
        if len(created_nodes) != len(record.created_node_ids):
            raise RewriteCycleDetected(
                f"replay of {record.rewrite} created {len(created_nodes)} nodes, "
                f"expected {len(record.created_node_ids)}"
            )
        for orig_id, new_node in zip(record.created_node_ids, created_nodes):
            node_map[orig_id] = new_node
    return fgraph


def graph_signature(fgraph: FunctionGraph) -> tuple:
    """Canonical structural form used to compare graphs up to variable ids."""
    order = fgraph.toposort()
    node_pos = {n.id: i for i, n in enumerate(order)}
    var_ref = {}
    for i, v in enumerate(fgraph.inputs):
        var_ref[v.id] = ("in", i)
    entries = []
    for i, node in enumerate(order):
        refs = []
        for x in node.inputs:
            if x.id in var_ref:
                refs.append(var_ref[x.id])
            else:
                from ..graph import Constant

                if isinstance(x, Constant):
                    var_ref[x.id] = ("const", x.type.dtype, x.value.shape, x.value.tobytes())
                    refs.append(var_ref[x.id])
                else:
                    refs.append(("dangling", x.id))
        for j, out in enumerate(node.outputs):
            var_ref[out.id] = ("node", i, j)
        entries.append((node.op.name, node.op.attrs_key(), tuple(refs)))
    outs = []
    for v in fgraph.outputs:
        if v.id in var_ref:
            outs.append(var_ref[v.id])
        else:
            from ..graph import Constant

            if isinstance(v, Constant):
                outs.append(("const", v.type.dtype, v.value.shape, v.value.tobytes()))
            else:
                outs.append(("dangling", v.id))
    return (tuple(entries), tuple(outs))
