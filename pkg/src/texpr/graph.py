"""Typed expression graphs.

A graph is bipartite: Variable nodes carry data between ApplyNode nodes,
each of which applies one Op to input variables and produces fresh output
variables. A variable has at most one producing node (SSA); graph inputs
and constants have none. FunctionGraph wraps a subgraph between declared
inputs and outputs, maintains client back-references, and offers the
transactional replace API used by the rewriter. Everything else treats
graphs as immutable.
"""
from __future__ import annotations

import heapq
import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .dtypes import as_dtype, dtype_of_value, np_dtype
from .errors import CycleDetected, TypeMismatch, UnderdeterminedOutputs, UnknownVariable
from .srcinfo import capture_trace

MAX_RANK = 8

_id_counter = itertools.count()


def fresh_id() -> int:
    """Next id in the process-wide graph context. Monotonic, never reused."""
    return next(_id_counter)


class TensorType:
    """Static type of a variable: dtype, rank, and broadcastable pattern.

    ``broadcastable[i]`` is a *guarantee* that every runtime value bound to
    the variable has ``shape[i] == 1``. Concrete shapes and strides are
    never part of the type.
    """

    __slots__ = ("dtype", "broadcastable")

    def __init__(self, dtype, broadcastable: Sequence[bool] = ()):
        self.dtype = as_dtype(dtype)
        pattern = tuple(bool(b) for b in broadcastable)
        if len(pattern) > MAX_RANK:
            raise TypeMismatch(f"rank {len(pattern)} exceeds supported maximum {MAX_RANK}")
        self.broadcastable = pattern

    @property
    def ndim(self) -> int:
        return len(self.broadcastable)

    def __eq__(self, other):
        return (
            isinstance(other, TensorType)
            and self.dtype == other.dtype
            and self.broadcastable == other.broadcastable
        )

    def __hash__(self):
        return hash((self.dtype, self.broadcastable))

    def __repr__(self):
        dims = ",".join("1" if b else "?" for b in self.broadcastable)
        return f"{self.dtype}[{dims}]"

    def value_matches(self, value: np.ndarray) -> str | None:
        """Reason the value does not conform to this type, or None if it does."""
        if value.dtype != np_dtype(self.dtype):
            return f"dtype {value.dtype} does not match {self.dtype}"
        if value.ndim != self.ndim:
            return f"rank {value.ndim} does not match {self.ndim}"
        for i, b in enumerate(self.broadcastable):
            if b and value.shape[i] != 1:
                return f"dim {i} is declared broadcastable but has shape {value.shape[i]}"
        return None


def tensor_type(dtype, ndim: int | None = None, broadcastable=None) -> TensorType:
    if broadcastable is None:
        broadcastable = (False,) * (ndim or 0)
    elif ndim is not None and len(broadcastable) != ndim:
        raise TypeMismatch("broadcastable pattern length does not match ndim")
    return TensorType(dtype, broadcastable)


class Variable:
    """A typed data node. Owned by at most one ApplyNode (SSA)."""

    def __init__(self, vtype: TensorType, name: str | None = None):
        self.id = fresh_id()
        self.type = vtype
        self.name = name
        self.owner = None  # producing ApplyNode, None for graph inputs
        self.index = None  # position among the owner's outputs
        self.trace = capture_trace()
        self._test_value = None

    @property
    def test_value(self):
        return self._test_value

    @test_value.setter
    def test_value(self, value):
        if value is None:
            self._test_value = None
            return
        arr = np.asarray(value, dtype=np_dtype(self.type.dtype))
        reason = self.type.value_matches(arr)
        if reason is not None:
            raise TypeMismatch(f"test value for {self} rejected: {reason}")
        self._test_value = arr

    def __repr__(self):
        label = self.name if self.name else f"v{self.id}"
        return f"<{label}:{self.type}>"

    # Expression sugar. Comparison dunders are NOT overloaded for eq/ne so
    # variables stay usable as dict keys; use texpr.eq / texpr.neq instead.
    def _ops(self):
        from . import ops

        return ops

    def __add__(self, other):
        return self._ops().add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self._ops().sub(self, other)

    def __rsub__(self, other):
        return self._ops().sub(other, self)

    def __mul__(self, other):
        return self._ops().mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._ops().div(self, other)

    def __rtruediv__(self, other):
        return self._ops().div(other, self)

    def __neg__(self):
        return self._ops().neg(self)

    def __pow__(self, other):
        return self._ops().pow(self, other)

    def __lt__(self, other):
        return self._ops().lt(self, other)

    def __gt__(self, other):
        return self._ops().gt(self, other)

    def __le__(self, other):
        return self._ops().le(self, other)

    def __ge__(self, other):
        return self._ops().ge(self, other)

    def __getitem__(self, item):
        return self._ops().subtensor(self, item)


class Constant(Variable):
    """A variable whose value is fixed at construction time. Never owned."""

    def __init__(self, value, dtype=None, name: str | None = None, broadcastable=None):
        dtype = as_dtype(dtype) if dtype is not None else dtype_of_value(value)
        arr = np.asarray(value, dtype=np_dtype(dtype))
        arr.setflags(write=False)
        if broadcastable is None:
            broadcastable = tuple(s == 1 for s in arr.shape)
        else:
            broadcastable = tuple(broadcastable)
            if len(broadcastable) != arr.ndim or any(
                b and s != 1 for b, s in zip(broadcastable, arr.shape)
            ):
                raise TypeMismatch(
                    f"pattern {broadcastable} does not fit constant of shape {arr.shape}"
                )
        vtype = TensorType(dtype, broadcastable)
        super().__init__(vtype, name)
        self.value = arr

    def signature(self) -> tuple:
        """Interning key: equal signatures mean interchangeable constants."""
        return (self.type.dtype, self.value.shape, self.value.tobytes())

    def __repr__(self):
        if self.value.ndim == 0:
            return f"<const {self.value.item()}:{self.type.dtype}>"
        return f"<const {self.type} id={self.id}>"


def make_input(vtype: TensorType, name: str | None = None) -> Variable:
    """Create a free (ownerless) input variable of the given type."""
    return Variable(vtype, name)


def as_variable(x, dtype=None) -> Variable:
    if isinstance(x, Variable):
        return x
    return Constant(x, dtype=dtype)


class ApplyNode:
    """One application of an op to input variables, producing outputs."""

    def __init__(self, op, inputs: Sequence[Variable], outputs: Sequence[Variable]):
        self.id = fresh_id()
        self.op = op
        self.inputs = list(inputs)
        self.outputs = list(outputs)
        for i, out in enumerate(self.outputs):
            out.owner = self
            out.index = i

    def __repr__(self):
        return f"<apply {self.op.name} id={self.id}>"


def apply(op, inputs: Sequence[Variable]) -> list[Variable]:
    """Extend the graph with one ApplyNode; returns its fresh outputs.

    Raises TypeMismatch when the op's type inference rejects the inputs.
    """
    inputs = list(inputs)
    for x in inputs:
        if not isinstance(x, Variable):
            raise TypeMismatch(f"apply() expects variables, got {type(x).__name__}")
    out_types = op.infer_types([x.type for x in inputs])
    outputs = [Variable(t) for t in out_types]
    ApplyNode(op, inputs, outputs)
    return outputs


# ---------------------------------------------------------------------------
# Traversal helpers over the implicit graph (no FunctionGraph needed).


def ancestor_items(outputs: Iterable[Variable]):
    """All (variables, nodes) reachable from ``outputs``, deduplicated."""
    seen_vars: dict[int, Variable] = {}
    seen_nodes: dict[int, ApplyNode] = {}
    stack = list(outputs)
    while stack:
        v = stack.pop()
        if v.id in seen_vars:
            continue
        seen_vars[v.id] = v
        if v.owner is not None and v.owner.id not in seen_nodes:
            seen_nodes[v.owner.id] = v.owner
            stack.extend(v.owner.inputs)
    return list(seen_vars.values()), list(seen_nodes.values())


def ancestor_vars(outputs: Iterable[Variable]) -> list[Variable]:
    return ancestor_items(outputs)[0]


def io_toposort(
    outputs: Iterable[Variable],
    extra_deps: Mapping[ApplyNode, Iterable[ApplyNode]] | None = None,
) -> list[ApplyNode]:
    """Dependency-respecting node order, ties broken by ascending node id.

    ``extra_deps`` adds ordering constraints (destroy-before-read edges).
    Raises CycleDetected when no complete order exists.
    """
    _, nodes = ancestor_items(outputs)
    by_id = {n.id: n for n in nodes}
    pending: dict[int, int] = {}
    dependents: dict[int, list[int]] = {n.id: [] for n in nodes}
    for n in nodes:
        preds = {x.owner.id for x in n.inputs if x.owner is not None}
        if extra_deps and n in extra_deps:
            preds |= {p.id for p in extra_deps[n]}
        pending[n.id] = len(preds)
        for p in preds:
            dependents[p].append(n.id)
    ready = [nid for nid, count in pending.items() if count == 0]
    heapq.heapify(ready)
    order: list[ApplyNode] = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(by_id[nid])
        for d in dependents[nid]:
            pending[d] -= 1
            if pending[d] == 0:
                heapq.heappush(ready, d)
    if len(order) != len(nodes):
        raise CycleDetected("graph contains a dependency cycle")
    return order


# ---------------------------------------------------------------------------


OUTPUT = "output"  # marker used in client entries for fgraph output positions


class FunctionGraph:
    """A subgraph between declared inputs and outputs with client tracking.

    Construction walks the ancestry of ``outputs``; reaching an ownerless
    variable that is neither an input nor a constant raises
    UnderdeterminedOutputs. Only the rewriter should mutate an instance,
    via :meth:`replace` / :meth:`replace_all`.
    """

    def __init__(self, inputs: Sequence[Variable], outputs: Sequence[Variable]):
        self.inputs = list(inputs)
        self.outputs = list(outputs)
        self.nodes: dict[int, ApplyNode] = {}
        self.clients: dict[Variable, list[tuple]] = {v: [] for v in self.inputs}
        self._import_graph()

    # -- construction -------------------------------------------------

    def _import_graph(self):
        input_ids = {v.id for v in self.inputs}
        missing = []
        variables, nodes = ancestor_items(self.outputs)
        for v in variables:
            if v.owner is None and v.id not in input_ids and not isinstance(v, Constant):
                missing.append(v)
        if missing:
            names = ", ".join(repr(v) for v in missing)
            raise UnderdeterminedOutputs(
                f"outputs depend on free variables not listed as inputs: {names}"
            )
        for node in nodes:
            self.nodes[node.id] = node
        for node in nodes:
            for i, v in enumerate(node.inputs):
                self.clients.setdefault(v, []).append((node, i))
            for out in node.outputs:
                self.clients.setdefault(out, [])
        for pos, v in enumerate(self.outputs):
            self.clients.setdefault(v, []).append((OUTPUT, pos))

    # -- queries -------------------------------------------------------

    @property
    def apply_nodes(self) -> list[ApplyNode]:
        return list(self.nodes.values())

    def variables(self) -> list[Variable]:
        seen: dict[int, Variable] = {v.id: v for v in self.inputs}
        for node in self.nodes.values():
            for v in itertools.chain(node.inputs, node.outputs):
                seen.setdefault(v.id, v)
        return list(seen.values())

    def has_variable(self, v: Variable) -> bool:
        if v in self.clients:
            return True
        return any(v is out for node in self.nodes.values() for out in node.outputs)

    def toposort(self, extra_deps=None) -> list[ApplyNode]:
        return io_toposort(self.outputs, extra_deps)

    def destroy_map(self) -> dict[ApplyNode, dict[int, int]]:
        return {n: dict(n.op.destroy_map) for n in self.nodes.values() if n.op.destroy_map}

    def view_map(self) -> dict[ApplyNode, dict[int, int]]:
        return {n: dict(n.op.view_map) for n in self.nodes.values() if n.op.view_map}

    # -- mutation (rewriter-only) ---------------------------------------

    def replace(self, old: Variable, new: Variable, reason: str = "") -> None:
        """Redirect every client of ``old`` to ``new``. Transactional.

        Types must be identical; the replacement must not depend on ``old``
        (that would introduce a cycle). Dead producers of ``old`` are pruned.
        """
        self.replace_all([(old, new)], reason)

    def replace_all(self, pairs: Sequence[tuple[Variable, Variable]], reason: str = "") -> None:
        for old, new in pairs:
            if old.type != new.type:
                raise TypeMismatch(
                    f"cannot replace {old!r} ({old.type}) with {new!r} ({new.type}): "
                    f"replacement requires identical types [{reason}]"
                )
            if old not in self.clients:
                raise UnknownVariable(f"{old!r} is not part of this graph [{reason}]")
            if self._depends_on(new, old):
                raise CycleDetected(
                    f"replacing {old!r} with {new!r} would create a cycle [{reason}]"
                )
        for old, new in pairs:
            self._adopt(new, donor=old)
        for old, new in pairs:
            entries = self.clients.pop(old, [])
            for entry in entries:
                kind, idx = entry
                if kind is OUTPUT:
                    self.outputs[idx] = new
                else:
                    kind.inputs[idx] = new
            self.clients.setdefault(new, []).extend(entries)
            self._prune(old)

    def _depends_on(self, var: Variable, target: Variable) -> bool:
        stack, seen = [var], set()
        while stack:
            v = stack.pop()
            if v is target:
                return True
            if v.id in seen:
                continue
            seen.add(v.id)
            if v.owner is not None:
                stack.extend(v.owner.inputs)
        return False

    def _adopt(self, new: Variable, donor: Variable) -> None:
        """Import the replacement subtree, inheriting the donor's trace."""
        stack = [new]
        while stack:
            v = stack.pop()
            if v.trace is None and not isinstance(v, Constant):
                v.trace = donor.trace
            node = v.owner
            if node is None:
                self.clients.setdefault(v, [])
                if v.id not in {x.id for x in self.inputs} and not isinstance(v, Constant):
                    raise UnderdeterminedOutputs(
                        f"replacement introduces free variable {v!r} not among inputs"
                    )
                continue
            if node.id in self.nodes:
                continue
            self.nodes[node.id] = node
            for i, x in enumerate(node.inputs):
                self.clients.setdefault(x, [])
                self.clients[x].append((node, i))
                stack.append(x)
            for out in node.outputs:
                self.clients.setdefault(out, [])

    def _prune(self, var: Variable) -> None:
        """Drop ``var``'s producer if no output of it is used any more."""
        node = var.owner
        if node is None or node.id not in self.nodes:
            return
        if any(self.clients.get(out) for out in node.outputs):
            return
        del self.nodes[node.id]
        for out in node.outputs:
            self.clients.pop(out, None)
        for i, x in enumerate(node.inputs):
            entries = self.clients.get(x)
            if entries is None:
                continue
            try:
                entries.remove((node, i))
            except ValueError:
                pass
            if not entries and x.owner is not None:
                self._prune(x)

    # -- cloning ---------------------------------------------------------

    def clone(self, replace: Mapping[Variable, Variable] | None = None):
        """Structural copy with substitutions; see clone_with_replacements."""
        return clone_with_replacements(self, replace or {})


def clone_outputs(
    outputs: Sequence[Variable],
    replace: Mapping[Variable, Variable] | None = None,
    copy_free: bool = True,
) -> tuple[list[Variable], dict[Variable, Variable]]:
    """Clone the subgraph reaching ``outputs``, substituting per ``replace``.

    Replacement expressions are grafted as-is (not cloned themselves). Free
    variables that are not replaced are copied when ``copy_free`` is true and
    reused otherwise. Constants are always shared. Returns the cloned outputs
    together with the old-to-new mapping.

    Copies are allocated in ascending original-id order, so the relative id
    order of corresponding variables survives cloning (id-based tie-breaks
    and canonical operand ordering behave identically on a clone).
    """
    replace = dict(replace or {})
    for old, new in replace.items():
        if old.type != new.type:
            raise TypeMismatch(
                f"replacement for {old!r} has type {new.type}, expected {old.type}"
            )
    mapping: dict[Variable, Variable] = {}
    variables, _ = ancestor_items(outputs)
    skipped_nodes = {
        v.owner.id
        for v in replace
        if v.owner is not None and all(out in replace for out in v.owner.outputs)
    }
    for v in sorted(variables, key=lambda v: v.id):
        if v in replace:
            mapping[v] = replace[v]
        elif isinstance(v, Constant):
            mapping[v] = v
        elif v.owner is None:
            if copy_free:
                copy = Variable(v.type, v.name)
                copy.trace = v.trace
                copy._test_value = v._test_value
                mapping[v] = copy
            else:
                mapping[v] = v
        elif v.owner.id not in skipped_nodes:
            copy = Variable(v.type, v.name)
            copy.trace = v.trace
            mapping[v] = copy

    for node in io_toposort(outputs):
        if node.id in skipped_nodes:
            continue
        new_inputs = [mapping[x] for x in node.inputs]
        if any(out in replace for out in node.outputs):
            # Partially substituted node: rebuild the surviving outputs.
            rebuilt = [Variable(out.type, out.name) for out in node.outputs]
            ApplyNode(node.op, new_inputs, rebuilt)
            for out, fresh in zip(node.outputs, rebuilt):
                fresh.trace = out.trace
                if out not in replace:
                    mapping[out] = fresh
        else:
            new_outs = []
            for out in node.outputs:
                if out not in mapping:
                    # Sibling output no requested output reaches: copy it too.
                    copy = Variable(out.type, out.name)
                    copy.trace = out.trace
                    mapping[out] = copy
                new_outs.append(mapping[out])
            ApplyNode(node.op, new_inputs, new_outs)
    return [mapping[v] for v in outputs], mapping


def clone_with_replacements(
    g: FunctionGraph, replace: Mapping[Variable, Variable]
) -> tuple[FunctionGraph, dict[Variable, Variable]]:
    """Copy ``g``, substituting variables per ``replace``.

    Substituted variables are cut out of the clone: an ownerless replacement
    becomes a free input of the clone, an owned one an intermediate. The
    original graph is untouched. Returns the clone and the old-to-new
    variable mapping.
    """
    for old in replace:
        if not g.has_variable(old):
            raise UnknownVariable(f"replacement key {old!r} is not in the graph")
    new_outputs, mapping = clone_outputs(g.outputs, replace, copy_free=True)
    new_inputs = []
    declared = set()
    for v in g.inputs:
        image = mapping.get(v, replace.get(v))
        if image is None:
            # Input unused by any output: still copy it for arity stability.
            image = Variable(v.type, v.name)
            image.trace = v.trace
            mapping[v] = image
        if image.owner is None and not isinstance(image, Constant) and id(image) not in declared:
            new_inputs.append(image)
            declared.add(id(image))
    # Free variables introduced by replacement expressions become inputs.
    for v in ancestor_vars(new_outputs):
        if v.owner is None and not isinstance(v, Constant) and id(v) not in declared:
            new_inputs.append(v)
            declared.add(id(v))
    cloned = FunctionGraph(new_inputs, new_outputs)
    return cloned, mapping


def toposort(g: FunctionGraph) -> list[ApplyNode]:
    """Deterministic topological order of a function graph's apply nodes."""
    return g.toposort()


def structural_signature(inputs: Sequence[Variable], outputs: Sequence[Variable]) -> tuple:
    """Hashable canonical form of a subgraph, ignoring variable identity.

    Two subgraphs with equal signatures apply equal ops in the same wiring;
    used for op value-comparison and op-isomorphism checks.
    """
    ref: dict[int, tuple] = {}
    for i, v in enumerate(inputs):
        ref[v.id] = ("in", i, v.type.dtype, v.type.broadcastable)
    entries = []
    for n, node in enumerate(io_toposort(outputs)):
        refs = []
        for x in node.inputs:
            if x.id not in ref:
                if isinstance(x, Constant):
                    ref[x.id] = ("const", x.type.dtype, x.value.shape, x.value.tobytes())
                else:
                    ref[x.id] = ("free", x.type.dtype, x.type.broadcastable, len(ref))
            refs.append(ref[x.id])
        for j, out in enumerate(node.outputs):
            ref[out.id] = ("node", n, j)
        entries.append((node.op.name, node.op.attrs_key(), tuple(refs)))
    outs = []
    for v in outputs:
        if v.id in ref:
            outs.append(ref[v.id])
        elif isinstance(v, Constant):
            outs.append(("const", v.type.dtype, v.value.shape, v.value.tobytes()))
        else:
            ref[v.id] = ("free", v.type.dtype, v.type.broadcastable, len(ref))
            outs.append(ref[v.id])
    return (tuple(entries), tuple(outs))


def validate(g: FunctionGraph) -> list[str]:
    """Check structural invariants; returns a list of violations (empty = ok)."""
    violations: list[str] = []
    # Acyclicity.
    try:
        io_toposort(g.outputs)
    except CycleDetected:
        violations.append("cycle: graph is not acyclic")
    # SSA / ownership.
    for node in g.nodes.values():
        for i, out in enumerate(node.outputs):
            if out.owner is not node or out.index != i:
                violations.append(f"SSA/ownership: output {out!r} of {node!r} mis-owned")
    # Client map consistency via full reconstruction.
    rebuilt: dict[int, list[tuple]] = {}
    for node in g.nodes.values():
        for i, v in enumerate(node.inputs):
            rebuilt.setdefault(v.id, []).append((node.id, i))
    for pos, v in enumerate(g.outputs):
        rebuilt.setdefault(v.id, []).append((-1, pos))  # -1 marks output slots
    recorded = {
        v.id: sorted((e[0].id if e[0] is not OUTPUT else -1, e[1]) for e in entries)
        for v, entries in g.clients.items()
        if entries
    }
    expected = {vid: sorted(entries) for vid, entries in rebuilt.items()}
    if recorded != expected:
        violations.append("clients mismatch: client map differs from reconstruction")
    # Type consistency at every node.
    for node in g.nodes.values():
        try:
            inferred = node.op.infer_types([x.type for x in node.inputs])
        except TypeMismatch as exc:
            violations.append(f"type: {node!r} rejects its own inputs ({exc})")
            continue
        actual = [out.type for out in node.outputs]
        if list(inferred) != actual:
            violations.append(f"type: {node!r} outputs {actual} but inference says {inferred}")
    return violations
