"""Serialization: graph documents, tensor files, compiled-function containers.

Graph document (canonical JSON, schema "texpr-graph/1"): variables get
document-local integer ids assigned in order (declared inputs, then shared
variables, then constants and node outputs in topological node order).

    {"schema": "texpr-graph/1",
     "inputs":    [{"id", "name", "dtype", "broadcastable"}...],
     "shared":    [{"id", "name", "dtype", "broadcastable",
                    "value": {"shape", "data"}}...],
     "constants": [{"id", "dtype", "broadcastable", "shape", "data"}...],
     "nodes":     [{"op", "attrs", "inputs": [id...], "outputs": [id...]}...],
     "outputs":   [id...],
     "updates":   [[shared-id, value-id]...]}

Op attribute payloads are op-specific but stable: axes are integer arrays,
slice entries are integers or [start, stop, step] with explicit nulls, loop
ops embed their inner graph as a nested document.

Tensor file: 8-byte magic "TXTEN001", u8 dtype tag, u8 rank, rank u64
little-endian dims, then the row-major little-endian payload. A JSON object
{"dtype", "shape", "data"} is accepted as an inline fallback for small
tensors (sniffed by a leading "{").

Function container: 8-byte magic "TXFN", u32 schema version, u64 header
length, header JSON, then length-prefixed raw buffers (shared-variable
values). Loading never rewrites unless explicitly forced.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .dtypes import ALL_DTYPES, np_dtype
from .errors import CorruptPayload, TypeMismatch, UnknownVariable, VersionMismatch
from .graph import ApplyNode, Constant, FunctionGraph, Variable, TensorType, io_toposort
from .ops.base import op_from_payload
from .rewrites.engine import RewriteLog

GRAPH_SCHEMA = "texpr-graph/1"
TENSOR_MAGIC = b"TXTEN001"
FUNCTION_MAGIC = b"TXFN"
FUNCTION_VERSION = 1

_DTYPE_TAGS = {name: i for i, name in enumerate(ALL_DTYPES)}
_TAG_DTYPES = {i: name for name, i in _DTYPE_TAGS.items()}


# -- graph documents ---------------------------------------------------------


def encode_graph(inputs, outputs, shared=(), updates=()) -> dict:
    """Canonical document for the subgraph between ``inputs`` and ``outputs``.

    ``shared`` lists variables serialized with their current value;
    ``updates`` pairs (shared, value-variable).
    """
    inputs, outputs = list(inputs), list(outputs)
    ref: dict[int, int] = {}
    doc_inputs, doc_shared, doc_consts, doc_nodes = [], [], [], []

    def assign(v) -> int:
        ref[v.id] = len(ref)
        return ref[v.id]

    for v in inputs:
        doc_inputs.append(
            {
                "id": assign(v),
                "name": v.name,
                "dtype": v.type.dtype,
                "broadcastable": list(v.type.broadcastable),
            }
        )
    for s in shared:
        value = s._read()
        doc_shared.append(
            {
                "id": assign(s),
                "name": s.name,
                "dtype": s.type.dtype,
                "broadcastable": list(s.type.broadcastable),
                "value": {"shape": list(value.shape), "data": value.reshape(-1).tolist()},
            }
        )

    def encode_inner(inner_inputs, inner_outputs):
        return encode_graph(inner_inputs, inner_outputs)

    for node in io_toposort(outputs):
        in_refs = []
        for x in node.inputs:
            if x.id not in ref:
                if not isinstance(x, Constant):
                    raise UnknownVariable(
                        f"{x!r} is needed by the graph but not declared as input"
                    )
                doc_consts.append(
                    {
                        "id": assign(x),
                        "dtype": x.type.dtype,
                        "broadcastable": list(x.type.broadcastable),
                        "shape": list(x.value.shape),
                        "data": x.value.reshape(-1).tolist(),
                    }
                )
            in_refs.append(ref[x.id])
        out_refs = [assign(out) for out in node.outputs]
        doc_nodes.append(
            {
                "op": node.op.name,
                "attrs": node.op.attrs_payload(encode_inner),
                "inputs": in_refs,
                "outputs": out_refs,
            }
        )
    doc_outputs = []
    for v in outputs:
        if v.id not in ref:
            if isinstance(v, Constant):
                doc_consts.append(
                    {
                        "id": assign(v),
                        "dtype": v.type.dtype,
                        "broadcastable": list(v.type.broadcastable),
                        "shape": list(v.value.shape),
                        "data": v.value.reshape(-1).tolist(),
                    }
                )
            else:
                raise UnknownVariable(f"output {v!r} unreachable from declared inputs")
        doc_outputs.append(ref[v.id])
    doc = {
        "schema": GRAPH_SCHEMA,
        "inputs": doc_inputs,
        "shared": doc_shared,
        "constants": doc_consts,
        "nodes": doc_nodes,
        "outputs": doc_outputs,
        "updates": [[ref[s.id], ref[v.id]] for s, v in updates],
    }
    return doc


def decode_graph(doc: dict):
    """Rebuild (inputs, outputs, shared, updates) from a graph document."""
    if doc.get("schema") != GRAPH_SCHEMA:
        raise VersionMismatch(
            f"unsupported graph schema {doc.get('schema')!r}, expected {GRAPH_SCHEMA}"
        )
    table: dict[int, Variable] = {}
    inputs = []
    for entry in doc.get("inputs", ()):
        v = Variable(
            TensorType(entry["dtype"], entry["broadcastable"]), entry.get("name")
        )
        table[entry["id"]] = v
        inputs.append(v)
    shared_vars = []
    for entry in doc.get("shared", ()):
        from .runtime import SharedVariable

        value = np.asarray(
            entry["value"]["data"], dtype=np_dtype(entry["dtype"])
        ).reshape(entry["value"]["shape"])
        s = SharedVariable(
            value,
            name=entry.get("name"),
            dtype=entry["dtype"],
            broadcastable=entry["broadcastable"],
        )
        table[entry["id"]] = s
        shared_vars.append(s)
    for entry in doc.get("constants", ()):
        value = np.asarray(entry["data"], dtype=np_dtype(entry["dtype"])).reshape(
            entry["shape"]
        )
        table[entry["id"]] = Constant(
            value, dtype=entry["dtype"], broadcastable=entry.get("broadcastable")
        )

    def decode_inner(inner_doc):
        i_inputs, i_outputs, i_shared, _ = decode_graph(inner_doc)
        if i_shared:
            raise TypeMismatch("inner graphs cannot hold shared variables")
        return i_inputs, i_outputs

    for entry in doc.get("nodes", ()):
        op = op_from_payload(entry["op"], entry.get("attrs", {}), decode_inner)
        node_inputs = [table[i] for i in entry["inputs"]]
        out_types = op.infer_types([x.type for x in node_inputs])
        if len(out_types) != len(entry["outputs"]):
            raise CorruptPayload(
                f"node {entry['op']} declares {len(entry['outputs'])} outputs, "
                f"inference yields {len(out_types)}"
            )
        outs = [Variable(t) for t in out_types]
        ApplyNode(op, node_inputs, outs)
        for ref, out in zip(entry["outputs"], outs):
            table[ref] = out
    try:
        outputs = [table[i] for i in doc.get("outputs", ())]
        updates = [(table[s], table[v]) for s, v in doc.get("updates", ())]
    except KeyError as exc:
        raise CorruptPayload(f"dangling variable reference {exc}") from exc
    return inputs, outputs, shared_vars, updates


def dump_graph(inputs, outputs, shared=(), updates=()) -> str:
    return json.dumps(encode_graph(inputs, outputs, shared, updates), indent=2)


def load_graph(text: str):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptPayload(f"graph document is not valid JSON: {exc}") from exc
    return decode_graph(doc)


# -- tensor files -------------------------------------------------------------


def write_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    dtype_name = arr.dtype.name
    if dtype_name not in _DTYPE_TAGS:
        raise TypeMismatch(f"cannot serialize dtype {arr.dtype}")
    header = TENSOR_MAGIC + struct.pack("<BB", _DTYPE_TAGS[dtype_name], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<")).tobytes(order="C")
    return header + dims + payload


def read_tensor(data: bytes) -> np.ndarray:
    if data[:1] == b"{":
        doc = json.loads(data.decode("utf8"))
        return np.asarray(doc["data"], dtype=np_dtype(doc["dtype"])).reshape(
            doc["shape"]
        )
    if len(data) < len(TENSOR_MAGIC) + 2:
        raise CorruptPayload("tensor file too short")
    if data[: len(TENSOR_MAGIC)] != TENSOR_MAGIC:
        raise CorruptPayload("bad tensor file magic")
    tag, rank = struct.unpack_from("<BB", data, len(TENSOR_MAGIC))
    if tag not in _TAG_DTYPES:
        raise CorruptPayload(f"unknown dtype tag {tag}")
    offset = len(TENSOR_MAGIC) + 2
    try:
        shape = struct.unpack_from(f"<{rank}Q", data, offset)
    except struct.error as exc:
        raise CorruptPayload("truncated tensor header") from exc
    offset += 8 * rank
    dtype = np.dtype(np_dtype(_TAG_DTYPES[tag])).newbyteorder("<")
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = data[offset:]
    if len(payload) != expected:
        raise CorruptPayload(
            f"tensor payload is {len(payload)} bytes, expected {expected}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(np_dtype(_TAG_DTYPES[tag]), copy=True)


# -- compiled-function containers ---------------------------------------------


def encode_function(fn) -> bytes:
    fgraph = fn.fgraph
    shared_list = [s for s, _ in fn.shared_bindings]
    explicit = fn.input_vars
    doc = encode_graph(
        explicit + [var for _, var in fn.shared_bindings],
        fgraph.outputs,
        shared=(),
        updates=(),
    )
    header = {
        "version": FUNCTION_VERSION,
        "graph": doc,
        "n_explicit_inputs": len(explicit),
        "n_outputs": fn.n_outputs,
        "single_output": fn.single_output,
        "allow_gc": fn.allow_gc,
        "preset": fn.preset,
        "nan_guard": None
        if fn.nan_guard is None
        else {
            "check_nan": fn.nan_guard.check_nan,
            "check_inf": fn.nan_guard.check_inf,
            "big_threshold": fn.nan_guard.big_threshold,
        },
        "shared": [
            {
                "name": s.name,
                "dtype": s.type.dtype,
                "broadcastable": list(s.type.broadcastable),
                "shape": list(s._read().shape),
                "buffer": i,
            }
            for i, s in enumerate(shared_list)
        ],
        "updates": [
            shared_list.index(s) for s, _ in fn.updates
        ],
    }
    header_bytes = json.dumps(header).encode("utf8")
    blob = bytearray()
    blob += FUNCTION_MAGIC
    blob += struct.pack("<I", FUNCTION_VERSION)
    blob += struct.pack("<Q", len(header_bytes))
    blob += header_bytes
    for s in shared_list:
        value = np.ascontiguousarray(s._read())
        payload = value.astype(value.dtype.newbyteorder("<")).tobytes(order="C")
        blob += struct.pack("<Q", len(payload))
        blob += payload
    return bytes(blob)


def decode_function(data: bytes, force_reoptimize: bool = False):
    from .diagnostics import NanGuardConfig
    from .runtime import CompiledFunction, SharedVariable

    if data[: len(FUNCTION_MAGIC)] != FUNCTION_MAGIC:
        raise CorruptPayload("bad function container magic")
    (version,) = struct.unpack_from("<I", data, len(FUNCTION_MAGIC))
    if version != FUNCTION_VERSION:
        raise VersionMismatch(
            f"function container version {version}, supported {FUNCTION_VERSION}"
        )
    offset = len(FUNCTION_MAGIC) + 4
    try:
        (header_len,) = struct.unpack_from("<Q", data, offset)
    except struct.error as exc:
        raise CorruptPayload("truncated container header") from exc
    offset += 8
    if offset + header_len > len(data):
        raise CorruptPayload("truncated container header")
    try:
        header = json.loads(data[offset : offset + header_len].decode("utf8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptPayload(f"unreadable container header: {exc}") from exc
    offset += header_len

    buffers = []
    for _ in header["shared"]:
        if offset + 8 > len(data):
            raise CorruptPayload("truncated shared-value section")
        (length,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        if offset + length > len(data):
            raise CorruptPayload("truncated shared-value payload")
        buffers.append(data[offset : offset + length])
        offset += length

    inputs, outputs, _, _ = decode_graph(header["graph"])
    n_explicit = header["n_explicit_inputs"]
    explicit, shared_inputs = inputs[:n_explicit], inputs[n_explicit:]
    shared_vars = []
    for entry, payload in zip(header["shared"], buffers):
        dtype = np.dtype(np_dtype(entry["dtype"])).newbyteorder("<")
        expected = int(np.prod(entry["shape"], dtype=np.int64)) * dtype.itemsize
        if len(payload) != expected:
            raise CorruptPayload("shared value payload size mismatch")
        value = (
            np.frombuffer(payload, dtype=dtype)
            .reshape(entry["shape"])
            .astype(np_dtype(entry["dtype"]), copy=True)
        )
        shared_vars.append(
            SharedVariable(
                value,
                name=entry.get("name"),
                dtype=entry["dtype"],
                broadcastable=entry["broadcastable"],
            )
        )

    fgraph = FunctionGraph(inputs, outputs)
    fgraph.protected_inputs = set(shared_inputs)
    log = RewriteLog()
    preset = header["preset"]
    if force_reoptimize:
        from .rewrites.engine import RewriteContext, run_preset

        _, log = run_preset(
            fgraph, "fast_run", ctx=RewriteContext(execution_bound=True)
        )
    guard = header.get("nan_guard")
    return CompiledFunction(
        fgraph=fgraph,
        n_outputs=header["n_outputs"],
        input_vars=explicit,
        shared_bindings=list(zip(shared_vars, shared_inputs)),
        updates=[
            (shared_vars[i], fgraph.outputs[header["n_outputs"] + k])
            for k, i in enumerate(header["updates"])
        ],
        allow_gc=header["allow_gc"],
        nan_guard=None if guard is None else NanGuardConfig(**guard),
        rewrite_log=log,
        preset=preset,
        single_output=header["single_output"],
    )
