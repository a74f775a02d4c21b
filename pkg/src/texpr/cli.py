"""Command-line front end.

    texpr compile GRAPH.json -o FN.bin [--preset P] [--conv-impl I] ...
    texpr run FN.bin -i IN.tensor ... [--out-prefix P] [--profile OUT.json]
    texpr grad GRAPH.json --cost N --wrt NAME ... -o GRAD.json
    texpr dot FILE [--with-profile]
    texpr bench FIXTURE [--size N] [--reps R] [--seed S]

Configuration precedence is flag > environment variable > default; the
environment names are TEXPR_PRESET, TEXPR_CONV_IMPL, TEXPR_MAX_PASSES,
TEXPR_ALLOW_GC, TEXPR_NAN_GUARD and TEXPR_SEED. Every failure exits
nonzero after printing a single JSON error line to stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import runtime, serialize
from .diagnostics import NanGuardConfig, dot_export
from .errors import TexprError
from .fixtures import FIXTURES, build_fixture
from .serialize import FUNCTION_MAGIC


def _env(name, default):
    return os.environ.get(f"TEXPR_{name}", default)


def _env_flag(name) -> bool | None:
    raw = os.environ.get(f"TEXPR_{name}")
    if raw is None:
        return None
    return raw.strip().lower() in ("1", "true", "yes", "on")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="texpr", description="tensor-expression compiler"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="compile a graph document to a function container")
    c.add_argument("graph")
    c.add_argument("-o", "--output", required=True)
    c.add_argument("--preset", default=_env("PRESET", "fast_run"))
    c.add_argument(
        "--conv-impl",
        default=_env("CONV_IMPL", "gemm"),
        choices=("gemm", "reference", "none"),
    )
    c.add_argument("--include-rewrite", action="append", default=[])
    c.add_argument("--exclude-rewrite", action="append", default=[])
    c.add_argument("--max-passes", type=int, default=int(_env("MAX_PASSES", "8")))

    r = sub.add_parser("run", help="run a compiled function on tensor files")
    r.add_argument("function")
    r.add_argument("-i", "--input", action="append", default=[])
    r.add_argument("--out-prefix", default="out")
    r.add_argument("--allow-gc", choices=("true", "false"), default=None)
    r.add_argument("--nan-guard", action="store_true", default=None)
    r.add_argument("--profile", default=None, help="write a profile JSON here")

    g = sub.add_parser("grad", help="differentiate a graph document")
    g.add_argument("graph")
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--cost", type=int, default=0, help="output position of the cost")
    g.add_argument("--wrt", action="append", default=[], help="input name (repeatable)")
    g.add_argument("--disconnected", choices=("error", "zero"), default="error")

    d = sub.add_parser("dot", help="print a graph or function as DOT")
    d.add_argument("file")
    d.add_argument("--with-profile", action="store_true")

    b = sub.add_parser("bench", help="time a fixture under presets none and fast_run")
    b.add_argument("fixture", choices=sorted(FIXTURES))
    b.add_argument("--size", type=int, default=None)
    b.add_argument("--length", type=int, default=None)
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--seed", type=int, default=int(_env("SEED", "0")))
    return parser


def cmd_compile(args) -> int:
    with open(args.graph, "r", encoding="utf8") as fh:
        inputs, outputs, shared_vars, updates = serialize.load_graph(fh.read())
    fn = runtime.compile(
        inputs,
        outputs,
        updates=updates,
        preset=args.preset,
        include=tuple(args.include_rewrite),
        exclude=tuple(args.exclude_rewrite),
        conv_impl=args.conv_impl,
        max_passes=args.max_passes,
    )
    with open(args.output, "wb") as fh:
        fh.write(fn.save())
    summary = fn.rewrite_log.summary()
    print(json.dumps({"written": args.output, "rewrites": summary}, indent=2))
    return 0


def cmd_run(args) -> int:
    with open(args.function, "rb") as fh:
        fn = runtime.load(fh.read())
    override_gc = args.allow_gc
    if override_gc is None:
        env = _env_flag("ALLOW_GC")
        override_gc = None if env is None else ("true" if env else "false")
    if override_gc is not None:
        fn.allow_gc = override_gc == "true"
    guard = args.nan_guard
    if guard is None:
        guard = _env_flag("NAN_GUARD")
    if guard:
        fn.nan_guard = NanGuardConfig()
    values = []
    for path in args.input:
        with open(path, "rb") as fh:
            values.append(serialize.read_tensor(fh.read()))
    outputs = fn(*values)
    if fn.single_output:
        outputs = [outputs]
    written = []
    for i, out in enumerate(outputs):
        path = f"{args.out_prefix}{i}.tensor"
        with open(path, "wb") as fh:
            fh.write(serialize.write_tensor(out))
        written.append(path)
    if args.profile:
        with open(args.profile, "w", encoding="utf8") as fh:
            json.dump(fn.profile.as_json(fn), fh, indent=2)
    print(json.dumps({"outputs": written, "profile": args.profile}))
    return 0


def cmd_grad(args) -> int:
    from .autodiff import grad

    with open(args.graph, "r", encoding="utf8") as fh:
        inputs, outputs, shared_vars, _ = serialize.load_graph(fh.read())
    if not 0 <= args.cost < len(outputs):
        raise TexprError(f"cost output {args.cost} out of range")
    cost = outputs[args.cost]
    by_name = {v.name: v for v in inputs if v.name}
    if args.wrt:
        missing = [w for w in args.wrt if w not in by_name]
        if missing:
            raise TexprError(f"unknown wrt inputs: {missing}")
        wrt = [by_name[w] for w in args.wrt]
    else:
        from .dtypes import is_float

        wrt = [v for v in inputs if is_float(v.type.dtype)]
    grads = grad(cost, wrt, disconnected=args.disconnected)
    doc = serialize.dump_graph(inputs, grads, shared=shared_vars)
    with open(args.output, "w", encoding="utf8") as fh:
        fh.write(doc)
    print(json.dumps({"written": args.output, "n_gradients": len(grads)}))
    return 0


def cmd_dot(args) -> int:
    with open(args.file, "rb") as fh:
        data = fh.read()
    if data[: len(FUNCTION_MAGIC)] == FUNCTION_MAGIC:
        fn = runtime.load(data)
        print(dot_export(fn, with_profile=args.with_profile))
        return 0
    inputs, outputs, _, _ = serialize.load_graph(data.decode("utf8"))
    from .graph import FunctionGraph

    print(dot_export(FunctionGraph(inputs, outputs)))
    return 0


def _median(xs):
    xs = sorted(xs)
    return xs[len(xs) // 2]


def cmd_bench(args) -> int:
    kwargs = {}
    if args.size is not None:
        kwargs["size"] = args.size
    if args.length is not None:
        kwargs["length"] = args.length
    builder = FIXTURES[args.fixture]
    inputs, outputs, make_point = builder(**kwargs)
    rng = np.random.default_rng(args.seed)
    point = make_point(rng)
    report = {"fixture": args.fixture, "reps": args.reps, "seed": args.seed}
    report.update(kwargs)
    results = {}
    for preset in ("none", "fast_run"):
        fn = runtime.compile(inputs, outputs, preset=preset, conv_impl="gemm")
        fn(*point)  # warm up
        times = []
        for _ in range(args.reps):
            started = time.perf_counter()
            fn(*point)
            times.append(time.perf_counter() - started)
        from .ops.elemwise import CompositeElemwise

        results[preset] = {
            "median_s": _median(times),
            "nodes": len(fn.order),
            "fused_nodes": sum(
                1 for n in fn.order if isinstance(n.op, CompositeElemwise)
            ),
        }
    report["presets"] = results
    if results["fast_run"]["median_s"] > 0:
        report["speedup_fast_run"] = (
            results["none"]["median_s"] / results["fast_run"]["median_s"]
        )
    print(json.dumps(report, indent=2))
    return 0


COMMANDS = {
    "compile": cmd_compile,
    "run": cmd_run,
    "grad": cmd_grad,
    "dot": cmd_dot,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except TexprError as exc:
        line = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(line), file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        line = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(line), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
