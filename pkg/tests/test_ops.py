"""Op library: type inference, host kernels, gradient and R-operator rules,
shape inference, broadcasting semantics."""
import itertools

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import texpr
from texpr import ShapeMismatch, TypeMismatch, Variable, tensor_type
from texpr.interp import eval_graph
from texpr.ops import (
    DISCONNECTED,
    grad_rule,
    infer_shape,
    infer_types,
    perform,
    rop_rule,
)
from texpr.ops.elemwise import Elemwise, KERNELS
from texpr.ops.linalg import Dot
from texpr.ops.reductions import Sum

from helpers import rel_err


# -- infer_types --------------------------------------------------------------


def test_infer_types_add_broadcast_and_rule(rng):
    t1 = tensor_type("float64", 2, (False, False))
    t2 = tensor_type("float64", 2, (True, False))
    (out,) = infer_types(Elemwise("add"), [t1, t2])
    assert out.broadcastable == (False, False)
    # derived: matches the shapes the reference evaluator actually produces
    x = texpr.make_input(t1)
    y = texpr.make_input(t2)
    (value,) = eval_graph([x + y], {x: rng.standard_normal((3, 4)),
                                    y: rng.standard_normal((1, 4))})
    assert value.shape == (3, 4)


def test_infer_types_dot():
    t = tensor_type("float64", 2)
    (out,) = infer_types(Dot(), [t, t])
    assert out.ndim == 2


def test_infer_types_sum_axis0():
    t = tensor_type("float64", 2)
    (out,) = infer_types(Sum((0,)), [t])
    assert out.ndim == 1


def test_infer_types_rejects_with_reason():
    with pytest.raises(TypeMismatch):
        infer_types(Dot(), [tensor_type("float64", 3), tensor_type("float64", 2)])


# -- perform -------------------------------------------------------------------


def test_perform_add():
    (out,) = perform(Elemwise("add"), [np.array([1.0, 2.0]), np.array([3.0, 4.0])])
    np.testing.assert_array_equal(out, [4.0, 6.0])


def test_perform_log1p_tiny_matches_highprec_oracle():
    # oracle: 50-digit arithmetic, frozen value
    with mpmath.workdps(50):
        expected = float(mpmath.log(mpmath.mpf(1) + mpmath.mpf("1e-12")))
    assert expected == pytest.approx(9.999999999995e-13, rel=1e-12)
    (out,) = perform(Elemwise("log1p"), [np.array(1e-12)])
    assert rel_err(out, expected) <= 1e-6


def test_perform_dot_hand_checked():
    (out,) = perform(Dot(), [np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]])])
    np.testing.assert_array_equal(out, [[3.0], [7.0]])


def test_perform_float_division_by_zero_is_ieee():
    (out,) = perform(Elemwise("div"), [np.array([1.0, 0.0]), np.array([0.0, 0.0])])
    assert np.isinf(out[0]) and np.isnan(out[1])


def test_perform_integer_division_by_zero_raises():
    with pytest.raises(ZeroDivisionError):
        perform(Elemwise("div"), [np.array([1], dtype=np.int64), np.array([0], dtype=np.int64)])


def test_runtime_broadcast_needs_declared_pattern():
    # extent 1 meeting extent 3 on a dim not declared broadcastable -> error
    x = texpr.make_input(tensor_type("float64", 1, (False,)))
    y = texpr.make_input(tensor_type("float64", 1, (False,)))
    with pytest.raises(ShapeMismatch):
        eval_graph([x + y], {x: np.zeros(1), y: np.zeros(3)})


# -- gradient rules ------------------------------------------------------------


def test_grad_rule_mul_product_rule():
    x, y = texpr.vector("x"), texpr.vector("y")
    v = texpr.vector("v")
    gx, gy = grad_rule(Elemwise("mul"), [x, y], [v])
    xv, yv, vv = np.array([1.0, 2.0]), np.array([3.0, 4.0]), np.array([0.5, 0.25])
    (gxv,) = eval_graph([gx], {x: xv, y: yv, v: vv})
    (gyv,) = eval_graph([gy], {x: xv, y: yv, v: vv})
    np.testing.assert_allclose(gxv, vv * yv)
    np.testing.assert_allclose(gyv, vv * xv)


def test_grad_rule_dot_fd(rng):
    a = texpr.matrix("a")
    b = texpr.matrix("b")
    out = texpr.dot(a, b)
    point = [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]
    report = texpr.verify_grad([a, b], [out], point, seed=7, rel_tol=1e-6)
    assert report.passed, str(report)


def test_grad_rule_sum_axis_fd(rng):
    x = texpr.matrix("x")
    out = texpr.sum(x, axis=0)
    report = texpr.verify_grad([x], [out], [rng.standard_normal((3, 4))], rel_tol=1e-6)
    assert report.passed, str(report)


def test_grad_rule_integer_inputs_disconnected():
    x = texpr.make_input(tensor_type("int64", 1))
    y = texpr.make_input(tensor_type("int64", 1))
    v = texpr.make_input(tensor_type("int64", 1))
    gx, gy = grad_rule(Elemwise("add"), [x, y], [v])
    assert gx is DISCONNECTED and gy is DISCONNECTED


def test_grad_rule_comparisons_disconnected():
    x, y = texpr.vector("x"), texpr.vector("y")
    v = texpr.make_input(tensor_type("bool", 1))
    gx, gy = grad_rule(Elemwise("lt"), [x, y], [v])
    assert gx is DISCONNECTED and gy is DISCONNECTED


def test_grad_maximum_ties_route_to_first():
    x, y = texpr.scalar("x"), texpr.scalar("y")
    cost = texpr.maximum(x, y)
    gx, gy = texpr.grad(cost, [x, y])
    gxv, gyv = [v.item() for v in eval_graph([gx, gy], {x: np.array(2.0), y: np.array(2.0)})]
    assert (gxv, gyv) == (1.0, 0.0)


def test_grad_max_reduction_first_maximal(rng):
    x = texpr.vector("x")
    cost = texpr.max(x)
    g = texpr.grad(cost, x)
    (gv,) = eval_graph([g], {x: np.array([1.0, 5.0, 5.0, 2.0])})
    np.testing.assert_array_equal(gv, [0.0, 1.0, 0.0, 0.0])


# -- R-operator rules -----------------------------------------------------------


def test_rop_rule_mul_bilinearity():
    x, y, dx, dy = (texpr.vector(n) for n in "x y dx dy".split())
    (res,) = rop_rule(Elemwise("mul"), [x, y], [dx, dy])
    xv, yv = np.array([1.0, 2.0]), np.array([3.0, 4.0])
    dxv, dyv = np.array([0.1, 0.2]), np.array([0.3, 0.4])
    (val,) = eval_graph([res], {x: xv, y: yv, dx: dxv, dy: dyv})
    np.testing.assert_allclose(val, dxv * yv + xv * dyv)


def test_rop_rule_exp():
    x, dx = texpr.vector("x"), texpr.vector("dx")
    (res,) = rop_rule(Elemwise("exp"), [x], [dx])
    (val,) = eval_graph([res], {x: np.array([0.0, 1.0]), dx: np.array([1.0, 2.0])})
    np.testing.assert_allclose(val, np.exp([0.0, 1.0]) * [1.0, 2.0])


def test_rop_rule_dot_fd(rng):
    a, b = texpr.matrix("a"), texpr.matrix("b")
    da, db = texpr.matrix("da"), texpr.matrix("db")
    (res,) = rop_rule(Dot(), [a, b], [da, db])
    av, bv = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    dav, dbv = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    (val,) = eval_graph([res], {a: av, b: bv, da: dav, db: dbv})
    h = 1e-7
    fd = ((av + h * dav) @ (bv + h * dbv) - (av - h * dav) @ (bv - h * dbv)) / (2 * h)
    assert rel_err(val, fd) <= 1e-6


def test_rop_unsupported_is_explicit():
    from texpr.errors import NotSupported
    from texpr.ops.conv import Conv2d

    op = Conv2d("grad_inputs", "gemm")
    with pytest.raises(NotSupported):
        rop_rule(op, [texpr.tensor4("f"), texpr.tensor4("v"), texpr.vector("s", dtype="int64")], [None, None, None])


# -- infer_shape -----------------------------------------------------------------


def test_infer_shape_reshape():
    x = texpr.matrix("x")
    out = texpr.reshape(x, (6,))
    shapes = infer_shape(out.owner.op, out.owner, [(2, 3), (1,)])
    assert shapes == [(6,)]


def test_infer_shape_conv_formula(rng):
    from texpr.ops import conv2d_reference

    x = texpr.tensor4("x")
    f = texpr.tensor4("f")
    out = texpr.conv2d(x, f)
    shapes = infer_shape(out.owner.op, out.owner, [(2, 3, 8, 8), (4, 3, 3, 3)])
    assert shapes == [(2, 4, 6, 6)]
    # derived: (H - kh + 2 pad)/stride + 1, cross-checked by executing
    value = conv2d_reference(
        rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3))
    )
    assert value.shape == (2, 4, 6, 6)


def test_infer_shape_sum_axis1():
    x = texpr.matrix("x")
    out = texpr.sum(x, axis=1)
    assert infer_shape(out.owner.op, out.owner, [(5, 7)]) == [(5,)]


# -- broadcasting: exhaustive small-rank enumeration ------------------------------


def _patterns(rank):
    return list(itertools.product([False, True], repeat=rank))


def test_broadcast_rules_exhaustive_rank_le_4(rng):
    # every pattern pair of ranks <= 4: inferred pattern matches the shape the
    # reference evaluator produces (guaranteed-1 dims bound to extent 1,
    # others to distinct extents)
    checked = 0
    for ra in range(0, 5):
        for rb in range(0, 5):
            for pa in _patterns(ra):
                for pb in _patterns(rb):
                    ta, tb = tensor_type("float64", ra, pa), tensor_type("float64", rb, pb)
                    x, y = texpr.make_input(ta), texpr.make_input(tb)
                    ndim = max(ra, rb)
                    full = [2 + (i % 3) for i in range(ndim)]

                    def shape_for(rank, pattern):
                        return tuple(
                            1 if pattern[i] else full[i + (ndim - rank)]
                            for i in range(rank)
                        )

                    sx, sy = shape_for(ra, pa), shape_for(rb, pb)
                    out = x + y
                    (value,) = eval_graph(
                        [out], {x: rng.standard_normal(sx), y: rng.standard_normal(sy)}
                    )
                    expected = np.broadcast_shapes(sx, sy)
                    assert value.shape == expected
                    for flag, extent in zip(out.type.broadcastable, value.shape):
                        if flag:
                            assert extent == 1
                    checked += 1
    assert checked == (1 + 2 + 4 + 8 + 16) ** 2


# -- composite equivalence (1 ulp) -------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_composite_matches_unfused_within_one_ulp(seed):
    rng = np.random.default_rng(seed)
    x = texpr.vector("x")
    y = texpr.vector("y")
    z = texpr.tanh(x) * y + texpr.sigmoid(y) * 0.5
    z = texpr.exp(z * 0.25) + texpr.sqr(x)
    fused = texpr.compile([x, y], [z], preset="fast_run")
    plain = texpr.compile([x, y], [z], preset="none")
    assert any(type(n.op).__name__ == "CompositeElemwise" for n in fused.order)
    point = (rng.standard_normal(64), rng.standard_normal(64))
    a, b = fused(*point)[0], plain(*point)[0]
    ulp = np.spacing(np.maximum(np.abs(a), np.abs(b)))
    assert np.all(np.abs(a - b) <= ulp)


# -- breakpoint op -----------------------------------------------------------------


def test_breakpoint_silent_when_condition_zero():
    fired = []
    texpr.register_breakpoint_handler("t0", lambda names, values: fired.append(names))
    x = texpr.vector("x")
    (mon,) = texpr.breakpoint_op(texpr.as_variable(0), [x], label="t0")
    f = texpr.compile([x], [mon], preset="none")
    np.testing.assert_array_equal(f(np.array([1.0, 2.0]))[0], [1.0, 2.0])
    assert fired == []
    texpr.register_breakpoint_handler("t0", None)


def test_breakpoint_fires_once_on_nan():
    calls = []

    def handler(names, values):
        calls.append((names, [v.copy() for v in values]))
        return "continue"

    texpr.register_breakpoint_handler("t1", handler)
    x = texpr.vector("x")
    condition = texpr.max(texpr.isnan(x))
    (mon,) = texpr.breakpoint_op(condition, [x], label="t1")
    f = texpr.compile([x], [mon], preset="none")
    value = np.array([1.0, np.nan, 3.0])
    out = f(value)[0]
    assert len(calls) == 1
    np.testing.assert_array_equal(calls[0][1][0], value)
    np.testing.assert_array_equal(out, value)
    texpr.register_breakpoint_handler("t1", None)


def test_breakpoint_passthrough_bit_exact(rng):
    x = texpr.vector("x")
    y = texpr.vector("y")
    mons = texpr.breakpoint_op(texpr.as_variable(0), [x, y], label="t2")
    f = texpr.compile([x, y], list(mons), preset="none")
    xv, yv = rng.standard_normal(8), rng.standard_normal(8)
    outs = f(xv, yv)
    assert np.array_equal(outs[0], xv) and np.array_equal(outs[1], yv)


def test_breakpoint_abort():
    from texpr.errors import BreakpointAbort

    texpr.register_breakpoint_handler("t3", lambda names, values: "abort")
    x = texpr.scalar("x")
    (mon,) = texpr.breakpoint_op(x > 0.0, [x], label="t3")
    f = texpr.compile([x], [mon], preset="none")
    assert f(-1.0)[0] == pytest.approx(-1.0)
    with pytest.raises(BreakpointAbort):
        f(1.0)
    texpr.register_breakpoint_handler("t3", None)


# -- every differentiable kernel against finite differences -----------------------


DIFFERENTIABLE_POINTS = {
    "add": ([0.7, -0.3], [0.2, 0.9]),
    "sub": ([0.7, -0.3], [0.2, 0.9]),
    "mul": ([0.7, -0.3], [0.2, 0.9]),
    "div": ([0.7, -0.3], [1.2, 1.9]),
    "neg": ([0.7, -0.3],),
    "exp": ([0.3, -0.6],),
    "log": ([0.8, 2.1],),
    "log1p": ([0.4, 2.0],),
    "pow": ([1.3, 0.7], [2.0, 3.0]),
    "sqr": ([0.7, -1.1],),
    "sqrt": ([0.9, 2.4],),
    "sigmoid": ([0.4, -1.2],),
    "tanh": ([0.4, -1.2],),
    "maximum": ([0.7, -0.3], [0.2, 0.9]),
}


@pytest.mark.parametrize("kernel", sorted(DIFFERENTIABLE_POINTS))
def test_kernel_gradient_fd(kernel):
    point = [np.asarray(p) for p in DIFFERENTIABLE_POINTS[kernel]]
    xs = [texpr.vector(f"x{i}") for i in range(len(point))]
    out = texpr.ops.make(kernel, list(xs))
    report = texpr.verify_grad(xs, [out], point, seed=11, rel_tol=1e-5)
    assert report.passed, f"{kernel}: {report}"


@pytest.mark.parametrize("kernel", sorted(DIFFERENTIABLE_POINTS))
def test_kernel_lop_rop_duality(kernel, rng):
    point = [np.asarray(p) for p in DIFFERENTIABLE_POINTS[kernel]]
    xs = [texpr.vector(f"x{i}") for i in range(len(point))]
    out = texpr.ops.make(kernel, list(xs))
    us = [texpr.vector(f"u{i}") for i in range(len(point))]
    w = texpr.vector("w")
    jv = texpr.rop([out], xs, us)[0]
    lhs_expr = texpr.sum(w * jv)
    cost = texpr.sum(w * out)
    lops = texpr.grad(cost, xs, disconnected="zero")
    rhs_expr = None
    for lop_term, u in zip(lops, us):
        term = texpr.sum(lop_term * u)
        rhs_expr = term if rhs_expr is None else rhs_expr + term
    bindings = {x: p for x, p in zip(xs, point)}
    bindings.update({u: rng.standard_normal(2) for u in us})
    bindings[w] = rng.standard_normal(2)
    lhs, rhs = eval_graph([lhs_expr, rhs_expr], bindings)
    assert rel_err(lhs, rhs) <= 1e-8
