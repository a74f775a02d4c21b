"""Differentiation drivers: grad, rop, duality, the finite-difference checker."""
import numpy as np
import pytest

import texpr
from texpr import DisconnectedInput, FunctionGraph, TypeMismatch, validate
from texpr.interp import eval_graph
from texpr.testing import random_graph

from helpers import rel_err


def test_grad_sum_of_squares_is_2x(rng):
    x = texpr.vector("x")
    cost = texpr.sum(x * x)
    g = texpr.grad(cost, x)
    point = rng.standard_normal(5)
    (gv,) = eval_graph([g], {x: point})
    np.testing.assert_allclose(gv, 2 * point, rtol=1e-12)
    report = texpr.verify_grad([x], [cost], [point], rel_tol=1e-6)
    assert report.passed, str(report)


def test_grad_constant_cost_zero_policy():
    x = texpr.vector("x")
    cost = texpr.sum(texpr.as_variable(np.array([2.0])) * 1.0)
    g = texpr.grad(cost, x, disconnected="zero")
    (gv,) = eval_graph([g], {x: np.array([5.0, 6.0])})
    np.testing.assert_array_equal(gv, [0.0, 0.0])


def test_grad_disconnected_default_errors():
    x = texpr.vector("x")
    y = texpr.vector("y")
    cost = texpr.sum(y * y)
    with pytest.raises(DisconnectedInput):
        texpr.grad(cost, x)


def test_second_derivative_of_cube(rng):
    x = texpr.vector("x")
    cost = texpr.sum(x * x * x)
    g1 = texpr.grad(cost, x)  # 3x^2
    g2 = texpr.grad(texpr.sum(g1), x)  # 6x
    point = rng.standard_normal(4)
    (g2v,) = eval_graph([g2], {x: point})
    np.testing.assert_allclose(g2v, 6 * point, rtol=1e-10)
    # numeric: finite differences of the first gradient
    h = 1e-6

    def grad1(p):
        return eval_graph([g1], {x: p})[0]

    for k in range(point.size):
        bump = np.zeros_like(point)
        bump[k] = h
        fd = (grad1(point + bump) - grad1(point - bump))[k] / (2 * h)
        assert rel_err(fd, 6 * point[k], floor=1e-6) <= 1e-5


def test_third_derivative_polynomial_exact_on_integers():
    x = texpr.scalar("x")
    cost = x * x * x * x  # x^4; d3/dx3 = 24x
    g3 = texpr.grad(texpr.grad(texpr.grad(cost, x), x), x)
    for value in (-2.0, 0.0, 1.0, 3.0):
        (got,) = eval_graph([g3], {x: np.array(value)})
        assert float(got) == 24.0 * value


def test_grad_requires_scalar_float_cost():
    x = texpr.vector("x")
    with pytest.raises(TypeMismatch):
        texpr.grad(x * x, x)  # vector cost


def test_grad_rejects_integer_wrt():
    i = texpr.make_input(texpr.tensor_type("int64", 1), "i")
    x = texpr.vector("x")
    cost = texpr.sum(x)
    with pytest.raises(TypeMismatch):
        texpr.grad(cost, [x, i])


def test_fanout_summation_matches_graph_surgery(rng):
    # cost = g(y, y) vs cost' = g(y1, y2) with y1 = y2 = y: gradients agree
    x = texpr.vector("x")
    y = texpr.tanh(x)
    cost = texpr.sum(y * texpr.sigmoid(y))
    g = texpr.grad(cost, x)

    y1 = texpr.vector("y1")
    y2 = texpr.vector("y2")
    split_cost = texpr.sum(y1 * texpr.sigmoid(y2))
    gy1 = texpr.grad(split_cost, y1, disconnected="zero")
    gy2 = texpr.grad(split_cost, y2, disconnected="zero")
    # chain the two slot-gradients through y = tanh(x) by hand
    yv_var = texpr.vector("yv")
    gsum = texpr.vector("gsum")
    chain = texpr.grad(texpr.sum(texpr.tanh(x) * gsum), x, disconnected="zero")

    point = rng.standard_normal(6)
    yv = np.tanh(point)
    g1v, g2v = eval_graph([gy1, gy2], {y1: yv, y2: yv})
    (expected,) = eval_graph([chain], {x: point, gsum: g1v + g2v})
    (got,) = eval_graph([g], {x: point})
    assert rel_err(got, expected) <= 1e-10


def test_grad_produces_valid_graph(rng):
    for seed in range(5):
        graph = random_graph(np.random.default_rng(seed), n_ops=6)
        g = texpr.grad(graph.output, graph.inputs, disconnected="zero")
        fg = FunctionGraph(graph.inputs, list(g))
        assert validate(fg) == []


def test_rop_linear():
    x = texpr.vector("x")
    v = texpr.vector("v")
    y = x * 3.0
    r = texpr.rop([y], [x], [v])[0]
    (rv,) = eval_graph([r], {x: np.array([1.0, 2.0]), v: np.array([1.0, 0.5])})
    np.testing.assert_allclose(rv, [3.0, 1.5])


def test_rop_exp_at_zero():
    x = texpr.scalar("x")
    v = texpr.scalar("v")
    r = texpr.rop([texpr.exp(x)], [x], [v])[0]
    (rv,) = eval_graph([r], {x: np.array(0.0), v: np.array(1.0)})
    assert float(rv) == pytest.approx(1.0)


def test_rop_direction_type_checked():
    x = texpr.vector("x")
    with pytest.raises(TypeMismatch):
        texpr.rop([x * 2.0], [x], [texpr.matrix("m")])


def test_duality_random_graphs():
    for seed in range(20):
        rng = np.random.default_rng(seed + 1000)
        graph = random_graph(rng, n_ops=5, smooth=True)
        point = graph.sample_point(rng)
        us = [texpr.make_input(v.type) for v in graph.inputs]
        jv = texpr.rop([graph.output], graph.inputs, us)[0]
        w = texpr.scalar("w")
        lhs_expr = w * jv
        lops = texpr.grad(w * graph.output, graph.inputs, disconnected="zero")
        rhs_expr = None
        for lop_term, u in zip(lops, us):
            term = texpr.sum(lop_term * u)
            rhs_expr = term if rhs_expr is None else rhs_expr + term
        bindings = dict(zip(graph.inputs, point))
        bindings.update({u: rng.uniform(-1, 1, size=p.shape) for u, p in zip(us, point)})
        bindings[w] = np.array(rng.uniform(0.5, 1.5))
        lhs, rhs = eval_graph([lhs_expr, rhs_expr], bindings)
        assert rel_err(lhs, rhs) <= 1e-8, f"seed {seed}"


def test_verify_grad_passes_on_sigmoid_sum(rng):
    x = texpr.vector("x")
    cost = texpr.sum(texpr.sigmoid(x))
    report = texpr.verify_grad([x], [cost], [rng.standard_normal(6)], rel_tol=1e-5)
    assert report.passed
    assert report.n_checked == 6


def test_verify_grad_flags_wrong_rule():
    from texpr.graph import TensorType, apply
    from texpr.ops.base import Op, register_op

    class BrokenTanh(Op):
        name = "broken_tanh_fixture"

        def infer_types(self, input_types):
            return [input_types[0]]

        def perform(self, inputs, output_buffers=None):
            return [np.tanh(inputs[0])]

        def grad(self, inputs, output_grads):
            return [output_grads[0] * 0.5]  # deliberately wrong

        def rop(self, inputs, input_perturbations):
            return [input_perturbations[0]]

    x = texpr.vector("x")
    out = apply(BrokenTanh(), [x])[0]
    report = texpr.verify_grad([x], [out], [np.array([0.3, -0.7])], rel_tol=1e-5)
    assert not report.passed
    assert report.worst_input == 0
    assert report.worst_element is not None
    assert report.max_rel_err > 1e-2


def test_verify_grad_conv_grad_weights(rng):
    x = texpr.tensor4("x")
    w = texpr.tensor4("w")
    out = texpr.conv2d(x, w, stride=(1, 1), pad=(1, 1))
    point = [rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((2, 2, 3, 3))]
    report = texpr.verify_grad([x, w], [out], point, rel_tol=1e-5)
    assert report.passed, str(report)
