"""Loops: forward semantics, BPTT gradients, forward-mode, and the
loop-specific rewrites, all checked against explicitly unrolled graphs."""
import numpy as np
import pytest

import texpr
from texpr import FunctionGraph, run_preset
from texpr.alloc import track_allocations
from texpr.errors import LengthMismatch, MissingNonSequence, TypeMismatch
from texpr.interp import eval_graph
from texpr.scan import LAST, ScanOp, scan
from texpr.testing import random_loop

from helpers import rel_err, unroll


def test_cumulative_sum():
    xs = texpr.vector("xs")
    s0 = texpr.scalar("s0")
    (hist,), (final,) = scan(lambda x, s: s + x, sequences=[xs], initial_states=[s0])
    h, f = eval_graph([hist, final], {xs: np.array([1.0, 2.0, 3.0]), s0: np.array(0.0)})
    np.testing.assert_array_equal(h, [1.0, 3.0, 6.0])
    assert float(f) == 6.0


def test_zero_steps_returns_initial_state():
    s0 = texpr.vector("s0")
    (hist,), (final,) = scan(lambda s: s * 2.0, initial_states=[s0], n_steps=0)
    h, f = eval_graph([hist, final], {s0: np.array([7.0, 8.0])})
    assert h.shape == (0, 2)
    np.testing.assert_array_equal(f, [7.0, 8.0])


def test_sequences_length_mismatch():
    a, b = texpr.vector("a"), texpr.vector("b")
    (h,), _ = scan(lambda x, y, s: s + x * y, sequences=[a, b],
                   initial_states=[texpr.as_variable(0.0)])
    with pytest.raises(LengthMismatch):
        eval_graph([h], {a: np.arange(3.0), b: np.arange(4.0)})


def test_n_steps_disagreeing_with_sequences():
    a = texpr.vector("a")
    n = texpr.make_input(texpr.tensor_type("int64", 0), "n")
    (h,), _ = scan(
        lambda x, s: s + x,
        sequences=[a],
        initial_states=[texpr.as_variable(0.0)],
        n_steps=n,
    )
    with pytest.raises(LengthMismatch):
        eval_graph([h], {a: np.arange(3.0), n: np.array(5, dtype=np.int64)})


def test_loop_without_sequences_needs_n_steps():
    s0 = texpr.scalar("s0")
    with pytest.raises(LengthMismatch):
        scan(lambda s: s + 1.0, initial_states=[s0])


def test_strict_mode_rejects_capture():
    w = texpr.shared(np.array(2.0), name="w")
    xs = texpr.vector("xs")
    with pytest.raises(MissingNonSequence):
        scan(
            lambda x, s: s + x * w,
            sequences=[xs],
            initial_states=[texpr.as_variable(0.0)],
            strict=True,
        )


def test_nonstrict_captures_become_invariants():
    w = texpr.shared(np.array(2.0), name="w")
    xs = texpr.vector("xs")
    (hist,), _ = scan(
        lambda x, s: s + x * w,
        sequences=[xs],
        initial_states=[texpr.as_variable(0.0)],
    )
    node = hist.owner
    assert isinstance(node.op, ScanOp)
    assert w in node.inputs  # appended as an invariant
    f = texpr.compile([xs], [hist], preset="none")
    np.testing.assert_allclose(f(np.array([1.0, 2.0]))[0], [2.0, 6.0])


def test_bad_state_type_rejected():
    s0 = texpr.scalar("s0")
    with pytest.raises(TypeMismatch):
        # next state is a vector, carried state a scalar
        scan(lambda s: texpr.fill(texpr.as_variable(np.zeros(3)), s) + 1.0,
             initial_states=[s0], n_steps=2)


def _rnn_pieces():
    xs = texpr.matrix("xs")
    h0 = texpr.vector("h0")
    w = texpr.matrix("w")
    u = texpr.matrix("u")

    def step(x_t, h_prev, w_, u_):
        return texpr.tanh(texpr.dot(w_, h_prev) + texpr.dot(u_, x_t))

    return step, xs, h0, w, u


def _rnn_point(rng, length=5, size=3):
    return {
        "xs": rng.standard_normal((length, size)) * 0.5,
        "h0": rng.standard_normal(size) * 0.5,
        "w": rng.standard_normal((size, size)) * 0.4,
        "u": rng.standard_normal((size, size)) * 0.4,
    }


def test_rnn_matches_unrolled(rng):
    step, xs, h0, w, u = _rnn_pieces()
    (hist,), (final,) = scan(step, sequences=[xs], initial_states=[h0],
                             non_sequences=[w, u])
    (uhist,), ustates = unroll(step, [xs], [h0], [w, u], length=5)
    pt = _rnn_point(rng)
    bindings = {xs: pt["xs"], h0: pt["h0"], w: pt["w"], u: pt["u"]}
    got_h, got_f = eval_graph([hist, final], bindings)
    want_h, want_f = eval_graph([uhist, ustates[0]], bindings)
    assert rel_err(got_h, want_h) <= 1e-12
    assert rel_err(got_f, want_f) <= 1e-12


def test_rnn_gradients_match_unrolled(rng):
    step, xs, h0, w, u = _rnn_pieces()
    _, (final,) = scan(step, sequences=[xs], initial_states=[h0], non_sequences=[w, u])
    _, ustates = unroll(step, [xs], [h0], [w, u], length=5)
    cost = texpr.sum(texpr.sqr(final))
    ucost = texpr.sum(texpr.sqr(ustates[0]))
    wrt = [xs, h0, w, u]
    grads = texpr.grad(cost, wrt)
    ugrads = texpr.grad(ucost, wrt)
    pt = _rnn_point(rng)
    bindings = {xs: pt["xs"], h0: pt["h0"], w: pt["w"], u: pt["u"]}
    got = eval_graph(grads, bindings)
    want = eval_graph(ugrads, bindings)
    for g, wv, name in zip(got, want, "xs h0 w u".split()):
        assert rel_err(g, wv) <= 1e-10, name


def test_final_cumsum_gradient_is_ones(rng):
    xs = texpr.vector("xs")
    s0 = texpr.scalar("s0")
    _, (final,) = scan(lambda x, s: s + x, sequences=[xs], initial_states=[s0])
    g = texpr.grad(final, xs)
    (gv,) = eval_graph([g], {xs: rng.standard_normal(6), s0: np.array(0.0)})
    np.testing.assert_array_equal(gv, np.ones(6))


def test_invariant_gradient_sums_per_step_and_matches_fd(rng):
    xs = texpr.vector("xs")
    w = texpr.scalar("w")
    _, (final,) = scan(
        lambda x, s, w_: s + texpr.tanh(x * w_),
        sequences=[xs],
        initial_states=[texpr.as_variable(0.0)],
        non_sequences=[w],
    )
    point = [rng.standard_normal(5), np.array(0.7)]
    report = texpr.verify_grad([xs, w], [final], point, rel_tol=1e-5)
    assert report.passed, str(report)


def test_rop_cumsum_is_cumsum_of_direction(rng):
    xs = texpr.vector("xs")
    s0 = texpr.scalar("s0")
    (hist,), _ = scan(lambda x, s: s + x, sequences=[xs], initial_states=[s0])
    v = texpr.vector("v")
    v0 = texpr.scalar("v0")
    r = texpr.rop([hist], [xs, s0], [v, v0])[0]
    direction = rng.standard_normal(4)
    (rv,) = eval_graph(
        [r],
        {xs: rng.standard_normal(4), s0: np.array(0.0), v: direction, v0: np.array(0.0)},
    )
    np.testing.assert_allclose(rv, np.cumsum(direction), rtol=1e-12)


def test_rnn_rop_matches_unrolled(rng):
    step, xs, h0, w, u = _rnn_pieces()
    _, (final,) = scan(step, sequences=[xs], initial_states=[h0], non_sequences=[w, u])
    _, ustates = unroll(step, [xs], [h0], [w, u], length=3)
    dirs = [texpr.matrix("dxs"), texpr.vector("dh0"), texpr.matrix("dw"), texpr.matrix("du")]
    r = texpr.rop([final], [xs, h0, w, u], dirs)[0]
    ur = texpr.rop([ustates[0]], [xs, h0, w, u], dirs)[0]
    pt = _rnn_point(rng, length=3)
    bindings = {xs: pt["xs"], h0: pt["h0"], w: pt["w"], u: pt["u"]}
    bindings.update(
        {
            dirs[0]: rng.standard_normal(pt["xs"].shape),
            dirs[1]: rng.standard_normal(pt["h0"].shape),
            dirs[2]: rng.standard_normal(pt["w"].shape),
            dirs[3]: rng.standard_normal(pt["u"].shape),
        }
    )
    got, want = eval_graph([r, ur], bindings)
    assert rel_err(got, want) <= 1e-10


def test_loop_grad_rop_duality(rng):
    xs = texpr.vector("xs")
    w = texpr.scalar("w")
    _, (final,) = scan(
        lambda x, s, w_: texpr.tanh(s * w_ + x),
        sequences=[xs],
        initial_states=[texpr.as_variable(0.1)],
        non_sequences=[w],
    )
    u_xs, u_w = texpr.vector("u_xs"), texpr.scalar("u_w")
    jv = texpr.rop([final], [xs, w], [u_xs, u_w])[0]
    wv = texpr.scalar("wv")
    lhs = wv * jv
    lops = texpr.grad(wv * final, [xs, w], disconnected="zero")
    rhs = texpr.sum(lops[0] * u_xs) + lops[1] * u_w
    bindings = {
        xs: rng.standard_normal(5) * 0.5,
        w: np.array(0.8),
        u_xs: rng.standard_normal(5),
        u_w: np.array(0.3),
        wv: np.array(1.7),
    }
    a, b = eval_graph([lhs, rhs], bindings)
    assert rel_err(a, b) <= 1e-8


# -- master property: unrolling equivalence ------------------------------------


@pytest.mark.parametrize("seed", range(6))
def test_unrolling_equivalence_random_loops(seed):
    rng = np.random.default_rng(seed + 40)
    inputs, per_step, finals, make_point = random_loop(rng)
    seq, init, inv = inputs
    for length in (0, 1, 3, 5):
        point = make_point(length)
        bindings = dict(zip(inputs, point))
        got = eval_graph(list(per_step) + list(finals), bindings)
        if length == 0:
            assert got[0].shape[0] == 0
            assert rel_err(got[len(per_step)], point[1]) == 0.0
            continue
        # forward oracle: plain python loop over the step arrays
        state = point[1]
        for t in range(length):
            state = eval_graph(
                [finals[0]],
                {seq: point[0][t : t + 1], init: state, inv: point[2]},
            )[0]
        assert rel_err(got[len(per_step)], state) <= 1e-10


@pytest.mark.parametrize("seed", range(4))
def test_unrolled_grad_equivalence_random_loops(seed):
    rng = np.random.default_rng(seed + 90)
    length = int(rng.integers(1, 6))
    xs = texpr.vector("xs")
    h0 = texpr.scalar("h0")
    w = texpr.scalar("w")

    def step(x, s, w_):
        return texpr.tanh(s * w_ + x) + texpr.sigmoid(x * s)

    (hist,), (final,) = scan(step, sequences=[xs], initial_states=[h0],
                             non_sequences=[w])
    (uhist,), ustates = unroll(step, [xs], [h0], [w], length=length)
    cost = texpr.sum(hist * hist) + final
    ucost = texpr.sum(uhist * uhist) + ustates[0]
    grads = texpr.grad(cost, [xs, h0, w])
    ugrads = texpr.grad(ucost, [xs, h0, w])
    bindings = {
        xs: rng.standard_normal(length) * 0.6,
        h0: np.array(rng.standard_normal() * 0.3),
        w: np.array(0.7),
    }
    got = eval_graph(grads, bindings)
    want = eval_graph(ugrads, bindings)
    for g, wv in zip(got, want):
        assert rel_err(g, wv) <= 1e-10


def test_nested_loop_forward_and_grad(rng):
    # outer loop accumulates the final state of an inner loop each step
    xs = texpr.vector("xs")
    a0 = texpr.scalar("a0")

    def inner_step(s, x):
        return texpr.tanh(s + x)

    def outer_step(x_t, acc):
        _, (inner_final,) = scan(
            inner_step, initial_states=[acc], non_sequences=[x_t], n_steps=3
        )
        return acc * 0.5 + inner_final

    (hist,), (final,) = scan(outer_step, sequences=[xs], initial_states=[a0])

    def inner_oracle(s, x):
        for _ in range(3):
            s = np.tanh(s + x)
        return s

    length = 4
    xv = rng.standard_normal(length) * 0.5
    a = 0.2
    expect = []
    acc = a
    for t in range(length):
        acc = acc * 0.5 + inner_oracle(acc, xv[t])
        expect.append(acc)
    got_h, got_f = eval_graph([hist, final], {xs: xv, a0: np.array(a)})
    assert rel_err(got_h, np.array(expect)) <= 1e-9
    report = texpr.verify_grad([xs, a0], [final], [xv, np.array(a)], rel_tol=1e-5)
    assert report.passed, str(report)


# -- loop rewrites ----------------------------------------------------------------


def test_pushout_hoists_invariant_computation(rng):
    xs = texpr.vector("xs")
    w = texpr.scalar("w")
    (hist,), _ = scan(
        lambda x, s, w_: s + x * texpr.exp(w_),
        sequences=[xs],
        initial_states=[texpr.as_variable(0.0)],
        non_sequences=[w],
    )
    fg = FunctionGraph([xs, w], [hist])
    scan_node = next(n for n in fg.toposort() if isinstance(n.op, ScanOp))
    inner_before = len(scan_node.op._order)
    _, log = run_preset(fg, "fast_run")
    assert log.count(rewrite="loop_pushout_invariants") == 1
    new_scan = next(n for n in fg.toposort() if isinstance(n.op, ScanOp))
    assert len(new_scan.op._order) < inner_before
    # exp now lives in the outer graph
    outer_ops = [getattr(n.op, "kernel", n.op.name) for n in fg.toposort()]
    assert "exp" in outer_ops or any("composite" in str(o) for o in outer_ops)
    point = {xs: rng.standard_normal(4), w: np.array(0.3)}
    (value,) = eval_graph(fg.outputs, point)
    expected = np.cumsum(point[xs] * np.exp(0.3))
    assert rel_err(value, expected) <= 1e-12


def test_pushout_leaves_sequence_dependent_work():
    xs = texpr.vector("xs")
    (hist,), _ = scan(
        lambda x, s: s + texpr.exp(x),
        sequences=[xs],
        initial_states=[texpr.as_variable(0.0)],
    )
    fg = FunctionGraph([xs], [hist])
    _, log = run_preset(fg, "fast_run")
    assert log.count(rewrite="loop_pushout_invariants") == 0


def test_pushout_preserves_strictness():
    xs = texpr.vector("xs")
    w = texpr.scalar("w")
    (hist,), _ = scan(
        lambda x, s, w_: s + x * texpr.exp(w_),
        sequences=[xs],
        initial_states=[texpr.as_variable(0.0)],
        non_sequences=[w],
        strict=True,
    )
    fg = FunctionGraph([xs, w], [hist])
    run_preset(fg, "fast_run")
    new_scan = next(n for n in fg.toposort() if isinstance(n.op, ScanOp))
    assert new_scan.op.strict  # hoisted value arrives as an explicit invariant


def test_savemem_last_step_only(rng):
    xs = texpr.vector("xs")
    (hist,), _ = scan(
        lambda x, s: s + x, sequences=[xs], initial_states=[texpr.as_variable(0.0)]
    )
    out = hist[-1] * 2.0
    fg = FunctionGraph([xs], [out])
    _, log = run_preset(fg, "fast_run")
    assert log.count(rewrite="loop_last_step_only") == 1
    node = next(n for n in fg.toposort() if isinstance(n.op, ScanOp))
    assert node.op.retention[0] == LAST
    point = rng.standard_normal(10)
    (value,) = eval_graph(fg.outputs, {xs: point})
    assert rel_err(value, 2 * np.sum(point)) <= 1e-12


def test_savemem_constant_memory(rng):
    def peak_bytes(length):
        xs = texpr.vector("xs")
        (hist,), _ = scan(
            lambda x, s: s + x, sequences=[xs], initial_states=[texpr.as_variable(0.0)]
        )
        f = texpr.compile([xs], [hist[-1]], preset="fast_run")
        with track_allocations() as stats:
            f(rng.standard_normal(length))
        return stats.by_tag.get("loop_out_0", [0, 0])[1]

    small, large = peak_bytes(8), peak_bytes(512)
    assert large < 2 * max(small, 1)


def test_savemem_full_retention_when_history_consumed():
    xs = texpr.vector("xs")
    (hist,), _ = scan(
        lambda x, s: s + x, sequences=[xs], initial_states=[texpr.as_variable(0.0)]
    )
    out = texpr.sum(hist)
    fg = FunctionGraph([xs], [out])
    _, log = run_preset(fg, "fast_run")
    node = next(n for n in fg.toposort() if isinstance(n.op, ScanOp))
    assert node.op.retention[0] == "full"


def test_savemem_mixed_consumers_conservative():
    xs = texpr.vector("xs")
    (hist,), _ = scan(
        lambda x, s: s + x, sequences=[xs], initial_states=[texpr.as_variable(0.0)]
    )
    out = hist[-1] + texpr.sum(hist)
    fg = FunctionGraph([xs], [out])
    run_preset(fg, "fast_run")
    node = next(n for n in fg.toposort() if isinstance(n.op, ScanOp))
    assert node.op.retention[0] == "full"


def test_loop_rewrites_preserve_outputs(rng):
    xs = texpr.vector("xs")
    w = texpr.scalar("w")
    (hist,), (final,) = scan(
        lambda x, s, w_: texpr.tanh(s * texpr.sigmoid(w_) + x),
        sequences=[xs],
        initial_states=[texpr.as_variable(0.2)],
        non_sequences=[w],
    )
    out = texpr.sum(hist) + final
    fg = FunctionGraph([xs, w], [out])
    point = {xs: rng.standard_normal(6), w: np.array(0.4)}
    (before,) = eval_graph([out], point)
    run_preset(fg, "fast_run")
    (after,) = eval_graph(fg.outputs, point)
    assert rel_err(before, after) <= 1e-12
