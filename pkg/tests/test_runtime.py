"""Runtime: compilation, execution order, shared state, updates, laziness,
storage reuse, copying."""
import numpy as np
import pytest

import texpr
from texpr.alloc import track_allocations
from texpr.errors import TexprError, TypeMismatch, UnderdeterminedOutputs
from texpr.ops.control import IfElse
from texpr.ops.elemwise import Elemwise


def test_compile_and_call_basic():
    x = texpr.vector("x")
    f = texpr.compile([x], [x + 1.0], preset="none")
    np.testing.assert_array_equal(f([1.0, 2.0])[0], [2.0, 3.0])


def test_single_output_convenience():
    x = texpr.scalar("x")
    f = texpr.compile([x], x * 2.0, preset="none")
    assert float(f(3.0)) == 6.0


def test_compile_from_intermediate_skips_producers(rng):
    x = texpr.vector("x")
    h = texpr.exp(x)  # expensive producer
    y = texpr.sum(h * 2.0)
    f = texpr.compile([h], y, preset="none")
    ops = [getattr(n.op, "kernel", n.op.name) for n in f.order]
    assert "exp" not in ops
    hv = rng.standard_normal(4)
    assert float(f(hv)) == pytest.approx(float(np.sum(hv * 2.0)))


def test_underdetermined_outputs_rejected():
    x = texpr.vector("x")
    y = texpr.vector("y")
    with pytest.raises(UnderdeterminedOutputs):
        texpr.compile([x], [x + y], preset="none")


def test_shared_updates_counter():
    s = texpr.shared(np.array(0.0), name="s")
    f = texpr.compile([], [s], updates=[(s, s + 1.0)], preset="none")
    for _ in range(3):
        f()
    assert float(s.get_value()) == 3.0


def test_two_functions_same_region_coexist(rng):
    x = texpr.vector("x")
    h = texpr.tanh(x)
    f1 = texpr.compile([x], texpr.sum(h), preset="fast_run")
    f2 = texpr.compile([x], texpr.sum(h * h), preset="fast_run")
    point = rng.standard_normal(5)
    assert float(f1(point)) == pytest.approx(float(np.sum(np.tanh(point))))
    assert float(f2(point)) == pytest.approx(float(np.sum(np.tanh(point) ** 2)))


def test_update_pair_type_checked():
    s = texpr.shared(np.zeros(3), name="s")
    bad = texpr.scalar("b")
    with pytest.raises(TypeMismatch):
        texpr.compile([bad], [bad], updates=[(s, bad)], preset="none")


def test_broadcastable_dims_enforced_at_call():
    x = texpr.make_input(texpr.TensorType("float64", (True, False)), "x")
    f = texpr.compile([x], [x * 2.0], preset="none")
    f(np.zeros((1, 4)))
    with pytest.raises(TypeMismatch):
        f(np.zeros((3, 4)))


def test_wrong_dtype_rejected():
    x = texpr.vector("x", dtype="float64")
    f = texpr.compile([x], [x + 1.0], preset="none")
    with pytest.raises(TypeMismatch):
        f(np.array(["a", "b"], dtype=object))


# -- laziness -------------------------------------------------------------------


def _lazy_fixture():
    c = texpr.scalar("c")
    p = texpr.vector("p")
    expensive = texpr.exp(texpr.sqr(p)) * 3.0
    cheap = p + 1.0
    out = texpr.ifelse(c > 0.0, texpr.sum(expensive), texpr.sum(cheap))
    f = texpr.compile([c, p], [out], preset="none")
    branch_roots = {
        True: next(n for n in f.order if getattr(n.op, "kernel", "") == "exp"),
        False: next(n for n in f.order if getattr(n.op, "kernel", "") == "add"),
    }
    return f, branch_roots


def test_ifelse_untaken_branch_never_runs(rng):
    f, roots = _lazy_fixture()
    point = rng.standard_normal(4)
    f(-1.0, point)
    assert f.profile.node_calls.get(roots[True].id, 0) == 0
    assert f.profile.node_calls.get(roots[False].id, 0) == 1
    f(1.0, point)
    assert f.profile.node_calls.get(roots[True].id, 0) == 1


def test_ifelse_randomized_conditions(rng):
    f, roots = _lazy_fixture()
    taken_true = 0
    for i in range(50):
        c = float(rng.standard_normal())
        before = f.profile.node_calls.get(roots[True].id, 0)
        out = f(c, rng.standard_normal(4))
        after = f.profile.node_calls.get(roots[True].id, 0)
        assert (after - before) == (1 if c > 0 else 0)
        taken_true += c > 0
    assert 0 < taken_true < 50  # both branches exercised


def test_ifelse_value_semantics(rng):
    c = texpr.scalar("c")
    a = texpr.vector("a")
    b = texpr.vector("b")
    out = texpr.ifelse(c > 0.0, a * 2.0, b * 3.0)
    f = texpr.compile([c, a, b], [out], preset="none")
    av, bv = rng.standard_normal(3), rng.standard_normal(3)
    np.testing.assert_array_equal(f(1.0, av, bv)[0], av * 2.0)
    np.testing.assert_array_equal(f(-1.0, av, bv)[0], bv * 3.0)


# -- update atomicity --------------------------------------------------------------


def test_failed_call_leaves_shared_untouched():
    s = texpr.shared(np.array(10.0), name="s")
    x = texpr.vector("x")
    y = texpr.log(x)  # will produce NaN to trip the guard
    f = texpr.compile(
        [x],
        [texpr.sum(y)],
        updates=[(s, s + 1.0)],
        preset="none",
        nan_guard=texpr.NanGuardConfig(),
    )
    f(np.array([1.0, 2.0]))
    assert float(s.get_value()) == 11.0
    with pytest.raises(texpr.NanDetected):
        f(np.array([-1.0, 2.0]))
    assert float(s.get_value()) == 11.0  # unchanged by the failed call


def test_midway_injected_failure_keeps_shared(rng):
    s = texpr.shared(np.array(5.0), name="s")
    x = texpr.vector("x")
    f = texpr.compile([x], [texpr.sum(texpr.tanh(x))], updates=[(s, s * 2.0)], preset="none")
    node = next(n for n in f.order if getattr(n.op, "kernel", "") == "tanh")

    def boom(env):
        raise RuntimeError("injected")

    original = f.thunks[node.id]
    f.thunks[node.id] = boom
    with pytest.raises(RuntimeError):
        f(rng.standard_normal(3))
    assert float(s.get_value()) == 5.0
    f.thunks[node.id] = original
    f(rng.standard_normal(3))
    assert float(s.get_value()) == 10.0


# -- storage management --------------------------------------------------------------


def test_allow_gc_equivalence_bit_exact(rng):
    x = texpr.vector("x")
    y = texpr.matrix("y")
    out = texpr.sum(texpr.tanh(texpr.dot(y, x)) * 2.0) + texpr.sum(texpr.exp(x * 0.5))
    f_gc = texpr.compile([x, y], [out], preset="fast_run", allow_gc=True)
    f_keep = texpr.compile([x, y], [out], preset="fast_run", allow_gc=False)
    for _ in range(3):
        xv, yv = rng.standard_normal(4), rng.standard_normal((3, 4))
        a, b = f_gc(xv, yv)[0], f_keep(xv, yv)[0]
        assert np.array_equal(a, b)


def test_allow_gc_false_reuses_buffers_second_call(rng):
    x = texpr.vector("x")
    y = texpr.vector("y")
    out = texpr.tanh(x) + texpr.dot(x, y) * y
    f = texpr.compile([x, y], [out], preset="none", allow_gc=False)
    xv, yv = rng.standard_normal(64), rng.standard_normal(64)
    f(xv, yv)
    with track_allocations() as stats:
        f(xv, yv)
    assert stats.by_tag.get("node_output", [0, 0])[0] == 0
    # and a third call with fresh values stays correct
    xv2, yv2 = rng.standard_normal(64), rng.standard_normal(64)
    np.testing.assert_allclose(
        f(xv2, yv2)[0], np.tanh(xv2) + np.dot(xv2, yv2) * yv2, rtol=1e-15
    )


def test_execution_order_soundness():
    x = texpr.vector("x")
    y = x + 1.0
    z = x * 2.0
    out = y + z
    f = texpr.compile([x], [out], preset="fast_run", exclude=("fuse_elemwise",))
    position = {n.id: i for i, n in enumerate(f.order)}
    for node in f.order:
        for inp in node.inputs:
            if inp.owner is not None:
                assert position[inp.owner.id] < position[node.id]
        for out_idx, in_idx in node.op.destroy_map.items():
            victim = node.inputs[in_idx]
            for other in f.order:
                if other is node:
                    continue
                if victim in other.inputs:
                    assert position[other.id] < position[node.id]


# -- shared variables -----------------------------------------------------------------


def test_set_then_call_sees_new_value():
    s = texpr.shared(np.array([1.0, 2.0]), name="s")
    f = texpr.compile([], texpr.sum(s * 2.0), preset="none")
    assert float(f()) == 6.0
    texpr.set_shared(s, np.array([10.0, 20.0]))
    assert float(f()) == 60.0


def test_shared_shape_change_same_rank_accepted():
    s = texpr.shared(np.zeros(3), name="s")
    f = texpr.compile([], texpr.sum(s), preset="none")
    f()
    s.set_value(np.ones(7))
    assert float(f()) == 7.0


def test_shared_wrong_dtype_rejected():
    s = texpr.shared(np.zeros(3), name="s")
    with pytest.raises(TypeMismatch):
        s.set_value(np.array(["x", "y"], dtype=object))


def test_shared_wrong_rank_rejected():
    s = texpr.shared(np.zeros(3))
    with pytest.raises(TypeMismatch):
        s.set_value(np.zeros((2, 2)))


# -- function copy ----------------------------------------------------------------------


def test_copy_drops_updates():
    s = texpr.shared(np.array(0.0), name="s")
    f = texpr.compile([], [s + 0.5], updates=[(s, s + 1.0)], preset="none")
    g = f.copy(carry_updates=False)
    g()
    assert float(s.get_value()) == 0.0
    f()
    assert float(s.get_value()) == 1.0


def test_copy_shares_rewrite_log():
    x = texpr.vector("x")
    f = texpr.compile([x], [x * x], preset="fast_run")
    count_before = len(f.rewrite_log.records)
    g = f.copy()
    assert g.rewrite_log is f.rewrite_log
    assert len(g.rewrite_log.records) == count_before


def test_copy_swaps_shared_containers(rng):
    train_w = texpr.shared(np.array([1.0, 1.0]), name="w")
    test_w = texpr.shared(np.array([5.0, 5.0]), name="w_test")
    x = texpr.vector("x")
    f = texpr.compile([x], texpr.sum(x * train_w), preset="none")
    g = f.copy(swap={train_w: test_w})
    point = np.array([1.0, 2.0])
    assert float(f(point)) == pytest.approx(3.0)
    assert float(g(point)) == pytest.approx(15.0)
    # counters diverge under simulated updates
    f2 = texpr.compile([], train_w, updates=[(train_w, train_w + 1.0)], preset="none")
    g2 = f2.copy(swap={train_w: test_w})
    f2(), f2(), g2()
    np.testing.assert_array_equal(train_w.get_value(), [3.0, 3.0])
    np.testing.assert_array_equal(test_w.get_value(), [6.0, 6.0])


def test_copy_swap_type_checked():
    a = texpr.shared(np.zeros(3))
    b = texpr.shared(np.zeros((2, 2)))
    x = texpr.vector("x")
    f = texpr.compile([x], texpr.sum(x * a), preset="none")
    with pytest.raises(TypeMismatch):
        f.copy(swap={a: b})


def test_copy_can_share_intermediate_storage(rng):
    x = texpr.vector("x")
    f = texpr.compile([x], [texpr.tanh(x) * 2.0], preset="none", allow_gc=False)
    g = f.copy(share_intermediate_storage=True)
    assert g._keep is f._keep
    point = rng.standard_normal(4)
    np.testing.assert_array_equal(f(point)[0], g(point)[0])


# -- profiling ------------------------------------------------------------------------


def test_profile_conservation(rng):
    x = texpr.matrix("x")
    out = texpr.sum(texpr.tanh(texpr.dot(x, texpr.transpose(x))))
    f = texpr.compile([x], [out], preset="fast_run")
    for _ in range(4):
        f(rng.standard_normal((20, 20)))
    prof = f.profile
    assert prof.call_count == 4
    assert sum(prof.node_time.values()) <= prof.total_time
    for node in f.order:
        assert prof.node_calls.get(node.id, 0) == 4  # non-lazy graph
    report = prof.as_json(f)
    assert report["call_count"] == 4
    assert {"id", "op", "calls", "time", "bytes"} <= set(report["nodes"][0])
    table = prof.as_table(f)
    assert "calls: 4" in table


def test_updates_may_reference_outputs():
    s = texpr.shared(np.array(1.0), name="s")
    doubled = s * 2.0
    f = texpr.compile([], doubled, updates=[(s, doubled)], preset="none")
    assert float(f()) == 2.0
    assert float(s.get_value()) == 2.0
    assert float(f()) == 4.0
