import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from borinot import dynamics as D
from borinot.costs import (TASK, BasePitch, ControlReg, EEPosition, JointBarrier, NodeCost,
                           StateTracking, base_pitch, default_control_weights, default_state_weights)
from borinot.liegroup import Rotation
from borinot.model import load_reference

MODEL = load_reference()
NJ, NDX, NU = MODEL.n_joints, MODEL.ndx, MODEL.nu


def random_x(rng, scale=1.0):
    return D.plus(MODEL, D.State.at_rest(MODEL).vector(), rng.normal(size=NDX) * scale)


def full_cost(rng):
    x_ref = random_x(rng, 0.5)
    return NodeCost([
        StateTracking(x_ref, default_state_weights(NJ), NJ),
        ControlReg(default_control_weights(6, NJ), u_ref=rng.uniform(0, 5, NU)),
        EEPosition(MODEL, rng.normal(size=3), [30.0, 20.0, 10.0]),
        BasePitch(0.3, 7.0),
        JointBarrier([-0.3, -0.2], [0.4, 0.1], 50.0),
    ], NDX, NU, TASK)


def fd_gradient(cost, x, u, h=1e-6):
    g = np.zeros(NDX + NU)
    for i in range(NDX):
        e = np.zeros(NDX)
        e[i] = h
        g[i] = (cost.eval(D.plus(MODEL, x, e), u) - cost.eval(D.plus(MODEL, x, -e), u)) / (2 * h)
    for j in range(NU):
        e = np.zeros(NU)
        e[j] = h
        g[NDX + j] = (cost.eval(x, u + e) - cost.eval(x, u - e)) / (2 * h)
    return g


def test_zero_at_reference():
    rng = np.random.default_rng(0)
    x_ref = random_x(rng)
    c = NodeCost([StateTracking(x_ref, default_state_weights(NJ), NJ),
                  ControlReg(default_control_weights(6, NJ))], NDX, NU)
    assert c.eval(x_ref, np.zeros(NU)) == pytest.approx(0.0, abs=1e-25)
    g, H = c.quadratic_approx(x_ref, np.zeros(NU))
    np.testing.assert_allclose(g, 0.0, atol=1e-15)


def test_barrier_value_beyond_limit():
    w = 40.0
    b = JointBarrier(MODEL.joint_lower, MODEL.joint_upper, w)
    x = D.State.at_rest(MODEL, q=[MODEL.joint_upper[0] + 0.1, 0.0]).vector()
    assert b.cost(x, None) == pytest.approx(0.5 * w * 0.01, rel=1e-12)
    inside = D.State.at_rest(MODEL, q=[0.5, -0.5]).vector()
    assert b.cost(inside, None) == 0.0


def test_barrier_margin_from_model():
    b = JointBarrier.from_model(MODEL, 10.0)
    np.testing.assert_allclose(b.upper, MODEL.joint_upper - 0.05)
    np.testing.assert_allclose(b.lower, MODEL.joint_lower + 0.05)


def test_eval_matches_straight_line_recomputation():
    rng = np.random.default_rng(1)
    for _ in range(20):
        c = full_cost(rng)
        x, u = random_x(rng), rng.uniform(-3, 10, NU)
        st_, cr, ee, bp, jb = c.terms
        r1 = D.diff(MODEL, st_.x_ref, x)
        r2 = u - cr.u_ref
        r3 = D.frame_position(MODEL, x) - ee.target
        r4 = base_pitch(x) - 0.3
        q = x[7:9]
        r5 = np.maximum(q - jb.upper, 0) + np.minimum(q - jb.lower, 0)
        expected = 0.5 * (r1 @ (st_.weights * r1) + r2 @ (cr.weights * r2) + r3 @ (ee.weights * r3)
                          + 7.0 * r4 ** 2 + 50.0 * r5 @ r5)
        assert c.eval(x, u) == pytest.approx(expected, rel=1e-12)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        c = full_cost(rng)
        x, u = random_x(rng), rng.uniform(-3, 10, NU)
        g, _ = c.quadratic_approx(x, u)
        fd = fd_gradient(c, x, u)
        worst = max(worst, np.abs(g - fd).max() / max(1.0, np.abs(fd).max()))
    assert worst < 1e-5


def test_hessian_psd_and_control_block_exact():
    rng = np.random.default_rng(3)
    c = full_cost(rng)
    _, H = c.quadratic_approx(random_x(rng), rng.uniform(0, 5, NU))
    assert np.linalg.eigvalsh(H).min() > -1e-10
    cr = ControlReg(default_control_weights(6, NJ, 0.3, 0.7))
    _, H = NodeCost([cr], NDX, NU).quadratic_approx(random_x(rng), rng.normal(size=NU))
    np.testing.assert_array_equal(H[NDX:, NDX:], np.diag(cr.weights))


def test_state_tracking_residual_structure():
    rng = np.random.default_rng(4)
    x_ref, x = random_x(rng), random_x(rng)
    r = StateTracking(x_ref, 1.0, NJ).residual(x)
    assert r.shape == (NDX,)
    np.testing.assert_allclose(r[6:], np.concatenate([x[7:9] - x_ref[7:9], x[9:] - x_ref[9:]]))


def test_base_pitch_reads_pitch():
    x = D.State.at_rest(MODEL, rotation=Rotation.from_rpy(0.2, -0.6, 1.0)).vector()
    assert base_pitch(x) == pytest.approx(-0.6, abs=1e-12)


def test_weights_must_be_non_negative():
    with pytest.raises(ValueError):
        ControlReg([-1.0] * NU)
    with pytest.raises(ValueError):
        StateTracking(D.State.at_rest(MODEL).vector(), -1.0, NJ)


def test_task_node_needs_task_term():
    with pytest.raises(ValueError):
        NodeCost([ControlReg(np.ones(NU))], NDX, NU, TASK)


@given(st.floats(0.01, 100.0), st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_non_negative_and_scales_linearly(c, seed):
    rng = np.random.default_rng(seed)
    cost = full_cost(rng)
    x, u = random_x(rng), rng.uniform(-3, 10, NU)
    v = cost.eval(x, u)
    assert v >= 0.0
    assert cost.scaled(c).eval(x, u) == pytest.approx(c * v, rel=1e-12)
