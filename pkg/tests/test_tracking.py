import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from borinot import dynamics as D
from borinot.model import allocation_map, load_reference
from borinot.tracking import ActuatorCommand, Tracker, TrackingGains

MODEL = load_reference()
TRACK = Tracker(MODEL)


def random_x(rng, scale=0.3):
    return D.plus(MODEL, D.State.at_rest(MODEL, position=[0, 0, 1]).vector(), rng.normal(size=MODEL.ndx) * scale)


def test_zero_error_is_feed_forward():
    rng = np.random.default_rng(0)
    x = random_x(rng)
    u = np.concatenate([rng.uniform(1, 10, 6), rng.uniform(-2, 2, 2)])
    cmd = TRACK(x, x, u)
    np.testing.assert_allclose(cmd.thrusts, u[:6], atol=1e-12)
    np.testing.assert_array_equal(cmd.torque_ff, u[6:])
    np.testing.assert_array_equal(cmd.q_des, x[7:9])
    np.testing.assert_array_equal(cmd.qd_des, x[15:17])


def test_z_offset_adds_one_newton_equally():
    gains = TrackingGains(kp_pose=[8, 8, 10, 6, 6, 3])
    x_ref = D.State.at_rest(MODEL, position=[0, 0, 1]).vector()
    x_hat = x_ref.copy()
    x_hat[2] -= 0.1
    u = MODEL.hover_control()
    cmd = Tracker(MODEL, gains)(x_hat, x_ref, u)
    delta = cmd.thrusts - u[:6]
    assert delta.sum() == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(delta, 1.0 / 6.0, atol=1e-9)


def test_tilt_error_gives_restoring_torque():
    from borinot.liegroup import Rotation
    x_ref = D.State.at_rest(MODEL).vector()
    x_hat = D.State.at_rest(MODEL, rotation=Rotation.from_rpy(0.1, 0.0, 0.0)).vector()
    cmd = TRACK(x_hat, x_ref, MODEL.hover_control())
    w = allocation_map(MODEL).wrench(cmd.thrusts - MODEL.hover_control()[:6])
    assert w[3] < 0.0
    assert abs(w[2]) < 1e-9


def test_thrusts_clamped_to_limits():
    x_ref = D.State.at_rest(MODEL, position=[0, 0, 1]).vector()
    x_hat = x_ref.copy()
    x_hat[2] += 10.0
    cmd = TRACK(x_hat, x_ref, MODEL.hover_control())
    assert np.all(cmd.thrusts == 0.0)
    x_hat[2] -= 30.0
    cmd = TRACK(x_hat, x_ref, MODEL.hover_control())
    np.testing.assert_allclose(cmd.thrusts, 16.1)


@given(st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_zero_gains_is_identity(seed):
    rng = np.random.default_rng(seed)
    u = np.concatenate([rng.uniform(0, 16.1, 6), rng.uniform(-2.7, 2.7, 2)])
    cmd = Tracker(MODEL, TrackingGains.zero())(random_x(rng), random_x(rng), u)
    np.testing.assert_allclose(cmd.thrusts, u[:6], atol=1e-12)
    np.testing.assert_array_equal(cmd.torque_ff, u[6:])


@given(st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_output_continuous_in_estimate(seed):
    rng = np.random.default_rng(seed)
    x_ref, x_hat = random_x(rng), random_x(rng)
    u = MODEL.hover_control()
    a = TRACK(x_hat, x_ref, u).thrusts
    b = TRACK(D.plus(MODEL, x_hat, rng.normal(size=MODEL.ndx) * 1e-7), x_ref, u).thrusts
    assert np.abs(a - b).max() < 1e-4


@given(st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_thrusts_never_negative(seed):
    rng = np.random.default_rng(seed)
    cmd = TRACK(random_x(rng, 2.0), random_x(rng, 2.0), rng.uniform(0, 16.1, 8))
    assert np.all(cmd.thrusts >= 0.0)


def test_joint_impedance_law():
    cmd = ActuatorCommand(np.zeros(6), np.array([0.1, -0.2]), np.array([0.5, 0.0]), np.zeros(2), 3.0, 0.05)
    tau = cmd.joint_torque(np.array([0.4, 0.1]), np.array([1.0, 0.0]))
    np.testing.assert_allclose(tau, [0.1 + 0.3 - 0.05, -0.2 - 0.3])


def test_negative_gains_rejected():
    with pytest.raises(ValueError):
        TrackingGains(kp_pose=[-1, 0, 0, 0, 0, 0])
    with pytest.raises(ValueError):
        TrackingGains(joint_damping=-1.0)


def test_gains_from_dict():
    g = TrackingGains.from_dict({"joint_stiffness": 5.0})
    assert g.joint_stiffness == 5.0
    np.testing.assert_array_equal(g.kp_pose, [8, 8, 8, 6, 6, 3])
