import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from borinot import dynamics as D
from borinot.model import load_reference


@pytest.fixture(scope="module")
def model():
    return load_reference()


@pytest.fixture(scope="module")
def weightless(model):
    return dataclasses.replace(model, gravity=0.0)


def random_state(model, rng, scale=1.0):
    return D.plus(model, D.State.at_rest(model).vector(), rng.normal(size=model.ndx) * scale)


def tumbling_state(model):
    x = D.State.at_rest(model, q=[0.4, -0.7]).vector()
    x[9:] = [0.3, -0.2, 0.1, 1.0, -2.0, 1.5, 3.0, -2.0]
    return x


def test_state_vector_round_trip(model):
    x = random_state(model, np.random.default_rng(0))
    s = D.State.from_vector(x, model.n_joints)
    np.testing.assert_array_equal(s.vector(), x)
    u = np.arange(8.0)
    np.testing.assert_array_equal(D.Control.from_vector(u, 6).vector(), u)


def test_free_fall_com_acceleration(model):
    rng = np.random.default_rng(1)
    for _ in range(10):
        x = random_state(model, rng)
        acc = D.forward_dynamics(model, x, np.zeros(model.nu))
        np.testing.assert_allclose(D.com_acceleration(model, x, acc), [0, 0, -9.81], atol=1e-12)


def test_hover_is_equilibrium(model):
    x = D.State.at_rest(model)
    acc = D.forward_dynamics(model, x, model.hover_control())
    assert np.abs(acc.vector()).max() < 1e-6


def test_matches_jacobian_oracle(model):
    rng = np.random.default_rng(2)
    for _ in range(25):
        x = random_state(model, rng)
        u = rng.uniform(-3, 10, model.nu)
        a = D.forward_dynamics(model, x, u).vector()
        np.testing.assert_allclose(a, oracles.forward_dynamics(model, x, u), atol=1e-8, rtol=0)


def test_mass_matrix_and_bias_match_oracle(model):
    rng = np.random.default_rng(3)
    for _ in range(10):
        x = random_state(model, rng)
        np.testing.assert_allclose(D.mass_matrix(model, x), oracles.mass_matrix(model, x), atol=1e-12)
        np.testing.assert_allclose(D.bias_forces(model, x), oracles.bias(model, x), atol=1e-10)


def test_energy_and_com_match_oracle(model):
    rng = np.random.default_rng(4)
    for _ in range(10):
        x = random_state(model, rng)
        assert D.kinetic_energy(model, x) == pytest.approx(oracles.kinetic_energy(model, x), rel=1e-12)
        np.testing.assert_allclose(D.com_position(model, x), oracles.com(model, x), atol=1e-14)


def test_leg_model_matches_oracle():
    leg = load_reference("borinot_leg")
    rng = np.random.default_rng(5)
    x = random_state(leg, rng)
    u = rng.uniform(0, 5, leg.nu)
    np.testing.assert_allclose(D.forward_dynamics(leg, x, u).vector(),
                               oracles.forward_dynamics(leg, x, u), atol=1e-8)


def test_platform_only_has_no_joints(model):
    p = model.platform_only()
    acc = D.forward_dynamics(p, D.State.at_rest(p), p.hover_control())
    assert np.abs(acc.vector()).max() < 1e-12


ctrl = st.lists(st.floats(-20, 20, allow_nan=False), min_size=8, max_size=8).map(np.array)


@given(ctrl, ctrl, st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_forward_dynamics_is_affine_in_control(u1, u2, seed):
    model = load_reference()
    x = random_state(model, np.random.default_rng(seed))
    f = lambda u: D.forward_dynamics(model, x, u).vector()
    a0 = f(np.zeros(8))
    np.testing.assert_allclose(f(u1 + u2) - a0, (f(u1) - a0) + (f(u2) - a0), atol=1e-9)


def test_integrate_rest_equilibrium_unchanged(model):
    x = D.State.at_rest(model).vector()
    out = D.integrate(model, x, model.hover_control(), 0.02, 4)
    np.testing.assert_allclose(out, x, atol=1e-14)


def test_free_fall_displacement(model):
    x = D.State.at_rest(model)
    out = D.integrate(model, x, D.Control(np.zeros(6), np.zeros(2)), 0.1, 100)
    assert isinstance(out, D.State)
    assert out.pose.translation[2] == pytest.approx(-0.04905, abs=1e-5)


def test_integrate_rejects_bad_step(model):
    with pytest.raises(ValueError):
        D.integrate(model, D.State.at_rest(model), model.hover_control(), 0.0)
    with pytest.raises(ValueError):
        D.integrate(model, D.State.at_rest(model), model.hover_control(), 0.01, 0)


def test_integrate_is_bitwise_deterministic(model):
    x = random_state(model, np.random.default_rng(6))
    u = np.random.default_rng(7).uniform(0, 5, 8)
    a = D.integrate(model, x, u, 0.02, 3)
    b = D.integrate(model, x.copy(), u.copy(), 0.02, 3)
    assert a.tobytes() == b.tobytes()


def test_rollout_properties(model):
    x0 = D.State.at_rest(model).vector()
    assert len(D.rollout(model, x0, [], 0.02)) == 1
    rng = np.random.default_rng(8)
    U = rng.uniform(0, 6, (10, 8))
    xs = D.rollout(model, x0, U, 0.02)
    assert len(xs) == 11
    x = x0
    for k, u in enumerate(U):
        x = D.integrate(model, x, u, 0.02)
        assert x.tobytes() == xs[k + 1].tobytes()


def test_hover_rollout_stationary(model):
    x0 = D.State.at_rest(model).vector()
    xs = D.rollout(model, x0, [model.hover_control()] * 50, 0.02)
    assert np.abs(xs[-1][:3] - x0[:3]).max() < 1e-4


def test_kernel_rollout_matches(model):
    rng = np.random.default_rng(9)
    x0 = random_state(model, rng, 0.3)
    U = rng.uniform(0, 6, (7, 8))
    xs = D.rollout_kernel(D.kernel_args(model), x0, U, np.full(7, 0.02), 2)
    ref = D.rollout(model, x0, U, 0.02, 2)
    np.testing.assert_array_equal(xs, np.array(ref))


def test_tumbling_energy_drift(weightless):
    x = tumbling_state(weightless)
    e0 = D.kinetic_energy(weightless, x)
    out = D.integrate(weightless, x, np.zeros(8), 1.0, 10_000)  # h = 1e-4 s
    assert abs(D.kinetic_energy(weightless, out) - e0) / e0 < 1e-3


def test_tumbling_momentum_conserved(weightless):
    # the scheme is first order in momentum, so use h = 2.5e-7 s
    x = tumbling_state(weightless)
    lin0, ang0 = D.momentum(weightless, x)
    out = D.integrate(weightless, x, np.zeros(8), 1.0, 4_000_000)
    lin, ang = D.momentum(weightless, out)
    assert np.linalg.norm(lin - lin0) / np.linalg.norm(lin0) < 1e-6
    assert np.linalg.norm(ang - ang0) / np.linalg.norm(ang0) < 1e-6


def test_momentum_rate_is_zero_without_forces(weightless):
    rng = np.random.default_rng(10)
    for _ in range(5):
        x = random_state(weightless, rng)
        acc = D.forward_dynamics(weightless, x, np.zeros(8))
        np.testing.assert_allclose(D.com_acceleration(weightless, x, acc), 0.0, atol=1e-12)


@pytest.mark.parametrize("substeps,central", [(1, False), (1, True), (3, False)])
def test_step_derivatives_match_central_differences(model, substeps, central):
    rng = np.random.default_rng(11)
    x = random_state(model, rng, 0.5)
    u = np.concatenate([rng.uniform(1, 8, 6), rng.uniform(-2.7, 2.7, 2)])
    M = D.kernel_args(model)
    xn, Fx, Fu = D.step_derivatives(M, x, u, 0.02, substeps, 1e-7, central)
    # forward differences carry O(eps) truncation on the stiff distal joint
    rtol = 1e-7 if central else 1e-4
    np.testing.assert_array_equal(xn, D.integrate_kernel(M, x, u, 0.02, substeps))
    h = 1e-5
    nj = model.n_joints
    for i in range(model.ndx):
        e = np.zeros(model.ndx)
        e[i] = h
        fp = D.integrate_kernel(M, D.state_plus(x, e, nj), u, 0.02, substeps)
        fm = D.integrate_kernel(M, D.state_plus(x, -e, nj), u, 0.02, substeps)
        col = (D.state_diff(xn, fp, nj) - D.state_diff(xn, fm, nj)) / (2 * h)
        np.testing.assert_allclose(Fx[:, i], col, rtol=rtol, atol=2e-6)
    for j in range(model.nu):
        up, um = u.copy(), u.copy()
        up[j] += h
        um[j] -= h
        col = (D.state_diff(xn, D.integrate_kernel(M, x, up, 0.02, substeps), nj)
               - D.state_diff(xn, D.integrate_kernel(M, x, um, 0.02, substeps), nj)) / (2 * h)
        np.testing.assert_allclose(Fu[:, j], col, rtol=rtol, atol=2e-8)


def test_frame_jacobian_matches_finite_differences(model):
    rng = np.random.default_rng(12)
    x = random_state(model, rng, 0.5)
    J = D.frame_jacobian(model, x)
    h = 1e-6
    for i in range(6 + model.n_joints):
        e = np.zeros(model.ndx)
        e[i] = h
        d = (D.frame_position(model, D.plus(model, x, e)) - D.frame_position(model, D.plus(model, x, -e))) / (2 * h)
        np.testing.assert_allclose(J[:, i], d, atol=1e-8)


def test_frame_velocity_consistent_with_jacobian(model):
    rng = np.random.default_rng(13)
    x = random_state(model, rng)
    nu = x[7 + model.n_joints:]
    np.testing.assert_allclose(D.frame_velocity(model, x), D.frame_jacobian(model, x) @ nu, atol=1e-12)


def test_ee_hangs_below_base_at_zero_configuration(model):
    p = D.frame_position(model, D.State.at_rest(model))
    # joint1 0.03 m below the base, two 0.16 m links
    np.testing.assert_allclose(p, [0, 0, -0.35], atol=1e-12)
