import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from gppi.plants import (IntegrationError, PlantSpec, cart_double_pendulum, cartpole, collect_rollouts, em_step,
                         em_step_batch, linear_plant, plant_from_params, simulate)


def passive_energy_drift(plant, x0, duration, dt):
    X = np.array(x0, dtype=float)
    rng = np.random.default_rng(0)
    e0 = plant.energy(X)
    for _ in range(int(round(duration / dt))):
        X, _, _ = em_step(plant, X, np.zeros(plant.m), dt, rng)
    return abs(plant.energy(X) - e0)


def test_em_step_no_dynamics_and_pure_drift():
    still = linear_plant(np.zeros((2, 2)), np.eye(2), noise_cov=np.zeros((2, 2)))
    x = np.array([0.3, -1.0])
    xn, dx, _ = em_step(still, x, np.zeros(2), 0.1, np.random.default_rng(0))
    np.testing.assert_array_equal(xn, x)
    drift = PlantSpec("drift", 1, 1, lambda x: np.ones_like(x), lambda x: np.zeros(x.shape + (1,)),
                      lambda x: np.zeros(x.shape + (1,)), [[0.0]])
    _, dx, _ = em_step(drift, np.array([2.0]), np.zeros(1), 0.1, np.random.default_rng(0))
    assert dx[0] == pytest.approx(0.1)


def test_em_noise_scaling():
    plant = cartpole(noise_std=0.7)
    x = np.array([0.1, 0.2, 1.0, -0.5])
    K = 100_000
    dt = 0.05
    rng = np.random.default_rng(1)
    dW = rng.multivariate_normal(np.zeros(plant.p), plant.noise_cov, K)
    X = np.tile(x, (K, 1))
    _, dx = em_step_batch(plant, X, np.zeros((K, 1)), dt, dW)
    B = plant.B(x)
    expect = B @ plant.noise_cov @ B.T * dt
    emp = np.cov(dx.T)
    act = np.abs(expect) > 1e-12
    np.testing.assert_allclose(emp[act], expect[act], rtol=0.03)
    assert np.max(np.abs(emp[~act])) < 1e-12


def test_em_step_matches_batch():
    plant = cart_double_pendulum(noise_std=0.3)
    rng = np.random.default_rng(2)
    x = rng.normal(size=6)
    xn, dx, dw = em_step(plant, x, np.array([0.4]), 0.05, np.random.default_rng(3))
    Xn, dX = em_step_batch(plant, x[None], np.array([[0.4]]), 0.05, dw[None])
    np.testing.assert_allclose(Xn[0], xn, rtol=1e-12)


def test_non_finite_drift_raises():
    bad = PlantSpec("bad", 1, 1, lambda x: np.full_like(x, np.nan), lambda x: np.zeros(x.shape + (1,)),
                    lambda x: np.zeros(x.shape + (1,)), [[0.0]])
    with pytest.raises(IntegrationError, match="state"):
        em_step(bad, np.zeros(1), np.zeros(1), 0.1, np.random.default_rng(0))


def test_cartpole_dimensions_and_equilibrium():
    p = cartpole(noise_std=0.0)
    assert (p.n, p.m) == (4, 1)
    np.testing.assert_allclose(p.f(np.array([0.3, 0.0, math.pi, 0.0])), 0, atol=1e-10)
    np.testing.assert_allclose(p.f(np.zeros(4)), 0, atol=1e-10)
    # noise enters through the force channel
    x = np.array([0.0, 0.5, 1.0, 0.2])
    np.testing.assert_allclose(p.B(x), p.G(x))
    with pytest.raises(ValueError):
        cartpole(pole_length=-1.0)


def test_cdip_dimensions_and_equilibrium():
    p = cart_double_pendulum(noise_std=0.0)
    assert (p.n, p.m) == (6, 1)
    np.testing.assert_allclose(p.f(np.array([0.1, 0, math.pi, 0, math.pi, 0])), 0, atol=1e-10)
    np.testing.assert_allclose(p.f(np.zeros(6)), 0, atol=1e-10)


@pytest.mark.parametrize("plant,x0", [
    (cartpole(noise_std=0.0), [0.0, 0.0, 0.8, 0.0]),
    (cart_double_pendulum(noise_std=0.0), [0.0, 0.0, 0.6, 0.0, 0.3, 0.0]),
])
def test_passive_energy_drift_first_order(plant, x0):
    drifts = [passive_energy_drift(plant, x0, 0.2, dt) for dt in (1e-2, 1e-3, 1e-4)]
    assert drifts[0] > drifts[1] > drifts[2]
    for a, b in zip(drifts, drifts[1:]):
        assert 5 < a / b < 20


def test_linear_plant_pure_integrator():
    p = linear_plant(np.zeros((2, 2)), np.eye(2), noise_cov=np.zeros((2, 2)))
    ep = simulate(p, np.zeros(2), np.array([[1.0, 2.0]] * 10), 0.1, np.random.default_rng(0))
    np.testing.assert_allclose(ep.final_state, [1.0, 2.0], rtol=1e-12)


def test_double_integrator_impulse_response():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    p = linear_plant(A, [[0.0], [1.0]], noise_cov=[[0.0]])
    dt, T = 0.1, 30
    u = np.zeros((T, 1))
    u[0] = 5.0
    ep = simulate(p, np.zeros(2), u, dt, np.random.default_rng(0))
    # Euler: v jumps to u0 dt after the first step, position then grows linearly
    v = 5.0 * dt
    k = np.arange(T + 1)
    np.testing.assert_allclose(ep.states[1:, 1], v, atol=1e-8)
    np.testing.assert_allclose(ep.states[:, 0], np.maximum(k - 1, 0) * v * dt, atol=1e-8)


def test_discretization_matches_matrix_exponential_to_second_order():
    A = np.array([[0.0, 1.0], [-3.0, -0.4]])
    errs = []
    for dt in (0.02, 0.01):
        ev_euler = np.sort_complex(np.linalg.eigvals(np.eye(2) + A * dt))
        ev_exact = np.sort_complex(np.linalg.eigvals(expm(A * dt)))
        errs.append(np.max(np.abs(ev_euler - ev_exact)))
    assert 3.0 < errs[0] / errs[1] < 5.0


def test_collect_rollouts_counts_and_determinism():
    p = cartpole(noise_std=0.2)
    d1, eps = collect_rollouts(p, "random", 3, 10, seed=5, u_std=2.0)
    d2, _ = collect_rollouts(p, "random", 3, 10, seed=5, u_std=2.0)
    assert len(d1) == 30 and len(eps) == 3
    np.testing.assert_array_equal(d1.inputs, d2.inputs)
    np.testing.assert_array_equal(d1.outputs, d2.outputs)
    for ep in eps:
        np.testing.assert_array_equal(ep.transitions, np.diff(ep.states, axis=0))
    with pytest.raises(ValueError):
        collect_rollouts(p, "zero", 0, 10, seed=0)


def test_schedule_policy_and_zero_policy_spread():
    p = cartpole(noise_std=0.5)
    sched = np.linspace(-1, 1, 8)[:, None]
    d, eps = collect_rollouts(p, sched, 2, 8, seed=0)
    np.testing.assert_array_equal(eps[0].controls, sched)
    _, eps = collect_rollouts(p, "zero", 100, 20, seed=1)
    assert np.var([ep.final_state[2] for ep in eps]) > 0


def test_plant_from_params():
    assert plant_from_params("cartpole", {"noise_std": 0.1}).n == 4
    assert plant_from_params("cdip", {}).n == 6
    with pytest.raises(ValueError):
        plant_from_params("quadrotor", {})


def test_episode_csv(tmp_path):
    p = cartpole(noise_std=0.1)
    ep = simulate(p, np.zeros(4), np.zeros((5, 1)), 0.05, np.random.default_rng(0))
    ep.to_csv(tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0].split(",") == ["t", "x_1", "x_2", "x_3", "x_4", "u_1", "cost", "psi"]
    assert len(lines) == 7


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-6, 6), st.floats(0, 2 * math.pi), st.floats(-6, 6), st.floats(-10, 10))
def test_cartpole_drift_finite_on_state_box(x, v, th, w, u):
    p = cartpole(noise_std=0.2)
    s = np.array([x, v, th, w])
    out = p.f(s) + p.G(s) @ np.array([u])
    assert np.all(np.isfinite(out))
    # the batch form agrees with the single-state form
    np.testing.assert_allclose(p.f(s[None])[0], p.f(s), rtol=1e-12, atol=1e-12)
