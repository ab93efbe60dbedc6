import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gppi.belief import GaussianBelief, LinearGaussianModel, step
from gppi.config import default_config
from gppi.controller import receding_horizon_run, wrap_angles
from gppi.desirability import (CostSpec, DesirabilityUnderflow, DesirabilityEval, desirability,
                               desirability_gradient, one_step_desirability, optimal_control, validate_pi_assumption)
from gppi.gp import FitOptions, TransitionDataset, fit
from gppi.oracles import double_integrator, fd_gradient, nested_mc_psi, random_gp, riccati_gains


@pytest.fixture(scope="module")
def gp2():
    return random_gp(np.random.default_rng(20))


def cost2(H=3, q=(1.0, 0.5), qf=(0.2, 0.1), lam=0.5, goal=(0.1, -0.2)):
    return CostSpec(np.diag(q), np.eye(1), lam, 0.1, H * 0.1, np.array(goal), np.diag(qf))


def test_cost_spec_validation():
    with pytest.raises(ValueError, match="integer multiple"):
        CostSpec(np.eye(2), np.eye(1), 1.0, 0.1, 0.25, np.zeros(2))
    with pytest.raises(ValueError, match="positive semi-definite"):
        CostSpec(-np.eye(2), np.eye(1), 1.0, 0.1, 0.2, np.zeros(2))
    with pytest.raises(ValueError, match="lam"):
        CostSpec(np.eye(2), np.eye(1), 0.0, 0.1, 0.2, np.zeros(2))
    c = CostSpec(np.eye(2), np.eye(1), 1.0, 0.1, 0.3, np.array([[0, 0], [1, 1]]))
    assert c.steps == 3
    np.testing.assert_array_equal(c.goal_at(7), [1, 1])


def test_one_step_zero_cost_and_delta_at_goal():
    b = GaussianBelief(np.array([0.3, 1.0]), 0.2 * np.eye(2))
    c = CostSpec(np.zeros((2, 2)), np.eye(1), 1.0, 0.1, 0.1, np.zeros(2))
    psi, scale, prec = one_step_desirability(b, c)
    assert psi == 1.0 and scale == 1.0
    np.testing.assert_array_equal(prec, 0)
    c = CostSpec(np.eye(2), np.eye(1), 1.0, 0.1, 0.1, np.array([0.3, 1.0]), np.eye(2))
    assert one_step_desirability(GaussianBelief.delta([0.3, 1.0]), c)[0] == pytest.approx(1.0)


def test_one_step_scalar_monte_carlo():
    c = CostSpec([[1.0]], [[1.0]], 1.0, 0.1, 0.1, [0.0])
    psi, _, _ = one_step_desirability(GaussianBelief([1.0], [[0.1]]), c)
    x = np.random.default_rng(0).normal(1.0, math.sqrt(0.1), 1_000_000)
    mc = np.mean(np.exp(-0.1 * x ** 2))
    assert abs(psi - mc) / mc < 0.005
    # closed form for the scalar case
    a = 2 * 0.1
    assert psi == pytest.approx(math.exp(-0.5 * a / (1 + a * 0.1)) / math.sqrt(1 + a * 0.1), rel=1e-12)


def test_zero_cost_chain_gives_unit_psi_and_zero_gradient(gp2):
    c = cost2(q=(0, 0), qf=(0, 0))
    ev = desirability_gradient(gp2, np.array([0.5, -0.5]), c)
    assert ev.psi == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(ev.grad, 0, atol=1e-14)


def test_horizon_one_equals_one_step_of_propagated_belief(gp2):
    c = cost2(H=1)
    x = np.array([0.4, 0.1])
    b = step(gp2, GaussianBelief.delta(x), np.zeros(1))
    assert desirability(gp2, x, c).psi == pytest.approx(one_step_desirability(b, c)[0], rel=1e-10)


def test_three_step_matches_nested_monte_carlo(gp2):
    c = cost2(lam=0.1)
    x = np.array([0.3, -0.4])
    psi = desirability(gp2, x, c).psi
    mc, se = nested_mc_psi(gp2, x, c, 10_000, np.random.default_rng(1))
    assert abs(psi - mc) / mc < 0.05


@pytest.mark.parametrize("H", [1, 2, 4, 5])
def test_gradient_matches_finite_differences(gp2, H):
    rng = np.random.default_rng(H)
    c = cost2(H=H, goal=rng.uniform(-0.5, 0.5, 2))
    x = rng.uniform(-1, 1, 2)
    ev = desirability_gradient(gp2, x, c)
    g_fd = fd_gradient(lambda z: desirability(gp2, z, c).psi, x)
    assert np.linalg.norm(ev.grad - g_fd) <= 1e-3 * np.linalg.norm(g_fd)


def test_symmetric_setup_has_zero_gradient():
    x = np.linspace(-1.5, 1.5, 21)
    X = np.column_stack([x, np.zeros_like(x)])
    model = fit(TransitionDataset(X, -0.1 * np.sin(x)[:, None], 1, 1), opts=FitOptions(restarts=1, max_iter=60))
    c = CostSpec([[1.0]], [[1.0]], 0.5, 0.1, 0.4, [0.0], [[1.0]])
    ev = desirability_gradient(model, np.array([0.0]), c)
    assert abs(ev.grad[0]) < 1e-6


def test_psi_bounded_and_monotone_in_weight(gp2):
    rng = np.random.default_rng(5)
    for _ in range(5):
        x = rng.uniform(-1, 1, 2)
        q = rng.uniform(0, 1, 2)
        lo = desirability(gp2, x, cost2(q=q)).psi
        hi = desirability(gp2, x, cost2(q=q + rng.uniform(0, 1, 2))).psi
        assert 0 < hi <= lo <= 1


def test_optimal_control_flat_and_ratio_invariant():
    c = cost2()
    G = np.array([[0.0], [1.0]])
    flat = DesirabilityEval(-1.0, np.zeros(2), next_grad_log_psi=np.zeros(2), lam=c.lam)
    np.testing.assert_array_equal(optimal_control(flat, G, c), 0)
    ev = DesirabilityEval(-1.0, np.array([0.3, -0.7]), lam=c.lam)
    u = optimal_control(ev, G, c, wrt="state")
    # scaling Psi and grad Psi by the same factor leaves grad log Psi unchanged
    for k in (1e-3, 7.0):
        scaled = DesirabilityEval(ev.log_psi + math.log(k), ev.grad * k / (ev.psi * k), lam=c.lam)
        np.testing.assert_allclose(optimal_control(scaled, G, c, wrt="state"), u, rtol=1e-12)
    assert u[0] == pytest.approx(c.lam * -0.7)


def test_underflow_raises():
    c = cost2()
    ev = DesirabilityEval(-800.0, np.ones(2), lam=c.lam)
    with pytest.raises(DesirabilityUnderflow, match="underflow"):
        optimal_control(ev, np.ones((2, 1)), c)


def test_first_control_matches_riccati():
    plant, model, cost = double_integrator()
    Ad, Bd = np.eye(2) + model.A * cost.dt, model.B * cost.dt
    K = riccati_gains(Ad, Bd, cost)[0]
    x = np.array([1.0, -0.3])
    u = optimal_control(desirability_gradient(model, x, cost), model.B, cost)
    assert u[0] == pytest.approx(float((-K @ x)[0]), rel=1e-6)


def test_pi_assumption_diagnostic():
    G = np.array([[0.0], [1.0]])
    c = CostSpec(np.eye(2), [[2.0]], 1.0, 0.1, 0.1, np.zeros(2))
    assert validate_pi_assumption(c, [[0.5]], G, G).passed
    bad = CostSpec(np.eye(2), [[4.0]], 1.0, 0.1, 0.1, np.zeros(2))
    d = validate_pi_assumption(bad, [[0.5]], G, G)
    assert not d.passed and d.residual == pytest.approx(2.0)
    # noise outside the actuated channel
    d = validate_pi_assumption(c, np.eye(2), G, np.eye(2))
    assert not d.passed


def test_default_cartpole_config_satisfies_pi_assumption():
    cfg = default_config()
    plant, cost = cfg.build_plant(), cfg.build_cost()
    x = np.array([0.0, 0.0, 0.3, 0.0])
    assert validate_pi_assumption(cost, plant.noise_cov, plant.G(x), plant.B(x)).passed


def test_zero_cost_run_applies_no_control_and_is_deterministic():
    plant, model, _ = double_integrator(steps=5)
    c = CostSpec(np.zeros((2, 2)), [[1.0]], 1.0, 0.1, 0.5, np.zeros(2))
    ep = receding_horizon_run(plant, model, c, 10, seed=3, x0=np.array([1.0, 0.0]))
    np.testing.assert_array_equal(ep.controls, 0)
    ep2 = receding_horizon_run(plant, model, c, 10, seed=3, x0=np.array([1.0, 0.0]))
    np.testing.assert_array_equal(ep.states, ep2.states)
    # the plant followed the uncontrolled diffusion: position integrates velocity
    np.testing.assert_allclose(np.diff(ep.states[:, 0]), 0.1 * ep.states[:-1, 1], atol=1e-12)


@given(st.floats(-20, 20), st.floats(-4, 4))
def test_wrap_angles_within_pi_of_center(theta, center):
    x = wrap_angles(np.array([0.0, theta]), (1,), np.array([0.0, center]))
    assert center - math.pi - 1e-9 <= x[1] < center + math.pi + 1e-9
    assert math.isclose(math.cos(x[1]), math.cos(theta), abs_tol=1e-9)
