import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gppi.belief import (GaussianBelief, LinearGaussianModel, PropagationError, exact_moments, psd_repair,
                         rollout, sensitivities, sensitivities_fd, step)
from gppi.gp import FitOptions, TransitionDataset, fit, predict, predict_point
from gppi.oracles import random_gp


@pytest.fixture(scope="module")
def gp2():
    return random_gp(np.random.default_rng(10))


@pytest.fixture(scope="module")
def identity_gp():
    rng = np.random.default_rng(11)
    X = rng.uniform(-2, 2, (30, 3))
    return fit(TransitionDataset(X, np.zeros((30, 2)), 2, 1), opts=FitOptions(restarts=1, max_iter=50))


def linear_model(dt=0.1):
    A = np.array([[0.0, 1.0], [-2.0, -0.3]])
    B = np.array([[0.0], [1.0]])
    return LinearGaussianModel(A, B, dt, np.diag([1e-3, 2e-3])), A, B


def test_belief_repairs_tiny_negative_eigenvalues_and_rejects_large():
    b = GaussianBelief(np.zeros(2), np.diag([1.0, -1e-9]))
    assert np.linalg.eigvalsh(b.cov)[0] >= 0
    with pytest.raises(PropagationError):
        GaussianBelief(np.zeros(2), np.diag([1.0, -1e-3]))
    with pytest.raises(ValueError):
        GaussianBelief(np.zeros(2), np.eye(3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_psd_repair_output_symmetric_psd(seed):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(3, 3))
    S = L @ L.T + rng.normal(0, 1e-10, (3, 3))
    R = psd_repair(S)
    np.testing.assert_allclose(R, R.T, atol=1e-12)
    assert np.linalg.eigvalsh(R)[0] >= -1e-12


def test_delta_input_matches_point_prediction(gp2):
    mu = np.array([0.3, -0.2, 0.5])
    pred = exact_moments(gp2, GaussianBelief.delta(mu))
    m, v = predict_point(gp2, mu)
    np.testing.assert_allclose(pred.d_mean, m, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(np.diag(pred.d_cov), v, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(pred.cross_cov, 0, atol=1e-12)


def test_moment_covariance_psd(gp2):
    rng = np.random.default_rng(0)
    for _ in range(10):
        mu = rng.uniform(-1, 1, 3)
        L = rng.normal(0, 0.4, (3, 3))
        pred = exact_moments(gp2, GaussianBelief(mu, L @ L.T))
        assert np.linalg.eigvalsh(pred.d_cov)[0] >= -1e-10
        assert pred.cross_cov.shape == (3, 2)


def test_moments_match_monte_carlo(gp2):
    rng = np.random.default_rng(1)
    mu = np.array([0.2, 0.4, -0.3])
    V = 0.05 * np.eye(3)
    pred = exact_moments(gp2, GaussianBelief(mu, V))
    Z = rng.multivariate_normal(mu, V, 50_000)
    mean, var = predict(gp2, Z)
    mc_S = np.cov(mean.T) + np.diag(var.mean(0))
    assert np.linalg.norm(pred.d_mean - mean.mean(0)) / np.linalg.norm(mean.mean(0)) < 0.05
    assert np.linalg.norm(pred.d_cov - mc_S) / np.linalg.norm(mc_S) < 0.05
    mc_C = ((Z - mu).T @ (mean - mean.mean(0))) / len(Z)
    assert np.linalg.norm(pred.cross_cov - mc_C) / np.linalg.norm(mc_C) < 0.1


def test_identity_dynamics_leaves_belief_nearly_unchanged(identity_gp):
    b = GaussianBelief(np.array([0.1, -0.3]), 0.01 * np.eye(2))
    nb = step(identity_gp, b, np.array([0.2]), dt=0.1)
    noise = np.max(identity_gp.raw_noise_var)
    np.testing.assert_allclose(nb.mean, b.mean, atol=1e-6)
    assert np.max(np.abs(nb.cov - b.cov)) <= 10 * noise + 1e-6
    assert nb.t == pytest.approx(0.1)


def test_linear_model_step_matches_closed_form():
    model, A, B = linear_model()
    dt = model.dt
    Ad, Bd = np.eye(2) + A * dt, B * dt
    b = GaussianBelief(np.array([1.0, -0.5]), np.array([[0.2, 0.05], [0.05, 0.1]]))
    u = np.array([0.7])
    nb = step(model, b, u)
    np.testing.assert_allclose(nb.mean, Ad @ b.mean + Bd @ u, atol=1e-12)
    np.testing.assert_allclose(nb.cov, Ad @ b.cov @ Ad.T + model.noise, atol=1e-12)
    S = sensitivities(model, b, u)
    np.testing.assert_allclose(S.dmu_dmu, Ad, atol=1e-12)


def test_two_steps_equal_rollout(gp2):
    b = GaussianBelief(np.array([0.1, 0.2]), 0.02 * np.eye(2))
    u = np.zeros(1)
    two = step(gp2, step(gp2, b, u), u)
    r = rollout(gp2, b, [u, u])
    np.testing.assert_array_equal(two.mean, r[-1].mean)
    np.testing.assert_array_equal(two.cov, r[-1].cov)
    assert len(r) == 3


def test_identity_model_sensitivity_is_identity(identity_gp):
    S = sensitivities(identity_gp, GaussianBelief(np.array([0.2, 0.1]), 0.01 * np.eye(2)), np.zeros(1))
    np.testing.assert_allclose(S.dmu_dmu, np.eye(2), atol=1e-6)


@pytest.mark.parametrize("seed", range(4))
def test_sensitivities_match_finite_differences(gp2, seed):
    rng = np.random.default_rng(seed)
    L = rng.normal(0, 0.3, (2, 2))
    b = GaussianBelief(rng.uniform(-1, 1, 2), L @ L.T + 0.01 * np.eye(2))
    u = rng.normal(0, 1, 1)
    an = sensitivities(gp2, b, u)
    fd = sensitivities_fd(gp2, b, u, eps=1e-5)
    for name in ("dmu_dmu", "dmu_dS", "dS_dmu", "dS_dS", "dA_dmu", "dA_dS"):
        a, f = getattr(an, name), getattr(fd, name)
        assert np.linalg.norm(a - f) <= 1e-3 * max(np.linalg.norm(f), 1e-8), name


def _compose(model, b, controls):
    """Chain the one-step Jacobians over a rollout: d(mu_k, S_k)/d mu_0."""
    n = b.mean.size
    Jm = np.eye(n)
    JS = np.zeros((n, n, n))
    cur = b
    for u in controls:
        s = sensitivities(model, cur, u)
        Jm_new = s.dmu_dmu @ Jm + np.einsum("akl,klj->aj", s.dmu_dS, JS)
        JS_new = np.einsum("abk,kj->abj", s.dS_dmu, Jm) + np.einsum("abkl,klj->abj", s.dS_dS, JS)
        Jm, JS = Jm_new, JS_new
        cur = step(model, cur, u)
    return Jm, JS


@pytest.mark.parametrize("k", [1, 3, 5])
def test_chain_sensitivities_match_rollout_differences(gp2, k):
    rng = np.random.default_rng(k)
    b = GaussianBelief(rng.uniform(-0.5, 0.5, 2), 0.01 * np.eye(2))
    controls = [rng.normal(0, 0.5, 1) for _ in range(k)]
    Jm, JS = _compose(gp2, b, controls)
    eps = 1e-5
    for i in range(2):
        e = np.zeros(2)
        e[i] = eps
        p = rollout(gp2, GaussianBelief(b.mean + e, b.cov), controls)[-1]
        q = rollout(gp2, GaussianBelief(b.mean - e, b.cov), controls)[-1]
        fm = (p.mean - q.mean) / (2 * eps)
        fS = (p.cov - q.cov) / (2 * eps)
        assert np.linalg.norm(Jm[:, i] - fm) <= 1e-2 * np.linalg.norm(fm)
        assert np.linalg.norm(JS[:, :, i] - fS) <= 1e-2 * max(np.linalg.norm(fS), 1e-6)


def test_rollout_beliefs_stay_psd(gp2):
    rng = np.random.default_rng(3)
    beliefs = rollout(gp2, GaussianBelief(np.zeros(2), 0.05 * np.eye(2)), rng.normal(0, 1, (15, 1)))
    for b in beliefs:
        np.testing.assert_allclose(b.cov, b.cov.T, atol=1e-10)
        assert np.linalg.eigvalsh(b.cov)[0] >= -1e-8
