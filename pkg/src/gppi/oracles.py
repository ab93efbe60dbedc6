"""Independent reference computations for the analytic machinery.

Each check returns an :class:`OracleResult` with the measured error and its
tolerance. The references are deliberately brute force: Monte Carlo through
the GP predictive distribution, central finite differences, a Riccati
recursion, and path sampling on the plant.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .baseline import sample_paths
from .belief import GaussianBelief, LinearGaussianModel, exact_moments
from .desirability import CostSpec, desirability, desirability_gradient, one_step_desirability, optimal_control
from .gp import FitOptions, TransitionDataset, fit, predict
from .iterative import ControlSchedule, corrected_path_cost, log_radon_nikodym_weight, phi_recursion
from .plants import linear_plant, simulate


@dataclass
class OracleResult:
    name: str
    error: float
    tol: float
    passed: bool
    seconds: float = 0.0
    detail: str = ""

    def line(self):
        return (f"{'PASS' if self.passed else 'FAIL'} {self.name}: error {self.error:.3e} "
                f"(tol {self.tol:.1e}) {self.detail}").rstrip()

    def to_dict(self):
        return asdict(self)


def _result(name, error, tol, t0, detail=""):
    return OracleResult(name, float(error), tol, bool(error <= tol), time.perf_counter() - t0, detail)


# ---------------------------------------------------------------------------
# instances


def random_gp(rng, n=2, m=1, N=40, dt=0.1, opts: FitOptions | None = None):
    """GP fitted to a smooth random nonlinear system ``dx = dt * (A x + B u + c sin(C x)) + noise``."""
    A = rng.normal(0, 0.5, (n, n))
    B = rng.normal(0, 1.0, (n, m))
    C = rng.normal(0, 1.0, (n, n))
    c = rng.normal(0, 1.0, n)
    X = rng.uniform(-2, 2, (N, n + m))
    x, u = X[:, :n], X[:, n:]
    Y = dt * (x @ A.T + u @ B.T + c * np.sin(x @ C.T)) + rng.normal(0, 0.01, (N, n))
    opts = opts or FitOptions(restarts=1, max_iter=60, seed=int(rng.integers(2 ** 31)))
    return fit(TransitionDataset(X, Y, n, m), opts=opts)


def double_integrator(dt=0.1, lam=1.0, noise_std=1.0, q=(1.0, 0.1), qf=(1.0, 1.0), steps=20):
    """1-D double integrator with R = lam / noise_var, the perfect-GP model and its cost."""
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    Bc = np.array([[0.0], [1.0]])
    plant = linear_plant(A, Bc, noise=Bc, noise_cov=[[noise_std ** 2]])
    model = LinearGaussianModel(A, Bc, dt, Bc @ Bc.T * noise_std ** 2 * dt)
    cost = CostSpec(np.diag(q), [[lam / noise_std ** 2]], lam, dt, steps * dt, np.zeros(2), np.diag(qf))
    return plant, model, cost


def riccati_gains(Ad, Bd, cost: CostSpec):
    """Finite-horizon discrete LQR gains K_t (u_t = -K_t (x_t - g)) for the chain's cost.

    The cost sum_{j=1..H} q(x_j) dt + phi(x_H) + sum_t u_t R u_t dt / 2 is
    0.5 * [sum x^T (2Q dt) x + x_H^T (2Q_f) x_H + sum u^T (R dt) u].
    """
    H = cost.steps
    dt = cost.dt
    P = 2.0 * cost.Q * dt + 2.0 * cost.terminal_weight
    Rd = cost.R * dt
    gains = [None] * H
    for t in range(H - 1, -1, -1):
        K = np.linalg.solve(Rd + Bd.T @ P @ Bd, Bd.T @ P @ Ad)
        gains[t] = K
        P = 2.0 * cost.Q * dt + Ad.T @ P @ (Ad - Bd @ K)
    return gains


# ---------------------------------------------------------------------------
# checks


def check_moment_matching(instances=20, samples=100_000, seed=0, tol=0.05) -> OracleResult:
    """exact_moments vs sampling inputs, then the GP posterior at each input."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        model = random_gp(rng)
        D, n = model.input_dim, model.n_state
        mu = rng.uniform(-1, 1, D)
        V = 0.05 * np.eye(D)
        pred = exact_moments(model, GaussianBelief(mu, V))
        Z = rng.multivariate_normal(mu, V, samples)
        mean, var = predict(model, Z)
        mc_mu = mean.mean(0)
        mc_S = np.cov(mean.T).reshape(n, n) + np.diag(var.mean(0))
        e_mu = np.linalg.norm(pred.d_mean - mc_mu) / np.linalg.norm(mc_mu)
        e_S = np.linalg.norm(pred.d_cov - mc_S) / np.linalg.norm(mc_S)
        worst = max(worst, e_mu, e_S)
    return _result("moment_matching_mc", worst, tol, t0, f"{instances} instances, {samples} samples")


def check_one_step(instances=10, samples=1_000_000, seed=1, tol=0.005) -> OracleResult:
    """Closed-form one-step desirability vs E[exp(-(dt/lam) e^T Q e)] by sampling."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        n = 1 + i % 2
        L = rng.normal(0, 0.4, (n, n))
        S = L @ L.T + 0.05 * np.eye(n)
        M = rng.normal(0, 1, (n, n))
        Q = M @ M.T * 0.5 + 0.1 * np.eye(n)
        mu = rng.normal(0, 1, n)
        g = rng.normal(0, 0.5, n)
        cost = CostSpec(Q, np.eye(1), lam=1.0, dt=0.1, horizon=0.1, goal=g)
        psi, _, _ = one_step_desirability(GaussianBelief(mu, S), cost)
        x = rng.multivariate_normal(mu, S, samples) - g
        mc = np.mean(np.exp(-(cost.dt / cost.lam) * np.einsum("ka,ab,kb->k", x, Q, x)))
        worst = max(worst, abs(psi - mc) / mc)
    return _result("one_step_desirability_mc", worst, tol, t0, f"{instances} instances, {samples} samples")


def nested_mc_psi(model, x0, cost: CostSpec, samples, rng, controls=None):
    """Sample trajectories through the GP predictive chain and average exp(-S/lam)."""
    H = cost.steps
    n = model.n_state
    controls = np.zeros((H, model.n_control)) if controls is None else np.asarray(controls).reshape(H, -1)
    noise_std = np.sqrt(np.diag(model.noise_cov()))
    X = np.tile(np.asarray(x0, dtype=float), (samples, 1))
    S = np.zeros(samples)
    for j in range(H):
        mean, var = predict(model, np.hstack([X, np.broadcast_to(controls[j], (samples, controls.shape[1]))]))
        X = X + mean + np.sqrt(var + noise_std ** 2) * rng.standard_normal((samples, n))
        e = X - cost.goal_at(j + 1)
        S += cost.dt * np.einsum("ka,ab,kb->k", e, cost.Q, e)
    e = X - cost.goal_at(H)
    S += np.einsum("ka,ab,kb->k", e, cost.terminal_weight, e)
    w = np.exp(-S / cost.lam)
    return float(w.mean()), float(w.std() / math.sqrt(samples))


def check_recursion(samples=10_000, seed=2, tol=0.05, instances=3) -> OracleResult:
    """Three-step Psi through the belief chain vs nested Monte Carlo."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        model = random_gp(rng)
        x0 = rng.uniform(-1, 1, 2)
        cost = CostSpec(np.diag([1.0, 0.5]), np.eye(1), lam=0.1, dt=0.1, horizon=0.3,
                        goal=rng.uniform(-0.5, 0.5, 2), terminal_weight=np.diag([0.2, 0.1]))
        psi = desirability(model, x0, cost).psi
        mc, _ = nested_mc_psi(model, x0, cost, samples, rng)
        worst = max(worst, abs(psi - mc) / mc)
    return _result("recursion_nested_mc", worst, tol, t0, f"horizon 3, {samples} paths")


def fd_gradient(f, x, eps=1e-4):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        h = eps * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def check_gradients(instances=20, seed=3, tol=1e-3) -> OracleResult:
    """Analytic grad Psi and grad Phi vs central differences, horizons 1-5."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        model = random_gp(rng, N=30)
        H = 1 + i % 5
        cost = CostSpec(np.diag(rng.uniform(0.2, 1.0, 2)), np.eye(1), lam=0.5, dt=0.1, horizon=H * 0.1,
                        goal=rng.uniform(-0.5, 0.5, 2), terminal_weight=np.diag(rng.uniform(0, 0.5, 2)))
        x0 = rng.uniform(-1, 1, 2)
        ev = desirability_gradient(model, x0, cost)
        g_fd = fd_gradient(lambda x: desirability(model, x, cost).psi, x0)
        worst = max(worst, np.linalg.norm(ev.grad - g_fd) / np.linalg.norm(g_fd))
        sched = ControlSchedule(rng.normal(0, 1, (H, 1)))
        ev = phi_recursion(model, x0, cost, sched)
        g_fd = fd_gradient(lambda x: desirability(model, x, cost, sched.controls).psi, x0)
        worst = max(worst, np.linalg.norm(ev.grad - g_fd) / np.linalg.norm(g_fd))
    return _result("gradient_fd", worst, tol, t0, f"{instances} instances, Psi and Phi")


def check_riccati(steps=20, tol=0.05) -> OracleResult:
    """PI controls along a closed-loop run vs finite-horizon Riccati LQR at each step."""
    t0 = time.perf_counter()
    plant, model, cost = double_integrator(steps=steps)
    Ad = np.eye(2) + model.A * cost.dt
    Bd = model.B * cost.dt
    gains = riccati_gains(Ad, Bd, cost)
    x = np.array([1.0, 0.0])
    worst = 0.0
    for t in range(steps):
        c = cost.with_horizon_steps(steps - t)
        ev = desirability_gradient(model, x, c, t0=t)
        u = optimal_control(ev, model.B, c)
        u_lqr = -gains[t] @ x
        worst = max(worst, float(np.max(np.abs(u - u_lqr) / np.abs(u_lqr))))
        x = Ad @ x + Bd @ u
    return _result("riccati_lqr", worst, tol, t0, f"{steps}-step horizon")


def check_radon_nikodym(paths=100_000, seed=4, tol=0.02) -> OracleResult:
    """E[xi] over controlled paths, plus the exact u = 0 reductions."""
    t0 = time.perf_counter()
    plant, model, cost = double_integrator(steps=10)
    rng = np.random.default_rng(seed)
    sched = ControlSchedule(rng.normal(0, 1, (cost.steps, 1)))
    batch = sample_paths(plant, np.array([1.0, 0.0]), sched, paths, seed, cost)
    err = abs(float(np.mean(np.exp(batch.log_xi))) - 1.0)
    # reductions with the zero schedule
    zero = np.zeros((cost.steps, 1))
    ep = simulate(plant, np.array([1.0, 0.0]), zero, cost.dt, np.random.default_rng(seed), cost)
    red = abs(log_radon_nikodym_weight(ep, plant, cost))
    q = np.array([cost.state_cost(ep.states[j], j) for j in range(cost.steps)])
    red = max(red, float(np.max(np.abs(corrected_path_cost(ep, plant, cost) - q))))
    x0 = np.array([1.0, 0.0])
    phi = phi_recursion(model, x0, cost, ControlSchedule(zero))
    psi = desirability_gradient(model, x0, cost)
    red = max(red, abs(phi.psi - psi.psi), float(np.max(np.abs(phi.grad - psi.grad))))
    ok = err <= tol and red <= 1e-10
    return OracleResult("radon_nikodym_identity", err, tol, ok, time.perf_counter() - t0,
                        f"{paths} paths; u=0 reduction residual {red:.1e}")


CHECKS = {
    "moment_matching_mc": check_moment_matching,
    "one_step_desirability_mc": check_one_step,
    "recursion_nested_mc": check_recursion,
    "gradient_fd": check_gradients,
    "riccati_lqr": check_riccati,
    "radon_nikodym_identity": check_radon_nikodym,
}


def run_all(names=None):
    return [CHECKS[k]() for k in (names or CHECKS)]
