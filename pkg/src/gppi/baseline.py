"""Model-free sampling path-integral control, the reference for sample efficiency.

Paths are simulated on the plant itself under the current schedule. Each path
is scored with the corrected path cost (state cost, control cost and the
control-noise cross term), and the schedule moves by the softmin-weighted
average of the control-space noise

    u_t <- u_t + sum_i w_i eps_{i,t},   w_i ∝ exp(-S_t(tau_i) / lam),

where ``S_t`` is the cost-to-go from step t and ``eps = G^+ B dw / sqrt(dt)``
is the noise expressed as a control. This is the iterative path-integral
update of the sampling literature (the model-based method only cites it).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .controller import wrap_angles
from .desirability import CostSpec
from .iterative import ControlSchedule, control_pinv, path_terms
from .plants import Episode, IntegrationError, PlantSpec, em_step, em_step_batch, running_cost


class TemperatureError(FloatingPointError):
    pass


@dataclass
class SampledPathBatch:
    """``count`` noisy paths from one start state under one schedule.

    ``state_costs[:, j]`` is q at x_{j+1}; ``quad`` and ``cross`` are the
    control terms of the corrected path cost (see :func:`path_terms`).
    """
    dt: float
    lam: float
    states: np.ndarray
    controls: np.ndarray
    noise: np.ndarray
    control_noise: np.ndarray
    state_costs: np.ndarray
    quad: np.ndarray
    cross: np.ndarray
    terminal: np.ndarray

    @property
    def count(self):
        return self.states.shape[0]

    @property
    def horizon(self):
        return self.controls.shape[0]

    @property
    def samples(self):
        """Simulated transitions in the batch."""
        return self.count * self.horizon

    @property
    def step_costs(self):
        return (self.state_costs + 0.5 * self.quad) * self.dt + self.cross

    def cost_to_go(self, t=0):
        return self.step_costs[:, t:].sum(axis=1) + self.terminal

    @property
    def path_costs(self):
        return self.cost_to_go(0)

    @property
    def log_xi(self):
        """Log Radon-Nikodym weight of each path (uncontrolled vs this schedule)."""
        return -(0.5 / self.lam) * np.sum(self.quad * self.dt + 2.0 * self.cross, axis=1)

    def weights(self, t=0, lam=None):
        return softmin(self.cost_to_go(t), self.lam if lam is None else lam)


def softmin(costs, lam):
    """Normalized weights exp(-S/lam), shifted by the smallest finite cost."""
    if not lam > 0:
        raise TemperatureError("temperature must be positive")
    S = np.asarray(costs, dtype=float)
    finite = np.isfinite(S)
    if not np.any(finite):
        raise TemperatureError("no path has a finite cost; increase lam or shorten the horizon")
    z = np.where(finite, -(S - S[finite].min()) / lam, -np.inf)
    w = np.exp(z)
    total = w.sum()
    if not total > 0:
        raise TemperatureError("all path weights underflow; increase lam")
    return w / total


def sample_paths(plant: PlantSpec, x0, schedule, count, seed, cost: CostSpec, wrap=True,
                 t0=0) -> SampledPathBatch:
    """Simulate ``count`` Euler-Maruyama paths from ``x0`` under ``schedule``.

    State costs see the plant's angles wrapped to within pi of the goal when
    ``wrap`` is set; goal rows are read from step ``t0`` on.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    U = schedule.controls if isinstance(schedule, ControlSchedule) else np.atleast_2d(schedule)
    H = U.shape[0]
    dt = cost.dt
    rng = np.random.default_rng(seed)
    K, n, p = count, plant.n, plant.p
    L = np.linalg.cholesky(plant.noise_cov + 1e-300 * np.eye(p)) if np.any(plant.noise_cov) else np.zeros((p, p))
    dW = rng.standard_normal((K, H, p)) @ L.T
    X = np.empty((K, H + 1, n))
    X[:, 0] = x0
    eps = np.empty((K, H, plant.m))
    sq = math.sqrt(dt)
    for j in range(H):
        G = np.asarray(plant.G(X[:, j])).reshape(K, n, plant.m)
        B = np.asarray(plant.B(X[:, j])).reshape(K, n, p)
        eps[:, j] = np.einsum("kmn,kn->km", control_pinv(G), np.einsum("knp,kp->kn", B, dW[:, j])) / sq
        try:
            X[:, j + 1], _ = em_step_batch(plant, X[:, j], np.broadcast_to(U[j], (K, plant.m)), dt, dW[:, j])
        except IntegrationError as e:
            raise IntegrationError(f"step {j}: {e}") from e
    quad, cross = path_terms(X, U, dW, plant, cost.R, dt)
    Xc = X
    if wrap and plant.angle_indices:
        Xc = np.stack([wrap_angles(X[:, j], plant.angle_indices, cost.goal_at(t0 + j)) for j in range(H + 1)], 1)
    qs = np.empty((K, H))
    for j in range(H):
        e = Xc[:, j + 1] - cost.goal_at(t0 + j + 1)
        qs[:, j] = np.einsum("ka,ab,kb->k", e, cost.Q, e)
    e = Xc[:, H] - cost.goal_at(t0 + H)
    term = np.einsum("ka,ab,kb->k", e, cost.terminal_weight, e)
    return SampledPathBatch(dt, cost.lam, X, U.copy(), dW, eps, qs, quad, cross, term)


def control_estimate(batch: SampledPathBatch, lam, t=0):
    """Weighted average of the control-space noise at step ``t``."""
    w = softmin(batch.cost_to_go(t), lam)
    return w @ batch.control_noise[:, t]


def update_schedule(batch: SampledPathBatch, schedule: ControlSchedule, lam=None) -> ControlSchedule:
    lam = batch.lam if lam is None else lam
    U = schedule.controls.copy()
    for t in range(batch.horizon):
        U[t] = U[t] + control_estimate(batch, lam, t)
    return ControlSchedule(U, schedule.k + 1)


def optimize_schedule(plant, x0, cost: CostSpec, paths, iterations, seed, schedule=None, t0=0):
    """Open-loop sampling PI from ``x0``; returns the schedule and samples used."""
    H = cost.steps
    schedule = schedule or ControlSchedule.zeros(H, plant.m)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    streams = root.spawn(iterations)
    used = 0
    for k in range(iterations):
        batch = sample_paths(plant, x0, schedule, paths, streams[k], cost, t0=t0)
        used += batch.samples
        schedule = update_schedule(batch, schedule)
    return schedule, used


@dataclass
class BaselineRun:
    episode: Episode
    samples: int


def receding_baseline_run(plant: PlantSpec, cost: CostSpec, steps, seed, paths=1000, iterations=1, x0=None,
                          wrap=True, u_clip=None) -> BaselineRun:
    """Receding-horizon sampling PI on the plant (warm-started, shifted schedule).

    Every re-plan draws ``iterations`` batches of ``paths`` paths of ``H``
    steps, so the run consumes exactly ``steps * iterations * paths * H``
    simulated transitions.
    """
    root = np.random.SeedSequence(seed)
    plan_ss, plant_ss = root.spawn(2)
    rng = np.random.default_rng(plant_ss)
    plan_streams = plan_ss.spawn(steps)
    H = cost.steps
    n, m = plant.n, plant.m
    X = np.empty((steps + 1, n))
    X[0] = np.zeros(n) if x0 is None else x0
    U = np.empty((steps, m))
    dX = np.empty((steps, n))
    W = np.empty((steps, plant.p))
    costs = np.empty(steps)
    sched = ControlSchedule.zeros(H, m)
    used = 0
    for t in range(steps):
        sched, k_used = optimize_schedule(plant, X[t], cost, paths, iterations, plan_streams[t], sched, t0=t)
        used += k_used
        u = sched.controls[0]
        if u_clip is not None:
            u = np.clip(u, -u_clip, u_clip)
        U[t] = u
        xc = wrap_angles(X[t], plant.angle_indices, cost.goal_at(t)) if wrap else X[t]
        costs[t] = running_cost(cost, xc, u, t)
        try:
            X[t + 1], dX[t], W[t] = em_step(plant, X[t], u, cost.dt, rng)
        except IntegrationError as e:
            raise IntegrationError(f"step {t}: {e}") from e
        sched = ControlSchedule(np.vstack([sched.controls[1:], np.zeros((1, m))]), sched.k)
    xT = wrap_angles(X[steps], plant.angle_indices, cost.goal_at(steps)) if wrap else X[steps]
    ep = Episode(cost.dt, X, U, dX, W, costs, cost.terminal_cost(xT, steps), None, seed)
    return BaselineRun(ep, used)
