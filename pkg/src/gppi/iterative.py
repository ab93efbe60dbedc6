"""Iterative GPPI: improve an open-loop control schedule under the controlled GP chain.

At iteration k the schedule ``u^k`` drives the belief chain and

    Phi^k_t(x) = E_{u^k}[ exp(-(1/lam) * (sum_{j>t} q_j dt + phi(x_H))) | x_t = x ]

is evaluated with the same fold as the uncontrolled desirability. The update is

    u^{k+1}_t = u^k_t + gamma * lam R^-1 G_t^T grad Phi^k_t / Phi^k_t.

The Radon-Nikodym weight and the corrected path cost that connect the
controlled and uncontrolled path measures are provided for validation; the
update itself only needs Phi and its gradient.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .belief import model_moments
from .desirability import CostSpec, DesirabilityEval, _chain, optimal_control, plant_noise
from .gp import FitError, FitOptions, TransitionDataset, fit
from .plants import Episode, PlantSpec, collect_rollouts, simulate


class StructuralError(ValueError):
    """Control and noise channels do not admit a change of path measure."""


@dataclass
class ControlSchedule:
    controls: np.ndarray
    k: int = 0

    def __post_init__(self):
        self.controls = np.atleast_2d(np.asarray(self.controls, dtype=float))
        if self.controls.size == 0:
            raise ValueError("schedule must have at least one step")
        if not np.all(np.isfinite(self.controls)):
            raise ValueError("schedule contains non-finite controls")

    @classmethod
    def zeros(cls, steps, m):
        return cls(np.zeros((steps, m)), 0)

    @property
    def steps(self):
        return self.controls.shape[0]

    @property
    def norm(self):
        return float(np.linalg.norm(self.controls))

    def to_dict(self):
        return {"k": self.k, "controls": self.controls.tolist()}


@dataclass
class IterationRecord:
    k: int
    schedule: ControlSchedule
    realized_cost: float
    terminal_cost: float
    data_count: int
    phi: np.ndarray | None = None
    grad_phi: np.ndarray | None = None
    seconds: float = 0.0


@dataclass
class IterationTrace:
    records: list = field(default_factory=list)

    @property
    def realized_costs(self):
        return np.array([r.realized_cost for r in self.records])

    @property
    def terminal_costs(self):
        return np.array([r.terminal_cost for r in self.records])

    @property
    def best_so_far(self):
        return np.minimum.accumulate(self.realized_costs)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "realized_cost", "best_so_far", "terminal_cost", "schedule_norm",
                        "data_count"])
            for r, b in zip(self.records, self.best_so_far):
                w.writerow([r.k, repr(r.realized_cost), repr(float(b)), repr(r.terminal_cost),
                            repr(r.schedule.norm), r.data_count])

    def schedules_json(self):
        return json.dumps([r.schedule.to_dict() for r in self.records], indent=1)


# ---------------------------------------------------------------------------
# change of measure


def _actuated_inverse(G, R):
    """Pseudo-inverse of W = G R^-1 G^T on the column space of G (stacks allowed)."""
    G = np.asarray(G, dtype=float)
    W = G @ np.linalg.solve(R, np.swapaxes(G, -1, -2))
    if np.any(np.linalg.matrix_rank(W) == 0):
        raise StructuralError("control matrix has no actuated subspace")
    return np.linalg.pinv(W, rcond=1e-10, hermitian=True)


def control_pinv(G):
    """G^+ for a stack of (n, m) control matrices.

    Full column rank (every plant here) uses the normal equations; otherwise
    the SVD pseudo-inverse.
    """
    G = np.asarray(G, dtype=float)
    Gt = np.swapaxes(G, -1, -2)
    GtG = Gt @ G
    det = np.linalg.det(GtG)
    scale = np.prod(np.einsum("...ii->...i", GtG), axis=-1)
    if np.all(np.abs(det) > 1e-12 * np.maximum(scale, 1e-300)):
        return np.linalg.solve(GtG, Gt)
    if np.any(np.linalg.matrix_rank(G) == 0):
        raise StructuralError("control matrix has no actuated subspace")
    return np.linalg.pinv(G)


def path_terms(states, controls, noise, plant: PlantSpec, R, dt):
    """Per-step ``u^T G^T W^+ G u`` and ``u^T G^T W^+ B dw`` for a batch of paths.

    ``states`` is (K, T+1, n), ``controls`` (K, T, m) or (T, m), ``noise`` the
    (K, T, p) draws; the Brownian increment is ``noise * sqrt(dt)``.
    Returns two (K, T) arrays. With W = G R^-1 G^T and G of full column rank,
    G^T W^+ = R G^+, which is what is evaluated.
    """
    states = np.asarray(states, dtype=float)
    K, T = states.shape[0], states.shape[1] - 1
    controls = np.broadcast_to(np.asarray(controls, dtype=float), (K, T, plant.m))
    R = np.atleast_2d(R)
    quad = np.empty((K, T))
    cross = np.empty((K, T))
    sq = math.sqrt(dt)
    for j in range(T):
        X = states[:, j]
        G = np.asarray(plant.G(X)).reshape(K, plant.n, plant.m)
        B = np.asarray(plant.B(X)).reshape(K, plant.n, plant.p)
        Gp = control_pinv(G)
        GpB = Gp @ B
        leak = B - G @ GpB
        if np.max(np.abs(leak)) > 1e-8 * max(1.0, float(np.max(np.abs(B)))):
            raise StructuralError(f"noise leaves the actuated subspace at step {j}")
        # project u onto the actuated directions before weighting
        u = np.einsum("kmn,kn->km", Gp, np.einsum("knm,km->kn", G, controls[:, j]))
        Ru = u @ R.T
        quad[:, j] = np.einsum("km,km->k", u, Ru)
        cross[:, j] = np.einsum("km,kmp,kp->k", Ru, GpB, noise[:, j]) * sq
    return quad, cross


def _path_terms(path: Episode, plant: PlantSpec, cost: CostSpec):
    quad, cross = path_terms(path.states[None], path.controls[None], path.noise[None], plant, cost.R, path.dt)
    return quad[0], cross[0]


def log_radon_nikodym_weight(path: Episode, plant: PlantSpec, cost: CostSpec):
    quad, cross = _path_terms(path, plant, cost)
    return -(0.5 / cost.lam) * float(np.sum(quad * path.dt + 2.0 * cross))


def radon_nikodym_weight(path: Episode, plant: PlantSpec, cost: CostSpec):
    """xi = dP_uncontrolled / dP_controlled along a path run under its logged controls."""
    return math.exp(log_radon_nikodym_weight(path, plant, cost))


def corrected_path_cost(path: Episode, plant: PlantSpec, cost: CostSpec):
    """q~_j = q_j + u^T G^T W^+ G u / 2 + u^T G^T W^+ B dw_j / dt.

    ``sum(q~) dt / lam`` equals ``sum(q) dt / lam - log xi``, so exponentiated
    corrected costs under the controlled process average to the uncontrolled
    desirability.
    """
    quad, cross = _path_terms(path, plant, cost)
    q = np.array([cost.state_cost(path.states[j], j) for j in range(len(path.controls))])
    return q + 0.5 * quad + cross / path.dt


# ---------------------------------------------------------------------------
# Phi and the update


def phi_recursion(model, x, cost: CostSpec, schedule: ControlSchedule, t=0, noise=None) -> DesirabilityEval:
    """Phi^k_t and its gradient at ``x`` for the remaining steps t..H of the schedule."""
    H = cost.steps
    if schedule.steps != H:
        raise ValueError(f"schedule has {schedule.steps} steps, cost horizon has {H}")
    if not 0 <= t < H:
        raise ValueError(f"step {t} outside the horizon")
    return _chain(model, x, cost.with_horizon_steps(H - t), schedule.controls[t:], with_grad=True,
                  t0=t, noise=noise)


def control_update(schedule: ControlSchedule, evals, Gs, cost: CostSpec, gamma=1.0) -> ControlSchedule:
    """Apply the increment lam R^-1 G^T grad(log Phi) at every step."""
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    U = schedule.controls.copy()
    for t, (ev, G) in enumerate(zip(evals, Gs)):
        U[t] = U[t] + gamma * optimal_control(ev, G, cost)
    return ControlSchedule(U, schedule.k + 1)


def improve_schedule(model, plant: PlantSpec, x0, cost: CostSpec, schedule: ControlSchedule, gamma=1.0,
                     known_noise=True):
    """One sweep of the update along the predicted mean path of the new schedule.

    Phi_t is evaluated at the model's mean state reached by the already
    updated controls ``u^{k+1}_{<t}``; from the zero schedule this gives the
    open-loop GPPI controls. Returns the new schedule and the per-step evals.
    """
    H = cost.steps
    x = np.asarray(x0, dtype=float)
    evals, Gs = [], []
    new = schedule
    for t in range(H):
        noise = plant_noise(plant, x, cost.dt) if known_noise else None
        ev = phi_recursion(model, x, cost, schedule, t, noise)
        G = plant.G(x)
        evals.append(ev)
        Gs.append(G)
        u = schedule.controls[t] + gamma * optimal_control(ev, G, cost)
        x = x + model_moments(model, np.concatenate([x, u]), np.zeros((x.size + u.size,) * 2), derivs=False).M
    new = control_update(schedule, evals, Gs, cost, gamma)
    return new, evals


def _evaluate(plant, x0, schedule, cost, seeds):
    """Mean realized total and terminal cost over common-random-number rollouts."""
    tot, term = [], []
    for s in seeds:
        ep = simulate(plant, x0, schedule.controls, cost.dt, np.random.default_rng(s), cost)
        tot.append(ep.cumulative_cost)
        term.append(ep.terminal_cost)
    return float(np.mean(tot)), float(np.mean(term))


def iterate(plant: PlantSpec, cost: CostSpec, x0, iterations, rollouts, seed, data: TransitionDataset | None = None,
            fit_opts: FitOptions | None = None, gamma=1.0, cap=2000, eval_rollouts=4, known_noise=True,
            callback=None) -> IterationTrace:
    """Run ``iterations`` rounds of collect, refit and update from the zero schedule.

    Round k executes ``u^k`` ``rollouts`` times (fresh noise), appends the
    transitions to the training set (oldest evicted beyond ``cap``), refits the
    GP warm-started from the previous hyperparameters and applies one update.
    Every schedule, including the last, is scored on the same
    ``eval_rollouts`` noise streams so costs are comparable across rounds.
    Record 1 is therefore a single GPPI pass.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    x0 = np.asarray(x0, dtype=float)
    H = cost.steps
    root = np.random.SeedSequence(seed)
    eval_ss, collect_ss = root.spawn(2)
    eval_seeds = eval_ss.spawn(eval_rollouts)
    collect_streams = collect_ss.spawn(iterations)
    opts = fit_opts or FitOptions()
    schedule = ControlSchedule.zeros(H, plant.m)
    trace = IterationTrace()
    params = None
    for k in range(iterations):
        t_start = time.perf_counter()
        realized, term = _evaluate(plant, x0, schedule, cost, eval_seeds)
        fresh, _ = collect_rollouts(plant, schedule.controls, rollouts, H, collect_streams[k], dt=cost.dt,
                                    x0=x0)
        data = fresh if data is None else data.append(fresh, cap)
        try:
            model = fit(data, params, opts)
        except (FitError, np.linalg.LinAlgError, RuntimeError) as e:
            raise FitError(f"iteration {k}: {e}") from e
        params = model.params
        new, evals = improve_schedule(model, plant, x0, cost, schedule, gamma, known_noise)
        rec = IterationRecord(k, schedule, realized, term, len(data),
                              np.array([ev.psi for ev in evals]),
                              np.array([ev.grad for ev in evals]), time.perf_counter() - t_start)
        trace.records.append(rec)
        if callback is not None:
            callback(rec)
        schedule = new
    realized, term = _evaluate(plant, x0, schedule, cost, eval_seeds)
    trace.records.append(IterationRecord(iterations, schedule, realized, term, len(data)))
    return trace
