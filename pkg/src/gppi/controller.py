"""Receding-horizon GPPI: re-plan from the true state at every step."""
from __future__ import annotations

import time

import numpy as np

from .desirability import (CostSpec, DesirabilityUnderflow, desirability_gradient, optimal_control,
                           plant_noise)
from .plants import Episode, IntegrationError, PlantSpec, em_step, running_cost


def wrap_angles(x, indices, center):
    """Map the angle coordinates of ``x`` into [center - pi, center + pi)."""
    x = np.array(x, dtype=float)
    for i in indices:
        x[..., i] = center[i] + np.mod(x[..., i] - center[i] + np.pi, 2 * np.pi) - np.pi
    return x


def receding_horizon_run(plant: PlantSpec, model, cost: CostSpec, steps, seed, x0=None,
                         u_clip=None, wrap=True, known_noise=True, callback=None) -> Episode:
    """Run ``steps`` closed-loop steps, logging controls, costs and Psi.

    Each step evaluates the desirability gradient through the uncontrolled
    belief chain from the current state, applies the resulting control for
    one ``dt`` and re-plans. With ``wrap`` the planner sees the plant's angles
    within pi of the goal angle (the logged states stay unwrapped). With
    ``known_noise`` the chain adds the plant's diffusion ``B Sigma B^T dt`` at
    the current state instead of the model's per-output noise estimate; the
    path-integral control law assumes that noise structure.
    ``u_clip`` optionally saturates the force.
    """
    rng = np.random.default_rng(seed)
    n, m = plant.n, plant.m
    X = np.empty((steps + 1, n))
    X[0] = np.zeros(n) if x0 is None else x0
    U = np.empty((steps, m))
    dX = np.empty((steps, n))
    W = np.empty((steps, plant.p))
    costs = np.empty(steps)
    psi = np.empty(steps)
    for t in range(steps):
        xp = wrap_angles(X[t], plant.angle_indices, cost.goal_at(t)) if wrap else X[t]
        try:
            noise = plant_noise(plant, X[t], cost.dt) if known_noise else None
            ev = desirability_gradient(model, xp, cost, t0=t, noise=noise)
            u = optimal_control(ev, plant.G(X[t]), cost)
        except DesirabilityUnderflow as e:
            raise DesirabilityUnderflow(f"step {t}: {e}") from e
        if u_clip is not None:
            u = np.clip(u, -u_clip, u_clip)
        U[t] = u
        psi[t] = ev.psi
        costs[t] = running_cost(cost, xp, u, t)
        try:
            X[t + 1], dX[t], W[t] = em_step(plant, X[t], u, cost.dt, rng)
        except IntegrationError as e:
            raise IntegrationError(f"step {t}: {e}") from e
        if callback is not None:
            callback(t, X[t + 1], u, ev)
    xT = wrap_angles(X[steps], plant.angle_indices, cost.goal_at(steps)) if wrap else X[steps]
    term = cost.terminal_cost(xT, steps)
    return Episode(cost.dt, X, U, dX, W, costs, term, psi, seed)
