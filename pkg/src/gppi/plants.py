"""Simulated plants ``dx = (f(x) + G(x) u) dt + B(x) dw`` and rollout collection.

Angles are measured from the hanging-down position: 0 is down, pi is upright.
Noise enters through the actuated channel (``B = G``), so a control-weight
matrix ``R = lam * inv(noise_cov)`` satisfies the path-integral assumption.

All drift and matrix functions accept a batch of states with shape (..., n).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .gp import TransitionDataset


class IntegrationError(RuntimeError):
    pass


@dataclass
class PlantSpec:
    name: str
    n: int
    m: int
    drift: Callable
    control_matrix: Callable
    diffusion: Callable
    noise_cov: np.ndarray
    params: dict = field(default_factory=dict)
    energy: Callable | None = None
    # index of each angle coordinate, for reporting
    angle_indices: tuple = ()
    velocity_indices: tuple = ()

    def __post_init__(self):
        self.noise_cov = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        if np.linalg.eigvalsh(0.5 * (self.noise_cov + self.noise_cov.T))[0] < -1e-12:
            raise ValueError("noise covariance must be PSD")

    @property
    def p(self):
        return self.noise_cov.shape[0]

    def f(self, x):
        return self.drift(np.asarray(x, dtype=float))

    def G(self, x):
        return self.control_matrix(np.asarray(x, dtype=float))

    def B(self, x):
        return self.diffusion(np.asarray(x, dtype=float))


@dataclass
class Episode:
    """One simulated trajectory.

    ``costs[t]`` is the running cost ``(q(x_t) + u_t R u_t / 2) dt``; the
    terminal cost is kept separately so ``cumulative_cost`` is their sum.
    """
    dt: float
    states: np.ndarray
    controls: np.ndarray
    transitions: np.ndarray
    noise: np.ndarray
    costs: np.ndarray
    terminal_cost: float = 0.0
    psi: np.ndarray | None = None
    seed: int | None = None

    @property
    def times(self):
        return self.dt * np.arange(len(self.states))

    @property
    def cumulative_cost(self):
        return float(np.sum(self.costs) + self.terminal_cost)

    @property
    def final_state(self):
        return self.states[-1]

    def dataset(self):
        m = self.controls.shape[1]
        n = self.states.shape[1]
        return TransitionDataset(np.hstack([self.states[:-1], self.controls]), self.transitions, n, m)

    def to_csv(self, path):
        n = self.states.shape[1]
        m = self.controls.shape[1]
        header = (["t"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(m)]
                  + ["cost", "psi"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            T = len(self.controls)
            for t in range(T + 1):
                row = [repr(float(self.times[t]))] + [repr(float(v)) for v in self.states[t]]
                if t < T:
                    row += [repr(float(v)) for v in self.controls[t]] + [repr(float(self.costs[t]))]
                    row.append(repr(float(self.psi[t])) if self.psi is not None else "")
                else:
                    row += [""] * m + [repr(float(self.terminal_cost)), ""]
                w.writerow(row)


def em_step(plant: PlantSpec, x, u, dt, rng):
    """One Euler-Maruyama step. Returns ``(x_next, dx, dw)`` with dw ~ N(0, noise_cov)."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    f = plant.f(x)
    G = plant.G(x)
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(G))):
        raise IntegrationError(f"non-finite drift at state {x.tolist()}")
    if np.any(plant.noise_cov):
        dw = rng.multivariate_normal(np.zeros(plant.p), plant.noise_cov, method="cholesky")
    else:
        dw = np.zeros(plant.p)
    xn = x + (f + G @ u) * dt + plant.B(x) @ dw * math.sqrt(dt)
    # logged transitions are exactly the state differences
    return xn, xn - x, dw


def em_step_batch(plant: PlantSpec, X, U, dt, dW):
    """Vectorized Euler-Maruyama for K states; ``dW`` are the noise draws (K, p)."""
    f = plant.f(X)
    G = plant.G(X)
    B = plant.B(X)
    dx = (f + np.einsum("knm,km->kn", G, U)) * dt + np.einsum("knp,kp->kn", B, dW) * math.sqrt(dt)
    if not np.all(np.isfinite(dx)):
        bad = int(np.argmax(~np.all(np.isfinite(dx), axis=1)))
        raise IntegrationError(f"non-finite step from state {X[bad].tolist()}")
    Xn = X + dx
    return Xn, Xn - X


# ---------------------------------------------------------------------------
# cart-pole


def cartpole(cart_mass=0.5, pole_mass=0.5, pole_length=0.5, gravity=9.81, noise_std=1.0) -> PlantSpec:
    """Cart with a point-mass pole on a massless rod; state (x, x_dot, theta, theta_dot)."""
    if min(cart_mass, pole_mass, pole_length) <= 0:
        raise ValueError("masses and lengths must be positive")
    Mc, mp, l, g = cart_mass, pole_mass, pole_length, gravity

    def accel(x, F):
        th, thd = x[..., 2], x[..., 3]
        s, c = np.sin(th), np.cos(th)
        # [[Mc+mp, mp l c], [mp l c, mp l^2]] [xdd, thdd] = [F + mp l s thd^2, -mp g l s]
        a11, a12, a22 = Mc + mp, mp * l * c, mp * l * l
        b1 = F + mp * l * s * thd ** 2
        b2 = -mp * g * l * s
        det = a11 * a22 - a12 * a12
        return (a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det

    def drift(x):
        xdd, thdd = accel(x, 0.0)
        return np.stack([x[..., 1], xdd, x[..., 3], thdd], -1)

    def ctrl(x):
        th = x[..., 2]
        c = np.cos(th)
        det = (Mc + mp) * mp * l * l - (mp * l * c) ** 2
        gx = mp * l * l / det
        gth = -mp * l * c / det
        z = np.zeros_like(th)
        return np.stack([z, gx, z, gth], -1)[..., None]

    def energy(x):
        xd, th, thd = x[..., 1], x[..., 2], x[..., 3]
        kin = 0.5 * (Mc + mp) * xd ** 2 + mp * l * xd * thd * np.cos(th) + 0.5 * mp * l * l * thd ** 2
        return kin - mp * g * l * np.cos(th)

    return PlantSpec("cartpole", 4, 1, drift, ctrl, ctrl, np.array([[noise_std ** 2]]),
                     dict(cart_mass=Mc, pole_mass=mp, pole_length=l, gravity=g, noise_std=noise_std),
                     energy, angle_indices=(2,), velocity_indices=(1, 3))


# ---------------------------------------------------------------------------
# cart with double inverted pendulum


def cart_double_pendulum(cart_mass=0.5, link_masses=(0.25, 0.25), link_lengths=(0.25, 0.25),
                         gravity=9.81, noise_std=1.0) -> PlantSpec:
    """Cart with two point-mass links; state (x, x_dot, a1, a1_dot, a2, a2_dot).

    Both link angles are absolute, measured from hanging down.
    """
    m1, m2 = link_masses
    l1, l2 = link_lengths
    Mc, g = cart_mass, gravity
    if min(Mc, m1, m2, l1, l2) <= 0:
        raise ValueError("masses and lengths must be positive")

    def mass_matrix(x):
        a, b = x[..., 2], x[..., 4]
        shp = x.shape[:-1] + (3, 3)
        Mm = np.empty(shp)
        Mm[..., 0, 0] = Mc + m1 + m2
        Mm[..., 0, 1] = Mm[..., 1, 0] = (m1 + m2) * l1 * np.cos(a)
        Mm[..., 0, 2] = Mm[..., 2, 0] = m2 * l2 * np.cos(b)
        Mm[..., 1, 1] = (m1 + m2) * l1 ** 2
        Mm[..., 1, 2] = Mm[..., 2, 1] = m2 * l1 * l2 * np.cos(a - b)
        Mm[..., 2, 2] = m2 * l2 ** 2
        return Mm

    def rhs(x):
        a, ad, b, bd = x[..., 2], x[..., 3], x[..., 4], x[..., 5]
        r0 = (m1 + m2) * l1 * np.sin(a) * ad ** 2 + m2 * l2 * np.sin(b) * bd ** 2
        r1 = -(m1 + m2) * g * l1 * np.sin(a) - m2 * l1 * l2 * np.sin(a - b) * bd ** 2
        r2 = -m2 * g * l2 * np.sin(b) + m2 * l1 * l2 * np.sin(a - b) * ad ** 2
        return np.stack([r0, r1, r2], -1)

    def _solve(Mm, r):
        det = np.linalg.det(Mm)
        if np.any(np.abs(det) < 1e-12):
            raise IntegrationError("singular mass matrix")
        return np.linalg.solve(Mm, r[..., None])[..., 0]

    def drift(x):
        qdd = _solve(mass_matrix(x), rhs(x))
        return np.stack([x[..., 1], qdd[..., 0], x[..., 3], qdd[..., 1], x[..., 5], qdd[..., 2]], -1)

    def ctrl(x):
        e = np.zeros(x.shape[:-1] + (3,))
        e[..., 0] = 1.0
        qdd = _solve(mass_matrix(x), e)
        z = np.zeros(x.shape[:-1])
        return np.stack([z, qdd[..., 0], z, qdd[..., 1], z, qdd[..., 2]], -1)[..., None]

    def energy(x):
        qd = x[..., [1, 3, 5]]
        kin = 0.5 * np.einsum("...i,...ij,...j->...", qd, mass_matrix(x), qd)
        a, b = x[..., 2], x[..., 4]
        pot = -(m1 + m2) * g * l1 * np.cos(a) - m2 * g * l2 * np.cos(b)
        return kin + pot

    return PlantSpec("cdip", 6, 1, drift, ctrl, ctrl, np.array([[noise_std ** 2]]),
                     dict(cart_mass=Mc, link_masses=list(link_masses), link_lengths=list(link_lengths),
                          gravity=g, noise_std=noise_std),
                     energy, angle_indices=(2, 4), velocity_indices=(1, 3, 5))


def linear_plant(A, Bc, noise=None, noise_cov=None) -> PlantSpec:
    """``f(x) = A x``, ``G = Bc``; ``noise`` is the diffusion matrix (defaults to ``Bc``)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Bc = np.atleast_2d(np.asarray(Bc, dtype=float))
    n, m = Bc.shape
    Bn = Bc if noise is None else np.atleast_2d(np.asarray(noise, dtype=float))
    if noise_cov is None:
        noise_cov = np.eye(Bn.shape[1])

    def drift(x):
        return x @ A.T

    def ctrl(x):
        return np.broadcast_to(Bc, x.shape[:-1] + Bc.shape).copy()

    def diff(x):
        return np.broadcast_to(Bn, x.shape[:-1] + Bn.shape).copy()

    return PlantSpec("linear", n, m, drift, ctrl, diff, noise_cov, dict(A=A.tolist(), Bc=Bc.tolist()))


def plant_from_params(name, params) -> PlantSpec:
    if name == "cartpole":
        return cartpole(**params)
    if name == "cdip":
        return cart_double_pendulum(**params)
    raise ValueError(f"unknown plant {name!r}")


# ---------------------------------------------------------------------------
# data collection


def _policy_controls(policy, rng, steps, m, u_std):
    if isinstance(policy, str):
        if policy == "zero":
            return np.zeros((steps, m))
        if policy == "random":
            return rng.normal(0.0, u_std, (steps, m))
        raise ValueError(f"unknown policy {policy!r}")
    return np.asarray(policy, dtype=float).reshape(steps, m)


def simulate(plant, x0, controls, dt, rng, cost=None, seed=None):
    """Run a control sequence open loop and log the :class:`Episode`."""
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    T = len(controls)
    X = np.empty((T + 1, plant.n))
    X[0] = x0
    dX = np.empty((T, plant.n))
    W = np.empty((T, plant.p))
    costs = np.zeros(T)
    for t in range(T):
        try:
            X[t + 1], dX[t], W[t] = em_step(plant, X[t], controls[t], dt, rng)
        except IntegrationError as e:
            raise IntegrationError(f"step {t}: {e}") from e
        if cost is not None:
            costs[t] = running_cost(cost, X[t], controls[t], t)
    term = cost.terminal_cost(X[T], T) if cost is not None else 0.0
    return Episode(dt, X, controls, dX, W, costs, term, None, seed)


def running_cost(cost, x, u, t):
    u = np.atleast_1d(u)
    return (cost.state_cost(x, t) + 0.5 * float(u @ cost.R @ u)) * cost.dt


def collect_rollouts(plant: PlantSpec, policy, count, steps, seed, dt=0.05, x0=None,
                     init_low=None, init_high=None, u_std=1.0):
    """Roll out ``count`` episodes and stack their transitions.

    ``policy`` is "zero", "random" (Gaussian controls with std ``u_std``) or a
    (steps, m) schedule. Start states are ``x0`` or uniform in
    ``[init_low, init_high]``. Each rollout gets its own RNG stream.
    """
    if count < 1 or steps < 1:
        raise ValueError("count and steps must be >= 1")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    streams = ss.spawn(count)
    episodes = []
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        if init_low is not None:
            start = rng.uniform(init_low, init_high)
        else:
            start = np.zeros(plant.n) if x0 is None else np.asarray(x0, dtype=float)
        controls = _policy_controls(policy, rng, steps, plant.m, u_std)
        try:
            episodes.append(simulate(plant, start, controls, dt, rng, seed=ss.entropy))
        except IntegrationError as e:
            raise IntegrationError(f"rollout {i}: {e}") from e
    X = np.vstack([np.hstack([ep.states[:-1], ep.controls]) for ep in episodes])
    Y = np.vstack([ep.transitions for ep in episodes])
    return TransitionDataset(X, Y, plant.n, plant.m), episodes
