"""Gaussian belief propagation through learned (or exact linear) dynamics.

A dynamics model exposes ``moments(m, V)`` for a Gaussian over the joint
state-control input and returns a :class:`Moments` record: the mean ``M`` and
covariance ``S`` of the transition, the regression matrix ``T`` with
``COV[input, dx] = V @ T``, and first derivatives of all three with respect to
``(m, V)``. Two models implement it: :class:`~gppi.gp.GpModel` through the
exact SE-kernel moment-matching integrals (:func:`gp_moments`) and
:class:`LinearGaussianModel` for linear test plants.

Derivatives with respect to a covariance use the symmetric convention:
``J[..., k, l]`` is symmetric in ``(k, l)`` and ``d out = sum(J * dV)`` for
every symmetric perturbation ``dV``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gp import GpModel

SYM_TOL = 1e-10
PSD_TOL = 1e-8


class PropagationError(RuntimeError):
    pass


def symmetrize(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def psd_repair(S, tol=PSD_TOL, what="covariance"):
    """Symmetrize and clip slightly negative eigenvalues to zero.

    Eigenvalues below ``-tol`` (relative to the largest magnitude, floored at
    absolute ``tol``) are a hard error.
    """
    S = symmetrize(S)
    if S.size == 0:
        return S
    w, U = np.linalg.eigh(S)
    scale = max(1.0, float(np.max(np.abs(w))))
    if w[0] < -tol * scale:
        raise PropagationError(f"{what} has eigenvalue {w[0]:.3e} < -{tol:g}")
    if w[0] < 0:
        S = symmetrize((U * np.maximum(w, 0.0)) @ U.T)
    return S


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (self.mean.size, self.mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean {self.mean.shape}")
        self.cov = psd_repair(cov)

    @classmethod
    def delta(cls, x, t=0.0):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(x, np.zeros((x.size, x.size)), t)

    def to_dict(self):
        return {"t": self.t, "mean": self.mean.tolist(), "cov": self.cov.tolist()}


@dataclass
class Moments:
    """Transition moments and their derivatives for one joint input Gaussian.

    Shapes with input dim D and output dim E: M (E), S (E,E), T (D,E),
    dM_dm (E,D), dM_dV (E,D,D), dS_dm (E,E,D), dS_dV (E,E,D,D),
    dT_dm (D,E,D), dT_dV (D,E,D,D).
    """
    M: np.ndarray
    S: np.ndarray
    T: np.ndarray
    dM_dm: np.ndarray | None = None
    dM_dV: np.ndarray | None = None
    dS_dm: np.ndarray | None = None
    dS_dV: np.ndarray | None = None
    dT_dm: np.ndarray | None = None
    dT_dV: np.ndarray | None = None


@dataclass
class MomentPrediction:
    d_mean: np.ndarray
    d_cov: np.ndarray
    cross_cov: np.ndarray


@dataclass
class MomentSensitivities:
    """Jacobians of one propagation step with respect to the state belief.

    ``A`` is the regression matrix of the next state on the current one
    (equal to ``dmu_dmu``); its derivatives are needed for the conditional
    structure of the belief chain.
    """
    dmu_dmu: np.ndarray  # (n, n)
    dmu_dS: np.ndarray  # (n, n, n)
    dS_dmu: np.ndarray  # (n, n, n)
    dS_dS: np.ndarray  # (n, n, n, n)
    dA_dmu: np.ndarray  # (n, n, n)
    dA_dS: np.ndarray  # (n, n, n, n)

    @property
    def A(self):
        return self.dmu_dmu


# ---------------------------------------------------------------------------
# SE-kernel GP moments


def _sym_last2(J):
    return 0.5 * (J + np.swapaxes(J, -1, -2))


def _pair_terms(m, V, X, il2a, il2b, lsfa, lsfb, ba, bb, Kinv, derivs):
    """Sum_ij coeff_ij Q_ij and its derivatives, Q_ij = E[k_a(x_i,x) k_b(x_j,x)].

    ``coeff = ba bb^T`` minus ``Kinv`` when given (the diagonal pairs).
    ``il2`` are inverse squared lengthscales, ``lsf`` log signal variances.
    The off-diagonal pairs only need products with Q, never the weighted
    matrix itself.
    """
    D = m.size
    nu = X - m
    P = il2a + il2b
    R = V * P[None, :] + np.eye(D)
    Rinv = np.linalg.inv(R)
    Xi = symmetrize(Rinv @ V)
    ka = nu * il2a
    kb = nu * il2b
    kaX = ka @ Xi
    sign, logdet = np.linalg.slogdet(R)
    E = lsfa - 0.5 * np.sum(nu * ka, 1) + 0.5 * np.sum(kaX * ka, 1) - 0.5 * logdet
    F = lsfb - 0.5 * np.sum(nu * kb, 1) + 0.5 * np.sum((kb @ Xi) * kb, 1)
    Q = kaX @ kb.T
    Q += E[:, None]
    Q += F[None, :]
    np.exp(Q, out=Q)
    Qb = Q @ bb
    total = float(ba @ Qb)
    H = None
    if Kinv is not None:
        H = Kinv * Q
        total -= float(np.sum(H))
    if not derivs:
        return total, None, None
    r1 = ba * Qb
    c1 = bb * (ba @ Q)
    p = ka @ Rinv
    r = kb @ Rinv
    cross = (p * ba[:, None]).T @ (Q @ (r * bb[:, None]))
    if H is not None:
        r1 = r1 - H.sum(1)
        c1 = c1 - H.sum(0)
        cross = cross - p.T @ (H @ r)
    # d log Q_ij / dm = (I - P Xi) z_ij with z_ij = ka_i + kb_j
    G = np.eye(D) - P[:, None] * Xi
    d_m = G @ (ka.T @ r1 + kb.T @ c1)
    Gam = symmetrize(P[:, None] * Rinv)
    outer = (p.T * r1) @ p + (r.T * c1) @ r + cross + cross.T
    d_V = -0.5 * Gam * total + 0.5 * outer
    return total, d_m, symmetrize(d_V)


def gp_moments(model: GpModel, m, V, derivs=True) -> Moments:
    """Exact predictive moments of the GP latent transition under N(m, V).

    Closed-form SE-kernel Gaussian integrals, evaluated in raw units.
    """
    m = np.asarray(m, dtype=float)
    V = symmetrize(np.asarray(V, dtype=float))
    X = model.raw_inputs
    D = m.size
    E = model.n_state
    if D != model.input_dim or V.shape != (D, D):
        raise ValueError(f"joint belief dim {D} does not match model input dim {model.input_dim}")
    nu = X - m
    il2 = model.raw_lengthscales ** -2.0
    lsf = np.log(model.raw_signal_var)
    beta = model.raw_beta
    Mc = np.empty(E)
    T = np.empty((D, E))
    I = np.eye(D)
    if derivs:
        dM_dm = np.empty((E, D))
        dM_dV = np.empty((E, D, D))
        dT_dm = np.empty((D, E, D))
        dT_dV = np.empty((D, E, D, D))
    for a in range(E):
        Bm = V + np.diag(1.0 / il2[a])
        Binv = np.linalg.inv(Bm)
        Binv = symmetrize(Binv)
        t = nu @ Binv
        sign, logdet = np.linalg.slogdet(I + V * il2[a][None, :])
        if sign <= 0:
            raise PropagationError("I + V W is not positive definite")
        q = np.exp(lsf[a] - 0.5 * logdet - 0.5 * np.sum(nu * t, 1))
        w = beta[a] * q
        Mbar = float(np.sum(w))
        Mc[a] = Mbar
        Ta = t.T @ w
        T[:, a] = Ta
        if derivs:
            dM_dm[a] = Ta
            wtt = (t.T * w) @ t
            dM_dV[a] = symmetrize(-0.5 * Mbar * Binv + 0.5 * wtt)
            dT_dm[:, a, :] = wtt - Mbar * Binv
            # dT_d/dV_kl = -1/2 T_d Binv_kl + 1/2 sum_i w_i t_id t_ik t_il - Binv_dk T_l
            trip = np.einsum("i,id,ik,il->dkl", w, t, t, t)
            J = -0.5 * Ta[:, None, None] * Binv[None] + 0.5 * trip - Binv[:, :, None] * Ta[None, None, :]
            dT_dV[:, a] = _sym_last2(J)
    S = np.empty((E, E))
    if derivs:
        dS_dm = np.empty((E, E, D))
        dS_dV = np.empty((E, E, D, D))
    for a in range(E):
        for b in range(a + 1):
            Kinv = model.raw_Kinv[a] if a == b else None
            tot, g_m, g_V = _pair_terms(m, V, X, il2[a], il2[b], lsf[a], lsf[b], beta[a], beta[b],
                                        Kinv, derivs)
            val = tot - Mc[a] * Mc[b] + (model.raw_signal_var[a] if a == b else 0.0)
            S[a, b] = S[b, a] = val
            if derivs:
                gm = g_m - dM_dm[a] * Mc[b] - Mc[a] * dM_dm[b]
                gV = g_V - dM_dV[a] * Mc[b] - Mc[a] * dM_dV[b]
                dS_dm[a, b] = dS_dm[b, a] = gm
                dS_dV[a, b] = dS_dV[b, a] = gV
    M = Mc + model.out_mean
    if not derivs:
        return Moments(M, S, T)
    return Moments(M, S, T, dM_dm, dM_dV, dS_dm, dS_dV, dT_dm, dT_dV)


class LinearGaussianModel:
    """Exact transition moments of ``dx = (A x + B u) dt + noise``.

    Stands in for a GP that knows the plant perfectly; ``noise`` is the
    covariance of the per-step transition noise.
    """

    def __init__(self, A, B, dt, noise):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.dt = float(dt)
        self.noise = np.atleast_2d(np.asarray(noise, dtype=float))
        self.n_state, self.n_control = self.B.shape
        self.input_dim = self.n_state + self.n_control
        self.F = np.hstack([self.A, self.B]) * self.dt

    def noise_cov(self):
        return self.noise

    def moments(self, m, V, derivs=True):
        F = self.F
        E, D = F.shape
        M = F @ m
        S = F @ V @ F.T
        T = F.T.copy()
        if not derivs:
            return Moments(M, S, T)
        dS_dV = _sym_last2(np.einsum("ak,bl->abkl", F, F))
        return Moments(M, S, T, F.copy(), np.zeros((E, D, D)), np.zeros((E, E, D)), dS_dV,
                       np.zeros((D, E, D)), np.zeros((D, E, D, D)))


def model_moments(model, m, V, derivs=True) -> Moments:
    if isinstance(model, GpModel):
        return gp_moments(model, m, V, derivs)
    return model.moments(m, V, derivs)


def _joint(belief: GaussianBelief, u):
    n = belief.mean.size
    u = np.atleast_1d(np.asarray(u, dtype=float))
    m = np.concatenate([belief.mean, u])
    V = np.zeros((m.size, m.size))
    V[:n, :n] = belief.cov
    return m, V


def exact_moments(model, joint: GaussianBelief) -> MomentPrediction:
    """Moments of the latent transition (no observation noise) under a joint belief."""
    if joint.mean.size != model.input_dim:
        raise ValueError(f"joint belief has dim {joint.mean.size}, model expects {model.input_dim}")
    mo = model_moments(model, joint.mean, joint.cov, derivs=False)
    return MomentPrediction(mo.M, psd_repair(mo.S, what="transition covariance"), joint.cov @ mo.T)


def _step_from_moments(belief, mo, noise, dt):
    n = belief.mean.size
    Tx = mo.T[:n, :]
    C = belief.cov @ Tx
    mu = belief.mean + mo.M
    cov = belief.cov + mo.S + C + C.T + noise
    return GaussianBelief(mu, psd_repair(cov, what="propagated covariance"), belief.t + dt)


def step(model, belief: GaussianBelief, u, dt=1.0, process_noise=True) -> GaussianBelief:
    """Advance a state belief by one step with deterministic control ``u``.

    ``process_noise`` adds the model's transition noise (the GP's learned
    noise variance) to the predicted covariance.
    """
    m, V = _joint(belief, u)
    mo = model_moments(model, m, V, derivs=False)
    noise = model.noise_cov() if process_noise else 0.0
    return _step_from_moments(belief, mo, noise, dt)


def rollout(model, belief: GaussianBelief, controls, dt=1.0, process_noise=True):
    """Beliefs after each control in ``controls`` (length H), H+1 entries."""
    out = [belief]
    for u in controls:
        out.append(step(model, out[-1], u, dt, process_noise))
    return out


def _sensitivities_from_moments(mo: Moments, Sigma):
    n = Sigma.shape[0]
    Tx = mo.T[:n, :]
    I = np.eye(n)
    dmu_dmu = I + mo.dM_dm[:, :n]
    dmu_dS = mo.dM_dV[:, :n, :n]
    dT_dm = mo.dT_dm[:n, :, :n]  # (r, a, k)
    dT_dV = mo.dT_dV[:n, :, :n, :n]  # (r, a, k, l)
    # C_ab = sum_r Sigma_ar T_rb
    dC_dm = np.einsum("ar,rbk->abk", Sigma, dT_dm)
    dS_dmu = mo.dS_dm[:, :, :n] + dC_dm + np.swapaxes(dC_dm, 0, 1)
    eye4 = np.einsum("ak,bl->abkl", I, I)
    dC_dS = np.einsum("ak,lb->abkl", I, Tx) + np.einsum("ar,rbkl->abkl", Sigma, dT_dV)
    dC_dS = _sym_last2(dC_dS)
    dS_dS = _sym_last2(eye4) + mo.dS_dV[:, :, :n, :n] + dC_dS + np.swapaxes(dC_dS, 0, 1)
    # A_ad = delta_ad + T_da
    dA_dmu = np.swapaxes(dT_dm, 0, 1)
    dA_dS = np.swapaxes(dT_dV, 0, 1)
    return MomentSensitivities(dmu_dmu, dmu_dS, dS_dmu, dS_dS, dA_dmu, dA_dS)


def sensitivities(model, belief: GaussianBelief, u) -> MomentSensitivities:
    """Analytic Jacobians of :func:`step` with respect to ``(mean, cov)``."""
    m, V = _joint(belief, u)
    mo = model_moments(model, m, V, derivs=True)
    return _sensitivities_from_moments(mo, belief.cov)


def sensitivities_fd(model, belief: GaussianBelief, u, eps=1e-6, process_noise=True) -> MomentSensitivities:
    """Central finite-difference version of :func:`sensitivities`."""
    n = belief.mean.size

    def f(mu, S):
        b = GaussianBelief.__new__(GaussianBelief)
        b.mean, b.cov, b.t = mu, symmetrize(S), 0.0
        m, V = _joint(b, u)
        mo = model_moments(model, m, V, derivs=False)
        Tx = mo.T[:n, :]
        C = b.cov @ Tx
        cov = b.cov + mo.S + C + C.T
        return mu + mo.M, cov, np.eye(n) + Tx.T

    mu0, S0 = belief.mean, belief.cov
    out = {"mm": np.empty((n, n)), "Sm": np.empty((n, n, n)), "Am": np.empty((n, n, n)),
           "mS": np.zeros((n, n, n)), "SS": np.zeros((n, n, n, n)), "AS": np.zeros((n, n, n, n))}
    for k in range(n):
        e = np.zeros(n)
        e[k] = eps
        p, q = f(mu0 + e, S0), f(mu0 - e, S0)
        out["mm"][:, k] = (p[0] - q[0]) / (2 * eps)
        out["Sm"][:, :, k] = (p[1] - q[1]) / (2 * eps)
        out["Am"][:, :, k] = (p[2] - q[2]) / (2 * eps)
    for k in range(n):
        for l in range(k, n):
            E = np.zeros((n, n))
            E[k, l] = E[l, k] = eps
            p, q = f(mu0, S0 + E), f(mu0, S0 - E)
            w = 1.0 if k == l else 0.5
            for key, idx in (("mS", 0), ("SS", 1), ("AS", 2)):
                g = (p[idx] - q[idx]) / (2 * eps) * w
                out[key][..., k, l] = g
                out[key][..., l, k] = g
    return MomentSensitivities(out["mm"], out["mS"], out["Sm"], out["SS"], out["Am"], out["AS"])
