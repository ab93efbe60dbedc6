"""Path-integral desirability through a Gaussian belief chain.

The desirability of a state is the expected exponentiated path cost

    Psi(x_0) = E[ exp(-(1/lam) * (sum_{j=1..H} q_j dt + phi(x_H))) ],

with quadratic state costs. The chain x_0 -> x_1 -> ... -> x_H is
approximated by a Gaussian Markov chain whose marginals and one-step
cross-covariances come from moment matching: conditionally,
``x_{j+1} | x_j ~ N(mu_{j+1} + A_j (x_j - mu_j), Sigma_{j+1} - A_j Sigma_j A_j^T)``
where ``A_j`` is the regression matrix implied by the input-output
cross-covariance. The nested integrals are then folded backward one step at
a time; each fold is an unnormalized-Gaussian integral with a scale factor
(``scales``) and a precision matrix (``precisions``). For a linear plant the
fold is exact.

Gradients with respect to ``x_0`` are forward-mode: tangents of every belief,
regression matrix and fold quantity are carried alongside, one direction per
state dimension.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .belief import (GaussianBelief, _joint, _sensitivities_from_moments, model_moments,
                     psd_repair, symmetrize)

UNDERFLOW_FLOOR = 1e-300
# GP moments on near-noise-free outputs carry ~1e-6 round-off from the
# ill-conditioned Gram inverse; the chain clips up to this before failing
CHAIN_PSD_TOL = 1e-4


class DesirabilityUnderflow(RuntimeError):
    pass


@dataclass
class CostSpec:
    """Quadratic state cost, control weight and PI temperature.

    ``horizon`` is in seconds and must be a positive integer multiple of ``dt``.
    ``goal`` is either one state (held constant) or a trajectory indexed by
    step; indices past its end reuse the last row.
    """
    Q: np.ndarray
    R: np.ndarray
    lam: float
    dt: float
    horizon: float
    goal: np.ndarray
    terminal_weight: np.ndarray | None = None

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        n = self.Q.shape[0]
        self.goal = np.asarray(self.goal, dtype=float)
        if self.goal.ndim == 1:
            self.goal = self.goal[None, :]
        if self.terminal_weight is None:
            self.terminal_weight = np.zeros((n, n))
        self.terminal_weight = np.atleast_2d(np.asarray(self.terminal_weight, dtype=float))
        errs = self.validation_errors()
        if errs:
            raise ValueError("; ".join(errs))

    def validation_errors(self):
        errs = []
        n = self.Q.shape[0]
        for name, M in (("Q", self.Q), ("terminal_weight", self.terminal_weight)):
            if M.shape != (n, n):
                errs.append(f"{name} has shape {M.shape}, expected {(n, n)}")
            elif np.linalg.eigvalsh(symmetrize(M))[0] < -1e-12:
                errs.append(f"{name} is not positive semi-definite")
        if self.R.shape[0] != self.R.shape[1] or np.linalg.eigvalsh(symmetrize(self.R))[0] <= 0:
            errs.append("R must be square positive definite")
        if not (self.lam > 0):
            errs.append("lam must be positive")
        if not (self.dt > 0):
            errs.append("dt must be positive")
        else:
            k = self.horizon / self.dt
            if abs(k - round(k)) > 1e-9 * max(1.0, k) or round(k) < 1:
                errs.append(f"horizon {self.horizon} is not a positive integer multiple of dt {self.dt}")
        if self.goal.shape[1] != n:
            errs.append(f"goal has dim {self.goal.shape[1]}, expected {n}")
        return errs

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def steps(self):
        return int(round(self.horizon / self.dt))

    def goal_at(self, j):
        return self.goal[min(j, len(self.goal) - 1)]

    def state_cost(self, x, j=0):
        e = np.asarray(x) - self.goal_at(j)
        return float(e @ self.Q @ e)

    def terminal_cost(self, x, j=0):
        e = np.asarray(x) - self.goal_at(j)
        return float(e @ self.terminal_weight @ e)

    def weight(self, j, terminal):
        """Canonical precision of the exponentiated cost at chain step ``j``."""
        C = (2.0 * self.dt / self.lam) * self.Q
        if terminal:
            C = C + (2.0 / self.lam) * self.terminal_weight
        return symmetrize(C)

    def with_horizon_steps(self, steps):
        return CostSpec(self.Q, self.R, self.lam, self.dt, steps * self.dt, self.goal, self.terminal_weight)

    def to_dict(self):
        return {"Q": self.Q.tolist(), "R": self.R.tolist(), "lam": self.lam, "dt": self.dt,
                "horizon": self.horizon, "goal": self.goal.tolist(),
                "terminal_weight": self.terminal_weight.tolist()}


@dataclass
class DesirabilityEval:
    log_psi: float
    grad_log_psi: np.ndarray | None = None
    scales: list = field(default_factory=list)
    precisions: list = field(default_factory=list)
    lam: float = 1.0
    beliefs: list = field(default_factory=list)
    # gradient of log Psi with respect to the predicted next-state mean
    next_grad_log_psi: np.ndarray | None = None

    @property
    def psi(self):
        return math.exp(self.log_psi)

    @property
    def grad(self):
        if self.grad_log_psi is None:
            return None
        return self.psi * self.grad_log_psi

    @property
    def value(self):
        return -self.lam * self.log_psi


def _gauss_fold(S, P, eta):
    """int N(x'; m, S) exp(-x'P x'/2 + eta x') dx' as a function of m.

    Returns (log scale, P_hat, eta_hat, const, M1inv, K) such that the
    integral equals exp(log_scale + const - m P_hat m / 2 + eta_hat m).
    """
    n = P.shape[0]
    M1 = np.eye(n) + S @ P
    M1inv = np.linalg.inv(M1)
    sign, logdet = np.linalg.slogdet(M1)
    if sign <= 0:
        raise FloatingPointError("I + S P is not positive definite")
    K = symmetrize(M1inv @ S)
    P_hat = symmetrize(P @ M1inv)
    eta_hat = M1inv.T @ eta
    return -0.5 * logdet, P_hat, eta_hat, 0.5 * float(eta @ K @ eta), M1inv, K


def one_step_desirability(belief: GaussianBelief, cost: CostSpec, t_index=None):
    """Expected exponentiated one-step cost under a Gaussian belief.

    Returns ``(psi, scale, precision)`` with
    ``psi = scale * exp(-(mu - g)^T precision (mu - g) / 2)``. ``t_index`` is
    the chain step (1..H) the cost belongs to; the terminal weight is added
    at ``t_index == cost.steps`` (the default).
    """
    if t_index is None:
        t_index = cost.steps
    P = cost.weight(t_index, t_index >= cost.steps)
    n = P.shape[0]
    S = belief.cov
    M1 = np.eye(n) + S @ P
    sign, logdet = np.linalg.slogdet(M1)
    assert sign > 0, "I + Sigma C must be nonsingular for PSD Sigma, C"
    Qp = symmetrize(P @ np.linalg.inv(M1))
    e = belief.mean - cost.goal_at(t_index)
    scale = math.exp(-0.5 * logdet)
    return scale * math.exp(-0.5 * float(e @ Qp @ e)), scale, Qp


def _chain(model, x0, cost: CostSpec, controls=None, with_grad=False, t0=0, process_noise=True,
           noise=None):
    """Forward belief pass then backward fold; see module docstring.

    With ``with_grad`` there are 2n tangent directions: the first n seeded at
    ``x0``, the last n at the predicted next-state mean (its covariance held
    fixed). The second set is where a control applied now enters.

    ``noise`` is the per-step process-noise covariance added to each
    transition; by default the model's own noise estimate. It is treated as a
    fixed parameter (not differentiated).
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    n = x0.size
    H = cost.steps
    m_ctrl = model.n_control
    if controls is None:
        controls = np.zeros((H, m_ctrl))
    controls = np.asarray(controls, dtype=float).reshape(H, m_ctrl)
    if not process_noise:
        noise = np.zeros((n, n))
    elif noise is None:
        noise = model.noise_cov()
    else:
        noise = np.atleast_2d(np.asarray(noise, dtype=float))

    mus = [x0]
    covs = [np.zeros((n, n))]
    As = []
    if with_grad:
        # dmus[j][k] = d mu_j / d seed_k
        dmus = [np.vstack([np.eye(n), np.zeros((n, n))])]
        dcovs = [np.zeros((2 * n, n, n))]
        dAs = []
    for j in range(H):
        b = GaussianBelief.__new__(GaussianBelief)
        b.mean, b.cov, b.t = mus[j], covs[j], 0.0
        m, V = _joint(b, controls[j])
        mo = model_moments(model, m, V, derivs=with_grad)
        Tx = mo.T[:n, :]
        C = covs[j] @ Tx
        mus.append(mus[j] + mo.M)
        # near-singular chains (rank-deficient noise, near-deterministic GP
        # outputs) see round-off beyond the strict belief tolerance
        covs.append(psd_repair(covs[j] + mo.S + C + C.T + noise, tol=CHAIN_PSD_TOL, what="propagated covariance"))
        As.append(np.eye(n) + Tx.T)
        if with_grad:
            s = _sensitivities_from_moments(mo, covs[j])
            dm, dS = dmus[j], dcovs[j]
            dmus.append(dm @ s.dmu_dmu.T + np.einsum("akl,dkl->da", s.dmu_dS, dS))
            dcovs.append(np.einsum("abk,dk->dab", s.dS_dmu, dm) + np.einsum("abkl,dkl->dab", s.dS_dS, dS))
            if j == 0:
                dmus[1][n:] = np.eye(n)
                dcovs[1][n:] = 0.0
            dAs.append(np.einsum("aek,dk->dae", s.dA_dmu, dm) + np.einsum("aekl,dkl->dae", s.dA_dS, dS))

    P = cost.weight(H, True)
    g = cost.goal_at(t0 + H)
    eta = P @ g
    c = -0.5 * float(g @ P @ g)
    if with_grad:
        dP = np.zeros((2 * n, n, n))
        deta = np.zeros((2 * n, n))
        dc = np.zeros(2 * n)
    scales = [0.0] * H
    precisions = [None] * H
    for j in range(H - 1, -1, -1):
        A = As[j]
        if j == 0:
            a = mus[1]
            Sc = covs[1]
        else:
            a = mus[j + 1] - A @ mus[j]
            # a difference of nearly equal matrices on noise-free channels
            Sc = psd_repair(covs[j + 1] - A @ covs[j] @ A.T, tol=CHAIN_PSD_TOL, what="conditional covariance")
        lnS, P_hat, eta_hat, kq, M1inv, K = _gauss_fold(Sc, P, eta)
        scales[j] = math.exp(lnS)
        precisions[j] = P_hat
        cpr = c + lnS + kq
        if with_grad:
            if j == 0:
                da = dmus[1]
                dSc = dcovs[1]
            else:
                dA = dAs[j]
                da = dmus[j + 1] - np.einsum("dae,e->da", dA, mus[j]) - dmus[j] @ A.T
                AS = A @ covs[j]
                t1 = np.einsum("dae,ef->daf", dA, covs[j] @ A.T)
                dSc = dcovs[j + 1] - t1 - np.swapaxes(t1, 1, 2) - A @ dcovs[j] @ A.T
            dM1 = dSc @ P + Sc @ dP
            dlnS = -0.5 * np.einsum("ij,dji->d", M1inv, dM1)
            dK = -M1inv @ dM1 @ K + M1inv @ dSc
            dP_hat = dP @ M1inv - P @ M1inv @ dM1 @ M1inv
            deta_hat = np.einsum("ji,dj->di", M1inv, deta - np.einsum("dji,j->di", dM1, eta_hat))
            dcpr = dc + dlnS + deta @ (K @ eta) + 0.5 * np.einsum("i,dij,j->d", eta, dK, eta)
        if j == 0:
            log_psi = cpr - 0.5 * float(a @ P_hat @ a) + float(eta_hat @ a)
            grad = None
            if with_grad:
                grad = (dcpr - da @ (P_hat @ a) - 0.5 * np.einsum("i,dij,j->d", a, dP_hat, a)
                        + deta_hat @ a + da @ eta_hat)
            break
        Px = A.T @ P_hat @ A
        r = eta_hat - P_hat @ a
        eta_x = A.T @ r
        c_x = cpr - 0.5 * float(a @ P_hat @ a) + float(eta_hat @ a)
        Cj = cost.weight(j, False)
        gj = cost.goal_at(t0 + j)
        P = symmetrize(Px + Cj)
        eta = eta_x + Cj @ gj
        c = c_x - 0.5 * float(gj @ Cj @ gj)
        if with_grad:
            dPx = np.einsum("dea,ef->daf", dA, P_hat @ A)
            dPx = dPx + np.swapaxes(dPx, 1, 2) + A.T @ dP_hat @ A
            dr = deta_hat - dP_hat @ a - da @ P_hat
            deta_x = np.einsum("dea,e->da", dA, r) + dr @ A
            dc_x = (dcpr - da @ (P_hat @ a) - 0.5 * np.einsum("i,dij,j->d", a, dP_hat, a)
                    + deta_hat @ a + da @ eta_hat)
            dP, deta, dc = dPx, deta_x, dc_x
    beliefs = [GaussianBelief(mus[j], covs[j], (t0 + j) * cost.dt) for j in range(H + 1)]
    if grad is None:
        return DesirabilityEval(log_psi, None, scales, precisions, cost.lam, beliefs)
    return DesirabilityEval(log_psi, grad[:n], scales, precisions, cost.lam, beliefs, grad[n:])


def desirability(model, x, cost: CostSpec, controls=None, t0=0, noise=None) -> DesirabilityEval:
    """Psi at ``x`` with the belief chain driven by ``controls`` (zeros by default)."""
    return _chain(model, x, cost, controls, with_grad=False, t0=t0, noise=noise)


def desirability_gradient(model, x, cost: CostSpec, controls=None, t0=0, noise=None) -> DesirabilityEval:
    """Psi and its state gradient (``grad_log_psi`` is the ratio grad Psi / Psi)."""
    return _chain(model, x, cost, controls, with_grad=True, t0=t0, noise=noise)


def plant_noise(plant, x, dt):
    """Per-step transition noise ``B(x) Sigma B(x)^T dt`` of a plant at ``x``."""
    B = plant.B(np.asarray(x, dtype=float))
    return symmetrize(B @ plant.noise_cov @ B.T * dt)


def optimal_control(ev: DesirabilityEval, G, cost: CostSpec, wrt="next"):
    """u = lam R^-1 G^T (grad Psi / Psi).

    ``wrt="next"`` takes the gradient at the predicted next-state mean, where
    ``G u dt`` acts under the Euler discretization; ``wrt="state"`` takes it
    at the current state. The two agree as dt -> 0; only the former reproduces
    the discrete-time Riccati controls on linear plants.
    """
    if ev.log_psi < math.log(UNDERFLOW_FLOOR):
        raise DesirabilityUnderflow(
            f"log Psi = {ev.log_psi:.1f} is below the underflow floor; increase lam or shorten the horizon")
    G = np.atleast_2d(np.asarray(G, dtype=float))
    g = ev.next_grad_log_psi if wrt == "next" and ev.next_grad_log_psi is not None else ev.grad_log_psi
    return cost.lam * np.linalg.solve(cost.R, G.T @ g)


@dataclass
class PiDiagnostic:
    passed: bool
    residual: float
    channel_residual: float
    message: str


def validate_pi_assumption(cost: CostSpec, noise_cov, G, B, tol=1e-6) -> PiDiagnostic:
    """Check that noise enters through the actuated channels and R = lam * Sigma^-1.

    The effective control-channel noise covariance is ``Sigma_u = G^+ B Sigma B^T G^+T``.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Sw = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    Gp = np.linalg.pinv(G)
    # column space of B within column space of G
    chan = float(np.linalg.norm(B - G @ (Gp @ B)))
    Su = Gp @ B @ Sw @ B.T @ Gp.T
    try:
        target = cost.lam * np.linalg.inv(Su)
        res = float(np.linalg.norm(cost.R - target))
    except np.linalg.LinAlgError:
        res = float("inf")
    scale = max(1.0, float(np.linalg.norm(cost.R)))
    ok = chan <= tol * max(1.0, float(np.linalg.norm(B))) and res <= tol * scale
    msg = "ok" if ok else f"R - lam*Sigma_u^-1 residual {res:.3e}, channel residual {chan:.3e}"
    return PiDiagnostic(ok, res, chan, msg)
