"""Independent-output Gaussian process regression for state transitions.

One GP per state dimension maps a joint state-control vector to that
dimension's transition ``dx``. Kernels are squared exponential with ARD
lengthscales; noise sits on the Gram diagonal only.

Fitting works on standardized data. The fitted model additionally caches
"raw-space" arrays (lengthscales, signal variance, weights and inverse Gram
rescaled by the normalization statistics) so that moment matching can be
done directly on unnormalized beliefs.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, cholesky, LinAlgError, solve_triangular

JITTER_START = 1e-8
JITTER_MAX = 1e-4

# box on log-hyperparameters in normalized units; the noise floor matches
# the starting jitter (sigma_n^2 = 1e-8)
LOG_LENGTHSCALE_BOUNDS = (math.log(1e-2), math.log(1e3))
LOG_SIGNAL_BOUNDS = (math.log(1e-3), math.log(1e2))
LOG_NOISE_BOUNDS = (math.log(1e-4), math.log(1e1))


class InputShapeError(ValueError):
    pass


class ConditioningError(RuntimeError):
    pass


class FitError(RuntimeError):
    pass


@dataclass
class TransitionDataset:
    inputs: np.ndarray
    outputs: np.ndarray
    n_state: int
    n_control: int

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.outputs = np.atleast_2d(np.asarray(self.outputs, dtype=float))
        if self.inputs.shape[0] != self.outputs.shape[0] or self.inputs.shape[0] < 1:
            raise InputShapeError("inputs and outputs need equal, nonzero length")
        if self.inputs.shape[1] != self.n_state + self.n_control:
            raise InputShapeError(f"inputs have dim {self.inputs.shape[1]}, expected {self.n_state + self.n_control}")
        if self.outputs.shape[1] != self.n_state:
            raise InputShapeError(f"outputs have dim {self.outputs.shape[1]}, expected {self.n_state}")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.outputs))):
            raise ValueError("dataset contains non-finite entries")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def input_dim(self):
        return self.n_state + self.n_control

    def append(self, other: "TransitionDataset", cap: int | None = None) -> "TransitionDataset":
        """Concatenate, evicting the oldest records beyond ``cap``."""
        X = np.vstack([self.inputs, other.inputs])
        Y = np.vstack([self.outputs, other.outputs])
        if cap is not None and len(X) > cap:
            X, Y = X[-cap:], Y[-cap:]
        return TransitionDataset(X, Y, self.n_state, self.n_control)

    def header(self):
        n, m = self.n_state, self.n_control
        return ([f"x_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(m)]
                + [f"dx_{i + 1}" for i in range(n)])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for row in np.hstack([self.inputs, self.outputs]):
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "TransitionDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        n = sum(h.startswith("x_") for h in header)
        m = sum(h.startswith("u_") for h in header)
        if sum(h.startswith("dx_") for h in header) != n or len(header) != 2 * n + m:
            raise InputShapeError(f"unrecognized dataset header {header}")
        arr = np.array(body, dtype=float).reshape(len(body), len(header))
        return cls(arr[:, :n + m], arr[:, n + m:], n, m)


@dataclass
class Hyperparams:
    """SE-kernel hyperparameters for one output dimension.

    ``lengthscales`` holds the ARD lengthscales; the kernel's weight matrix is
    ``W = diag(lengthscales**-2)``.
    """
    signal_std: float
    noise_std: float
    lengthscales: np.ndarray

    def __post_init__(self):
        self.lengthscales = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if not (self.signal_std > 0 and self.noise_std > 0 and np.all(self.lengthscales > 0)):
            raise ValueError("hyperparameters must be positive")

    @property
    def W(self):
        return np.diag(self.lengthscales ** -2.0)

    def to_log(self):
        return np.concatenate([np.log(self.lengthscales), [math.log(self.signal_std), math.log(self.noise_std)]])

    @classmethod
    def from_log(cls, theta):
        theta = np.asarray(theta, dtype=float)
        return cls(float(np.exp(theta[-2])), float(np.exp(theta[-1])), np.exp(theta[:-2]))

    def to_dict(self):
        return {"signal_std": self.signal_std, "noise_std": self.noise_std,
                "lengthscales": [float(v) for v in self.lengthscales]}


def kernel_eval(p: Hyperparams, a, b, include_noise=False, same_record=None):
    """Squared-exponential kernel value between two inputs.

    The noise variance is added only when ``include_noise`` is set and the two
    arguments are the same training record. ``same_record`` defaults to an
    identity check on the arguments.
    """
    if same_record is None:
        same_record = a is b
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape or a.shape != p.lengthscales.shape:
        raise InputShapeError(f"kernel inputs {a.shape}, {b.shape} vs lengthscales {p.lengthscales.shape}")
    d = (a - b) / p.lengthscales
    k = p.signal_std ** 2 * math.exp(-0.5 * float(d @ d))
    if include_noise and same_record:
        k += p.noise_std ** 2
    return k


def _sq_dists(X, Z, lengthscales):
    A = X / lengthscales
    B = Z / lengthscales
    d = np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def _se_gram(X, lengthscales, signal_std):
    return signal_std ** 2 * np.exp(-0.5 * _sq_dists(X, X, lengthscales))


def _cholesky_jittered(K, noise_var):
    """Cholesky of ``K + (noise_var + jitter) I`` with escalating jitter."""
    jitter = JITTER_START
    n = K.shape[0]
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            L = cholesky(K + (noise_var + jitter) * np.eye(n), lower=True)
            return L, jitter
        except LinAlgError:
            jitter *= 10.0
    raise ConditioningError(f"Gram matrix not positive definite even with jitter {JITTER_MAX:g}")


def _lml(X, y, theta, with_grad=True):
    """Log marginal likelihood of one output and its gradient in log-params."""
    D = X.shape[1]
    ell = np.exp(theta[:D])
    sf, sn = math.exp(theta[D]), math.exp(theta[D + 1])
    N = X.shape[0]
    Kse = _se_gram(X, ell, sf)
    L, _ = _cholesky_jittered(Kse, sn ** 2)
    alpha = cho_solve((L, True), y)
    val = -0.5 * float(y @ alpha) - float(np.sum(np.log(np.diag(L)))) - 0.5 * N * math.log(2 * math.pi)
    if not with_grad:
        return val, None
    Kinv = cho_solve((L, True), np.eye(N))
    A = np.outer(alpha, alpha) - Kinv
    AK = A * Kse
    grad = np.empty(D + 2)
    for d in range(D):
        diff = X[:, d][:, None] - X[:, d][None, :]
        grad[d] = 0.5 * np.sum(AK * diff ** 2) / ell[d] ** 2
    grad[D] = np.sum(AK)
    grad[D + 1] = sn ** 2 * np.trace(A)
    return val, grad


def log_marginal_likelihood(data: TransitionDataset, params, with_grad=False):
    """Per-output log marginal likelihood on the data as given (no standardization).

    Returns an array of length ``n_state``; with ``with_grad`` also a list of
    gradients with respect to ``Hyperparams.to_log()``.
    """
    vals, grads = [], []
    for a, p in enumerate(params):
        v, g = _lml(data.inputs, data.outputs[:, a], p.to_log(), with_grad)
        vals.append(v)
        grads.append(g)
    if with_grad:
        return np.array(vals), grads
    return np.array(vals)


@dataclass
class FitOptions:
    restarts: int = 5
    max_iter: int = 200
    seed: int = 0
    tol: float = 1e-7
    # hyperparameters are optimized on at most this many records (random
    # subset); the posterior always conditions on the full dataset
    max_opt_points: int | None = None
    # lower bound on the noise std in standardized units; raising it trades a
    # little bias on noise-free outputs for a better-conditioned Gram matrix
    min_noise_std: float = 1e-4
    # inputs the model should ignore (e.g. a translation-invariant cart
    # position); their lengthscales are pinned at the upper bound
    ignore_inputs: tuple = ()


def _project(theta, D, log_noise_lo=LOG_NOISE_BOUNDS[0], pinned=()):
    out = theta.copy()
    out[:D] = np.clip(out[:D], *LOG_LENGTHSCALE_BOUNDS)
    out[list(pinned)] = LOG_LENGTHSCALE_BOUNDS[1]
    out[D] = np.clip(out[D], *LOG_SIGNAL_BOUNDS)
    out[D + 1] = np.clip(out[D + 1], max(log_noise_lo, LOG_NOISE_BOUNDS[0]), LOG_NOISE_BOUNDS[1])
    return out


def _ascend(X, y, theta0, max_iter, tol, log_noise_lo=LOG_NOISE_BOUNDS[0], pinned=()):
    """Projected gradient ascent with Barzilai-Borwein steps and backtracking.

    Returns the final log-parameters, their likelihood and the trace of
    accepted likelihood values (non-decreasing by construction).
    """
    D = X.shape[1]
    theta = _project(theta0, D, log_noise_lo, pinned)
    f, g = _lml(X, y, theta)
    if not np.isfinite(f):
        raise FitError("non-finite likelihood at initial hyperparameters")
    trace = [f]
    step = 0.1 / max(1.0, float(np.max(np.abs(g))))
    for _ in range(max_iter):
        accepted = False
        for _ in range(30):
            cand = _project(theta + step * g, D, log_noise_lo, pinned)
            move = cand - theta
            if not np.any(move):
                break
            try:
                f_new, g_new = _lml(X, y, cand)
            except ConditioningError:
                f_new = -np.inf
            if np.isfinite(f_new) and f_new >= f + 1e-4 * float(g @ move):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        s, dg = move, g_new - g
        theta, g, f_old, f = cand, g_new, f, f_new
        trace.append(f)
        curv = -float(s @ dg)
        step = float(s @ s) / curv if curv > 1e-12 else 2.0 * step
        step = min(step, 10.0)
        if f - f_old < tol * max(1.0, abs(f)):
            break
    return theta, f, trace


def _standardize(data):
    Xm = data.inputs.mean(0)
    Xs = data.inputs.std(0)
    Xs = np.where(Xs > 1e-12, Xs, 1.0)
    Ym = data.outputs.mean(0)
    Ys = data.outputs.std(0)
    Ys = np.where(Ys > 1e-12, Ys, 1.0)
    return Xm, Xs, Ym, Ys


def default_init(input_dim, n_out):
    return [Hyperparams(1.0, 0.1, np.ones(input_dim)) for _ in range(n_out)]


@dataclass
class GpModel:
    """Fitted dynamics model.

    ``params`` are in standardized units. ``lml_traces`` keeps the accepted
    likelihood values of the winning optimizer run for each output.
    """
    dataset: TransitionDataset
    params: list
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray
    lml_traces: list = field(default_factory=list)

    def __post_init__(self):
        self._factorize()

    @property
    def n_state(self):
        return self.dataset.n_state

    @property
    def n_control(self):
        return self.dataset.n_control

    @property
    def input_dim(self):
        return self.dataset.input_dim

    def _factorize(self):
        Xn = (self.dataset.inputs - self.in_mean) / self.in_std
        Yn = (self.dataset.outputs - self.out_mean) / self.out_std
        self._Xn = Xn
        self.gram_factor, self.alpha, self._Kinv_n = [], [], []
        N = Xn.shape[0]
        for a, p in enumerate(self.params):
            K = _se_gram(Xn, p.lengthscales, p.signal_std)
            L, _ = _cholesky_jittered(K, p.noise_std ** 2)
            self.gram_factor.append(L)
            self.alpha.append(cho_solve((L, True), Yn[:, a]))
            self._Kinv_n.append(cho_solve((L, True), np.eye(N)))
        # raw-space equivalents: k_raw = out_std^2 * k_norm with lengthscales
        # scaled by in_std
        s = self.out_std
        self.raw_inputs = self.dataset.inputs
        self.raw_lengthscales = np.array([p.lengthscales * self.in_std for p in self.params])
        self.raw_signal_var = np.array([p.signal_std ** 2 for p in self.params]) * s ** 2
        self.raw_noise_var = np.array([p.noise_std ** 2 for p in self.params]) * s ** 2
        self.raw_beta = np.array([al / s[a] for a, al in enumerate(self.alpha)])
        self.raw_Kinv = np.array([Ki / s[a] ** 2 for a, Ki in enumerate(self._Kinv_n)])

    def noise_cov(self):
        return np.diag(self.raw_noise_var)

    def to_dict(self, inline_data=True, dataset_path=None):
        d = {
            "n_state": self.n_state,
            "n_control": self.n_control,
            "params": [p.to_dict() for p in self.params],
            "in_mean": self.in_mean.tolist(), "in_std": self.in_std.tolist(),
            "out_mean": self.out_mean.tolist(), "out_std": self.out_std.tolist(),
        }
        if inline_data:
            d["inputs"] = self.dataset.inputs.tolist()
            d["outputs"] = self.dataset.outputs.tolist()
        else:
            d["dataset_path"] = str(dataset_path)
        return d

    def save(self, path, inline_data=True, dataset_path=None):
        Path(path).write_text(json.dumps(self.to_dict(inline_data, dataset_path), indent=1))

    @classmethod
    def from_dict(cls, d, base_dir=None):
        if "inputs" in d:
            data = TransitionDataset(np.array(d["inputs"]), np.array(d["outputs"]), d["n_state"], d["n_control"])
        else:
            p = Path(d["dataset_path"])
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            data = TransitionDataset.from_csv(p)
        params = [Hyperparams(q["signal_std"], q["noise_std"], np.array(q["lengthscales"])) for q in d["params"]]
        return cls(data, params, np.array(d["in_mean"]), np.array(d["in_std"]),
                   np.array(d["out_mean"]), np.array(d["out_std"]))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()), base_dir=Path(path).parent)


def fit(data: TransitionDataset, init=None, opts: FitOptions | None = None) -> GpModel:
    """Maximize the per-output marginal likelihood on standardized data."""
    opts = opts or FitOptions()
    if len(data) < 2:
        raise FitError("need at least two records to fit")
    D, n = data.input_dim, data.n_state
    init = init or default_init(D, n)
    Xm, Xs, Ym, Ys = _standardize(data)
    Xn = (data.inputs - Xm) / Xs
    Yn = (data.outputs - Ym) / Ys
    rng = np.random.default_rng(opts.seed)
    if opts.max_opt_points is not None and len(data) > opts.max_opt_points:
        idx = np.sort(rng.choice(len(data), opts.max_opt_points, replace=False))
        Xo, Yo = Xn[idx], Yn[idx]
    else:
        Xo, Yo = Xn, Yn
    params, traces = [], []
    for a in range(n):
        theta0 = init[a].to_log()
        best = None
        for r in range(max(1, opts.restarts)):
            start = theta0 if r == 0 else theta0 + rng.normal(0.0, 1.0, theta0.shape)
            try:
                theta, f, trace = _ascend(Xo, Yo[:, a], start, opts.max_iter, opts.tol,
                                          math.log(opts.min_noise_std), opts.ignore_inputs)
            except ConditioningError:
                if r == 0:
                    raise
                continue
            if best is None or f > best[1]:
                best = (theta, f, trace)
        if best is None or not np.isfinite(best[1]):
            raise FitError(f"optimizer diverged on output {a}")
        params.append(Hyperparams.from_log(best[0]))
        traces.append(best[2])
    return GpModel(data, params, Xm, Xs, Ym, Ys, traces)


def predict(model: GpModel, Xq):
    """Posterior latent mean and variance at many query points, shape (q, n)."""
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    if Xq.shape[1] != model.input_dim:
        raise InputShapeError(f"query dim {Xq.shape[1]} != {model.input_dim}")
    Qn = (Xq - model.in_mean) / model.in_std
    means = np.empty((Xq.shape[0], model.n_state))
    vars_ = np.empty_like(means)
    for a, p in enumerate(model.params):
        k = p.signal_std ** 2 * np.exp(-0.5 * _sq_dists(Qn, model._Xn, p.lengthscales))
        means[:, a] = k @ model.alpha[a]
        # triangular solve keeps the variance accurate on ill-conditioned Grams
        w = solve_triangular(model.gram_factor[a], k.T, lower=True)
        v = p.signal_std ** 2 - np.sum(w * w, 0)
        vars_[:, a] = np.maximum(v, 0.0)
    return means * model.out_std + model.out_mean, vars_ * model.out_std ** 2


def predict_point(model: GpModel, x):
    m, v = predict(model, np.asarray(x, dtype=float)[None, :])
    return m[0], v[0]
