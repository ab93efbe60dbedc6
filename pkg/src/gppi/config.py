"""Experiment configuration: an INI file with one section per stage.

Every key has a default, so a file naming only the plant is complete.
Vectors are comma-separated; cost weights are the diagonals of Q and Q_f.
``r`` left empty means R = lam / noise_var, which satisfies the
path-integral assumption by construction.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .desirability import CostSpec, validate_pi_assumption
from .gp import FitOptions
from .plants import PlantSpec, plant_from_params


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


PI = math.pi


@dataclass
class ExperimentSection:
    method: str = "gppi"
    seeds: tuple = (0,)
    out: str = "runs"
    strict: bool = False


@dataclass
class PlantSection:
    name: str = "cartpole"
    noise_std: float = 0.2
    cart_mass: float = 0.5
    pole_mass: float = 0.5
    pole_length: float = 0.5
    link_masses: tuple = (0.25, 0.25)
    link_lengths: tuple = (0.25, 0.25)
    gravity: float = 9.81


@dataclass
class CostSection:
    q: tuple = (0.2, 0.5, 3.0, 0.02)
    q_terminal: tuple = (0.0, 0.0, 0.0, 0.0)
    r: tuple = ()
    lam: float = 0.1
    dt: float = 0.05
    horizon: float = 0.75
    goal: tuple = (0.0, 0.0, PI, 0.0)


@dataclass
class GpSection:
    restarts: int = 1
    max_iter: int = 100
    max_opt_points: int = 0
    min_noise_std: float = 1e-2
    cap: int = 2000
    # input columns the GP ignores; cart position does not enter either plant's dynamics
    ignore_inputs: tuple = (0,)


@dataclass
class DataSection:
    rollouts: int = 40
    steps: int = 5
    u_std: float = 5.0
    init_low: tuple = (-1.0, -2.0, -0.5, -6.0)
    init_high: tuple = (1.0, 2.0, 2 * PI + 0.5, 6.0)


@dataclass
class GppiSection:
    episode_steps: int = 120
    rounds: int = 1
    x0: tuple = ()
    u_clip: float = 0.0
    known_noise: bool = True
    wrap: bool = True


@dataclass
class IgppiSection:
    iterations: int = 5
    rollouts: int = 2
    gamma: float = 1.0
    eval_rollouts: int = 4
    x0: tuple = ()


@dataclass
class BaselineSection:
    paths: int = 1000
    iterations: int = 1
    episode_steps: int = 120
    u_clip: float = 0.0


SECTIONS = {
    "experiment": ExperimentSection,
    "plant": PlantSection,
    "cost": CostSection,
    "gp": GpSection,
    "data": DataSection,
    "gppi": GppiSection,
    "igppi": IgppiSection,
    "baseline": BaselineSection,
}

METHODS = ("gppi", "igppi", "baseline")


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    plant: PlantSection = field(default_factory=PlantSection)
    cost: CostSection = field(default_factory=CostSection)
    gp: GpSection = field(default_factory=GpSection)
    data: DataSection = field(default_factory=DataSection)
    gppi: GppiSection = field(default_factory=GppiSection)
    igppi: IgppiSection = field(default_factory=IgppiSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    warnings: list = field(default_factory=list, compare=False)

    # -- derived objects

    def build_plant(self) -> PlantSpec:
        p = self.plant
        if p.name == "cartpole":
            params = dict(cart_mass=p.cart_mass, pole_mass=p.pole_mass, pole_length=p.pole_length,
                          gravity=p.gravity, noise_std=p.noise_std)
        else:
            params = dict(cart_mass=p.cart_mass, link_masses=tuple(p.link_masses),
                          link_lengths=tuple(p.link_lengths), gravity=p.gravity, noise_std=p.noise_std)
        return plant_from_params(p.name, params)

    def build_cost(self, plant: PlantSpec | None = None) -> CostSpec:
        c = self.cost
        plant = plant or self.build_plant()
        if c.r:
            R = np.diag(c.r)
        else:
            Su = np.linalg.pinv(plant.G(np.zeros(plant.n))) @ plant.B(np.zeros(plant.n))
            Su = Su @ plant.noise_cov @ Su.T
            R = c.lam * np.linalg.inv(Su)
        return CostSpec(np.diag(c.q), R, c.lam, c.dt, c.horizon, np.array(c.goal), np.diag(c.q_terminal))

    def fit_options(self, seed=0) -> FitOptions:
        g = self.gp
        return FitOptions(restarts=g.restarts, max_iter=g.max_iter, seed=seed,
                          max_opt_points=g.max_opt_points or None, min_noise_std=g.min_noise_std,
                          ignore_inputs=g.ignore_inputs)

    # -- serialization

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _fmt(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_ini())


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw, default, name, errors):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "yes", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s for s in (x.strip() for x in raw.split(",")) if s]
            if name in ("seeds", "ignore_inputs"):
                return tuple(int(x) for x in items)
            return tuple(float(eval_number(x)) for x in items)
        return raw.strip()
    except (ValueError, TypeError):
        errors.append(f"{name}: cannot parse {raw!r}")
        return default


def eval_number(text):
    """A float, optionally written with ``pi`` (e.g. ``pi``, ``2*pi``, ``-pi/2``)."""
    t = text.replace(" ", "").lower()
    if "pi" not in t:
        return float(t)
    num, _, rest = t.partition("pi")
    coef = 1.0 if num in ("", "+") else -1.0 if num == "-" else float(num.rstrip("*"))
    div = float(rest[1:]) if rest.startswith("/") else 1.0
    if rest and not rest.startswith("/"):
        raise ValueError(text)
    return coef * PI / div


def from_ini(text, strict=None) -> ExperimentConfig:
    """Parse and validate; raises :class:`ConfigError` listing every problem."""
    cp = configparser.ConfigParser()
    errors = []
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError([str(e)]) from e
    kwargs = {}
    for name in cp.sections():
        if name not in SECTIONS:
            errors.append(f"unknown section [{name}]")
    for name, cls in SECTIONS.items():
        sec = cls()
        if cp.has_section(name):
            known = {f.name: f for f in fields(cls)}
            vals = {}
            for key, raw in cp.items(name):
                if key not in known:
                    errors.append(f"[{name}] unknown key {key!r}")
                    continue
                vals[key] = _parse(raw, getattr(sec, key), key, errors)
            sec = dataclasses.replace(sec, **vals)
        kwargs[name] = sec
    cfg = ExperimentConfig(**kwargs)
    if strict is not None:
        cfg.experiment.strict = strict
    errors += validation_errors(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_config(path, strict=None) -> ExperimentConfig:
    with open(path) as fh:
        return from_ini(fh.read(), strict)


def validation_errors(cfg: ExperimentConfig) -> list:
    """All dimension, range and PI-assumption problems (warnings go to ``cfg.warnings``)."""
    errs = []
    if cfg.experiment.method not in METHODS:
        errs.append(f"method must be one of {METHODS}")
    if not cfg.experiment.seeds:
        errs.append("at least one seed is required")
    if cfg.plant.name not in ("cartpole", "cdip"):
        errs.append(f"unknown plant {cfg.plant.name!r}")
        return errs
    for k in ("noise_std", "cart_mass", "pole_mass", "pole_length", "gravity"):
        if not getattr(cfg.plant, k) > 0:
            errs.append(f"plant {k} must be positive")
    try:
        plant = cfg.build_plant()
    except (ValueError, TypeError) as e:
        errs.append(f"plant: {e}")
        return errs
    n, m = plant.n, plant.m
    c = cfg.cost
    for key, vec, size in (("q", c.q, n), ("q_terminal", c.q_terminal, n), ("goal", c.goal, n)):
        if len(vec) != size:
            errs.append(f"cost {key} has {len(vec)} entries, plant state has {size}")
    if c.r and len(c.r) != m:
        errs.append(f"cost r has {len(c.r)} entries, plant has {m} controls")
    if any(v < 0 for v in c.q + c.q_terminal):
        errs.append("cost weights must be nonnegative")
    if c.r and any(v <= 0 for v in c.r):
        errs.append("cost r must be positive")
    g = cfg.gp
    if g.restarts < 1 or g.max_iter < 1 or g.cap < 2:
        errs.append("gp restarts, max_iter must be >= 1 and cap >= 2")
    if not g.min_noise_std > 0:
        errs.append("gp min_noise_std must be positive")
    if any(not 0 <= i < n + m for i in g.ignore_inputs):
        errs.append(f"gp ignore_inputs must index the {n + m} model inputs")
    d = cfg.data
    if d.rollouts < 1 or d.steps < 1:
        errs.append("data rollouts and steps must be >= 1")
    if len(d.init_low) != n or len(d.init_high) != n:
        errs.append(f"data init_low/init_high need {n} entries")
    for sec, key in (("gppi", "x0"), ("igppi", "x0")):
        x0 = getattr(getattr(cfg, sec), key)
        if x0 and len(x0) != n:
            errs.append(f"{sec} x0 has {len(x0)} entries, plant state has {n}")
    if cfg.gppi.episode_steps < 1 or cfg.gppi.rounds < 0:
        errs.append("gppi episode_steps must be >= 1 and rounds >= 0")
    if cfg.igppi.iterations < 1 or cfg.igppi.rollouts < 1 or cfg.igppi.eval_rollouts < 1:
        errs.append("igppi iterations, rollouts and eval_rollouts must be >= 1")
    if not 0 < cfg.igppi.gamma <= 1:
        errs.append("igppi gamma must lie in (0, 1]")
    if cfg.baseline.paths < 1 or cfg.baseline.iterations < 1 or cfg.baseline.episode_steps < 1:
        errs.append("baseline paths, iterations and episode_steps must be >= 1")
    if errs:
        return errs
    try:
        cost = cfg.build_cost(plant)
    except ValueError as e:
        return [f"cost: {e}"]
    x = np.zeros(n)
    diag = validate_pi_assumption(cost, plant.noise_cov, plant.G(x), plant.B(x))
    if not diag.passed:
        msg = f"PI assumption violated: {diag.message} (residual {diag.residual:.3e})"
        if cfg.experiment.strict:
            errs.append(msg)
        else:
            cfg.warnings.append(msg)
    return errs


def default_config(plant="cartpole") -> ExperimentConfig:
    """The shipped defaults; ``plant="cdip"`` swaps in the double-pendulum task."""
    if plant == "cartpole":
        return ExperimentConfig()
    return ExperimentConfig(
        experiment=ExperimentSection(method="igppi"),
        plant=PlantSection(name="cdip", noise_std=0.05),
        cost=CostSection(q=(1.0, 0.05, 0.2, 0.01, 0.2, 0.01), q_terminal=(1.0, 0.2, 0.2, 0.02, 0.2, 0.02),
                         lam=0.0025, dt=0.05, horizon=1.0, goal=(0.3, 0.0, 0.0, 0.0, 0.0, 0.0)),
        data=DataSection(rollouts=30, steps=10, u_std=2.0, init_low=(-0.2, -0.5, -0.3, -1.0, -0.3, -1.0),
                         init_high=(0.5, 0.5, 0.3, 1.0, 0.3, 1.0)),
        igppi=IgppiSection(iterations=5, rollouts=2),
    )
