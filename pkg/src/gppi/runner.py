"""Pipeline stages behind the command line: collect, train, run, validate, report.

Artifacts live under ``<out>/seed_<k>/``: ``dataset.csv`` (collect),
``model.json`` (train-gp), and per-method episode and trace CSVs plus a
``report_<method>.json``. CSV outputs depend only on (config, seed);
wall-clock timings go to the JSON reports.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import oracles
from .baseline import receding_baseline_run
from .config import ExperimentConfig
from .controller import receding_horizon_run, wrap_angles
from .gp import GpModel, TransitionDataset, fit
from .iterative import iterate
from .plants import PlantSpec, collect_rollouts


class MissingArtifact(FileNotFoundError):
    pass


@dataclass
class RunReport:
    method: str
    plant: str
    seed: int
    cost_trace: list
    samples: int
    terminal_state: list
    terminal_cost: float
    final_cost: float
    success: bool | None = None
    # running state cost (x_T - g)^T Q (x_T - g) at the wrapped final state;
    # comparable across methods even when the task has no terminal weight
    final_state_cost: float | None = None
    seconds: float = 0.0
    stage_seconds: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    error: str | None = None

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def seed_dir(out, seed) -> Path:
    d = Path(out) / f"seed_{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def posture_success(plant: PlantSpec, x, goal, angle_tol=0.2, vel_tol=0.5):
    """Goal posture reached: wrapped angles within ``angle_tol``, all velocities below ``vel_tol``."""
    xw = wrap_angles(x, plant.angle_indices, goal)
    ang = all(abs(xw[i] - goal[i]) < angle_tol for i in plant.angle_indices)
    vel = all(abs(x[i]) < vel_tol for i in plant.velocity_indices)
    return bool(ang and vel)


def wrapped_dataset(data: TransitionDataset, plant: PlantSpec, goal) -> TransitionDataset:
    """Training inputs in the planner's angle chart (within pi of the goal)."""
    X = data.inputs.copy()
    X[:, :plant.n] = wrap_angles(X[:, :plant.n], plant.angle_indices, goal)
    return TransitionDataset(X, data.outputs.copy(), data.n_state, data.n_control)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


# ---------------------------------------------------------------------------
# stages


def collect(cfg: ExperimentConfig, seed, out) -> Path:
    """Random-control rollouts from the configured start box."""
    plant = cfg.build_plant()
    d = cfg.data
    data, _ = collect_rollouts(plant, "random", d.rollouts, d.steps, seed=[seed, 0], dt=cfg.cost.dt,
                               init_low=np.array(d.init_low), init_high=np.array(d.init_high), u_std=d.u_std)
    path = seed_dir(out, seed) / "dataset.csv"
    data.to_csv(path)
    return path


def _require(path: Path, stage):
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run `{stage}` first")
    return path


def train(cfg: ExperimentConfig, seed, out) -> Path:
    d = seed_dir(out, seed)
    data = TransitionDataset.from_csv(_require(d / "dataset.csv", "collect"))
    model = fit(data, opts=cfg.fit_options(seed))
    path = d / "model.json"
    model.save(path, inline_data=False, dataset_path="dataset.csv")
    return path


def run_gppi(cfg: ExperimentConfig, seed, out) -> RunReport:
    """Receding-horizon GPPI with ``rounds`` learning episodes before the final one.

    Round r plans with the current model; its transitions (angles in the
    planner's chart) join the training set, capped at ``gp.cap``, and the GP
    is refit. The reported sample count is every transition the model was
    trained on: the collected dataset plus the learning episodes.
    """
    t_start = time.perf_counter()
    d = seed_dir(out, seed)
    plant = cfg.build_plant()
    cost = cfg.build_cost(plant)
    g = cfg.gppi
    model = GpModel.load(_require(d / "model.json", "train-gp"))
    data = model.dataset
    samples = len(data)
    x0 = np.array(g.x0) if g.x0 else None
    streams = np.random.SeedSequence([seed, 1]).spawn(g.rounds + 1)
    stage, trace, files = {}, [], []
    ep, err = None, None
    for r in range(g.rounds + 1):
        t0 = time.perf_counter()
        if r > 0:
            model = fit(data, model.params, cfg.fit_options(seed))
        t1 = time.perf_counter()
        try:
            ep = receding_horizon_run(plant, model, cost, g.episode_steps, streams[r], x0=x0,
                                      u_clip=g.u_clip or None, wrap=g.wrap, known_noise=g.known_noise)
        except (RuntimeError, FloatingPointError) as e:
            err = f"round {r}: {e}"
            ep = None
            break
        stage[f"round_{r}"] = {"fit": t1 - t0, "episode": time.perf_counter() - t1}
        path = d / f"gppi_episode_{r}.csv"
        ep.to_csv(path)
        files.append(path.name)
        trace.append([r, ep.cumulative_cost, ep.terminal_cost, samples])
        if r < g.rounds:
            fresh = wrapped_dataset(ep.dataset(), plant, cost.goal_at(0)) if g.wrap else ep.dataset()
            data = data.append(fresh, cfg.gp.cap)
            samples += len(fresh)
    _write_csv(d / "gppi_trace.csv", ["round", "cumulative_cost", "terminal_cost", "samples"], trace)
    files.append("gppi_trace.csv")
    return _finish("gppi", cfg, plant, cost, seed, d, ep, [t[1] for t in trace], samples, t_start, stage, files,
                   err)


def _finish(method, cfg, plant, cost, seed, d, ep, trace, samples, t_start, stage, files, err):
    if ep is not None:
        xT = ep.final_state
        success = posture_success(plant, xT, cost.goal_at(len(ep.controls))) if plant.angle_indices else None
        rep = RunReport(method, plant.name, seed, trace, int(samples), [float(v) for v in xT],
                        float(ep.terminal_cost), float(ep.cumulative_cost), success)
        T = len(ep.controls)
        rep.final_state_cost = cost.state_cost(wrap_angles(xT, plant.angle_indices, cost.goal_at(T)), T)
    else:
        rep = RunReport(method, plant.name, seed, trace, int(samples), [], float("nan"), float("nan"), False)
    rep.error = err
    rep.seconds = time.perf_counter() - t_start
    rep.stage_seconds = stage
    rep.files = files
    rep.save(d / f"report_{method}.json")
    return rep


def run_igppi(cfg: ExperimentConfig, seed, out) -> RunReport:
    """Iterative GPPI from the zero schedule; record 1 of the trace is plain GPPI."""
    t_start = time.perf_counter()
    d = seed_dir(out, seed)
    plant = cfg.build_plant()
    cost = cfg.build_cost(plant)
    g = cfg.igppi
    data = TransitionDataset.from_csv(_require(d / "dataset.csv", "collect"))
    x0 = np.array(g.x0) if g.x0 else np.zeros(plant.n)
    trace = iterate(plant, cost, x0, g.iterations, g.rollouts, [seed, 2], data=data,
                    fit_opts=cfg.fit_options(seed), gamma=g.gamma, cap=cfg.gp.cap,
                    eval_rollouts=g.eval_rollouts)
    trace.to_csv(d / "igppi_trace.csv")
    (d / "igppi_schedules.json").write_text(trace.schedules_json())
    last = trace.records[-1]
    samples = len(data) + g.iterations * g.rollouts * cost.steps
    rep = RunReport("igppi", plant.name, seed, [r.realized_cost for r in trace.records], samples, [],
                    last.terminal_cost, last.realized_cost, None)
    rep.seconds = time.perf_counter() - t_start
    rep.stage_seconds = {f"iteration_{r.k}": r.seconds for r in trace.records}
    rep.files = ["igppi_trace.csv", "igppi_schedules.json"]
    rep.save(d / "report_igppi.json")
    return rep


def run_baseline(cfg: ExperimentConfig, seed, out) -> RunReport:
    t_start = time.perf_counter()
    d = seed_dir(out, seed)
    plant = cfg.build_plant()
    cost = cfg.build_cost(plant)
    b = cfg.baseline
    x0 = np.array(cfg.gppi.x0) if cfg.gppi.x0 else None
    err, ep, samples = None, None, 0
    try:
        run = receding_baseline_run(plant, cost, b.episode_steps, [seed, 3], paths=b.paths,
                                    iterations=b.iterations, x0=x0, u_clip=b.u_clip or None)
        ep, samples = run.episode, run.samples
        ep.to_csv(d / "baseline_episode.csv")
    except (RuntimeError, FloatingPointError) as e:
        err = str(e)
    trace = [ep.cumulative_cost] if ep is not None else []
    _write_csv(d / "baseline_trace.csv", ["cumulative_cost", "terminal_cost", "samples"],
               [[ep.cumulative_cost, ep.terminal_cost, samples]] if ep is not None else [])
    files = ["baseline_episode.csv", "baseline_trace.csv"] if ep is not None else ["baseline_trace.csv"]
    return _finish("baseline", cfg, plant, cost, seed, d, ep, trace, samples, t_start,
                   {"episode": time.perf_counter() - t_start}, files, err)


def validate(out=None, names=None):
    """Run the oracle suite; returns (all passed, results) and writes ``validate.json``."""
    results = oracles.run_all(names)
    ok = all(r.passed for r in results)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "validate.json").write_text(
            json.dumps({"passed": ok, "checks": [r.to_dict() for r in results]}, indent=1))
    return ok, results


PLOT_SCRIPT = '''"""Plot the tables written by `gppi report` (needs matplotlib)."""
import csv
import sys
from collections import defaultdict

import matplotlib.pyplot as plt

root = sys.argv[1] if len(sys.argv) > 1 else "."
series = defaultdict(list)
with open(f"{root}/cost_vs_iteration.csv") as fh:
    for row in csv.DictReader(fh):
        series[(row["method"], row["seed"])].append((int(row["iteration"]), float(row["cost"])))
fig, ax = plt.subplots(1, 2, figsize=(10, 4))
for (method, seed), pts in sorted(series.items()):
    ax[0].plot(*zip(*pts), marker="o", label=f"{method} seed {seed}")
ax[0].set_xlabel("iteration")
ax[0].set_ylabel("cumulative cost")
with open(f"{root}/cost_vs_samples.csv") as fh:
    rows = list(csv.DictReader(fh))
for method in sorted({r["method"] for r in rows}):
    sel = [r for r in rows if r["method"] == method]
    ax[1].scatter([int(r["samples"]) for r in sel], [float(r["terminal_cost"]) for r in sel], label=method)
ax[1].set_xscale("log")
ax[1].set_xlabel("sampled transitions")
ax[1].set_ylabel("terminal cost")
ax[1].legend()
fig.tight_layout()
fig.savefig(f"{root}/report.png", dpi=120)
'''


def _median(values):
    vals = [v for v in values if v is not None]
    return float(np.nanmedian(vals)) if vals else None


def report(out) -> dict:
    """Aggregate every ``report_*.json`` under ``out`` into CSV tables and a summary."""
    out = Path(out)
    reports = sorted((RunReport.load(p) for p in out.glob("seed_*/report_*.json")),
                     key=lambda r: (r.method, r.seed))
    if not reports:
        raise MissingArtifact(f"no run reports under {out}")
    _write_csv(out / "cost_vs_iteration.csv", ["method", "seed", "iteration", "cost"],
               [[r.method, r.seed, i, c] for r in reports for i, c in enumerate(r.cost_trace)])
    _write_csv(out / "cost_vs_samples.csv",
               ["method", "seed", "samples", "terminal_cost", "final_state_cost", "final_cost", "success"],
               [[r.method, r.seed, r.samples, r.terminal_cost, r.final_state_cost, r.final_cost, r.success]
                for r in reports])
    (out / "plot_report.py").write_text(PLOT_SCRIPT)
    summary = {}
    for method in sorted({r.method for r in reports}):
        sel = [r for r in reports if r.method == method]
        succ = [r.success for r in sel if r.success is not None]
        summary[method] = {
            "runs": len(sel),
            "samples_total": int(sum(r.samples for r in sel)),
            "samples_per_run": [r.samples for r in sel],
            "median_terminal_cost": float(np.nanmedian([r.terminal_cost for r in sel])),
            "median_final_state_cost": _median([r.final_state_cost for r in sel]),
            "successes": int(sum(succ)) if succ else None,
            "seconds": float(sum(r.seconds for r in sel)),
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary
