"""Experiment orchestration: trial loop, ablation grid, horizon sweep, exports.

Each seed of a run writes to ``<output_dir>/seed_<seed>/``:

    manifest.json  config, config hash, seed, package version, completion flag
    trials.csv     one row per trial (reward, model diagnostics, truncation)
    steps.csv      one row per environment step
    dataset.csv    every transition collected
    timing.csv     wall-clock seconds per phase (not covered by determinism)
    trace.jsonl    optional planner trace (contains wall-clock, likewise)

Everything except timing.csv and trace.jsonl is a deterministic function of
the config and seed.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
import zlib
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__, dynmodel, envs, plan, propagate

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "PETS_OUTPUT_ROOT"

DEFAULT_GRID = ("D-E", "P-E", "P-DS", "P-MM", "P-TS1", "P-TSinf", "DE-E", "DE-TS1", "DE-TSinf",
                "PE-E", "PE-DS", "PE-MM", "PE-TS1", "PE-TSinf")


def derive_seed(master: int, *labels) -> int:
    """Stable 63-bit seed from a master seed and a path of labels."""
    key = [zlib.crc32(str(x).encode()) if not isinstance(x, (int, np.integer)) else int(x) for x in labels]
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(key))
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


@dataclasses.dataclass
class ExperimentConfig:
    env: str = "cartpole"
    model: dynmodel.ModelSpec = dataclasses.field(default_factory=dynmodel.ModelSpec)
    planner: plan.PlannerConfig = dataclasses.field(default_factory=plan.PlannerConfig)
    trials: int = 20
    task_horizon: Optional[int] = None
    seeds: List[int] = dataclasses.field(default_factory=lambda: [0])
    output_dir: Optional[str] = None
    horizons: List[int] = dataclasses.field(default_factory=list)
    noise_fractions: List[float] = dataclasses.field(default_factory=list)
    grid: List[str] = dataclasses.field(default_factory=list)
    save_checkpoint: bool = False
    trace: bool = False

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = dynmodel.ModelSpec(**self.model)
        if isinstance(self.planner, dict):
            self.planner = plan.PlannerConfig(**self.planner)
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        envs.make_env(self.env)
        for cell in self.grid:
            parse_cell(cell)

    @property
    def horizon_steps(self) -> int:
        return self.task_horizon or envs.get_spec(self.env).task_horizon

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        d["planner"] = self.planner.to_dict()
        return d

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(kw)
        return ExperimentConfig.from_dict(d)


def parse_cell(label: str):
    """Splits an ablation label like ``PE-TS1`` into (kind, scheme)."""
    kind, _, scheme = label.partition("-")
    if kind not in dynmodel.MODEL_KINDS:
        raise ValueError(f"bad model class in {label!r}")
    return kind, propagate.canonical_scheme(scheme)


def canonical_cell(label: str) -> str:
    """Label of the run a grid cell actually performs.

    A single deterministic network has no randomness to propagate, so every
    scheme reduces to D-E.
    """
    kind, scheme = parse_cell(label)
    if kind == "D":
        return "D-E"
    return f"{kind}-{scheme}"


# ---------------------------------------------------------------- logs


@dataclasses.dataclass
class TrialRecord:
    trial: int
    reward: float
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    model_mse: float = float("nan")
    model_nll: float = float("nan")
    truncated: bool = False
    train_s: float = 0.0
    plan_s: float = 0.0


@dataclasses.dataclass
class TrialLog:
    seed: int
    config_hash: str
    trials: List[TrialRecord] = dataclasses.field(default_factory=list)
    complete: bool = False
    error: str = ""

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.trials])


def _fmt(v) -> str:
    return repr(float(v))


def write_trial_log(directory, tlog: TrialLog, config: ExperimentConfig) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "trials.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "seed", "reward", "n_steps", "model_mse", "model_nll", "truncated"])
        for t in tlog.trials:
            w.writerow([t.trial, tlog.seed, _fmt(t.reward), len(t.rewards), _fmt(t.model_mse),
                        _fmt(t.model_nll), int(t.truncated)])
    spec = envs.get_spec(config.env)
    with open(os.path.join(directory, "steps.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "t", *[f"s_{i}" for i in range(spec.d_s)],
                    *[f"a_{i}" for i in range(spec.d_a)], "reward"])
        for t in tlog.trials:
            for i in range(len(t.rewards)):
                w.writerow([t.trial, i, *map(_fmt, t.states[i]), *map(_fmt, t.actions[i]), _fmt(t.rewards[i])])
    with open(os.path.join(directory, "timing.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "train_s", "plan_s"])
        for t in tlog.trials:
            w.writerow([t.trial, f"{t.train_s:.3f}", f"{t.plan_s:.3f}"])
    manifest = {"config": config.to_dict(), "config_hash": tlog.config_hash, "seed": tlog.seed,
                "version": __version__, "complete": tlog.complete, "error": tlog.error}
    manifest["config"].pop("output_dir")
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def read_trial_rewards(run_dir) -> Dict[int, np.ndarray]:
    """Per-seed trial rewards from a run directory written by :func:`run_experiment`."""
    out = {}
    for name in sorted(os.listdir(run_dir)):
        path = os.path.join(run_dir, name, "trials.csv")
        if name.startswith("seed_") and os.path.exists(path):
            with open(path, newline="") as fh:
                rows = list(csv.DictReader(fh))
            out[int(name[5:])] = np.array([float(r["reward"]) for r in rows])
    return out


# ---------------------------------------------------------------- trial loop


def _run_seed(config: ExperimentConfig, seed: int, out_dir: Optional[str]) -> TrialLog:
    env = envs.make_env(config.env, seed=derive_seed(seed, "env"))
    spec = env.spec
    desc = dynmodel.Descriptor.from_env_spec(spec)
    reward = envs.reward_fn(spec.reward_id)
    dataset = dynmodel.TransitionDataset(desc)
    T = config.horizon_steps
    tlog = TrialLog(seed, config.config_hash())
    trace_fh = None
    if out_dir and config.trace:
        os.makedirs(out_dir, exist_ok=True)
        trace_fh = open(os.path.join(out_dir, "trace.jsonl"), "w")
    model = None
    try:
        for k in range(config.trials):
            train_s = 0.0
            if k > 0:
                t0 = time.perf_counter()
                model = dynmodel.train(dataset, config.model, derive_seed(seed, "train", k))
                train_s = time.perf_counter() - t0
            rec = _run_trial(env, model, config, reward, T, derive_seed(seed, "trial", k), trace_fh, k)
            rec.train_s = train_s
            traj = dynmodel.TransitionDataset(desc, rec.states[:-1], rec.actions, rec.states[1:])
            if model is not None and len(traj):
                (mse, nll), = dynmodel.diagnostics_accuracy(model, [traj])
                rec.model_mse, rec.model_nll = mse, nll
            dataset.add(traj.states, traj.actions, traj.next_states)
            rec.states = rec.states[:-1]
            tlog.trials.append(rec)
            log.info("seed %d trial %d reward %.3f (train %.1fs, plan %.1fs)",
                     seed, k, rec.reward, rec.train_s, rec.plan_s)
        tlog.complete = True
    except Exception as exc:  # partial logs are still written, flagged incomplete
        tlog.error = f"{type(exc).__name__}: {exc}"
        log.exception("seed %d aborted", seed)
    finally:
        if trace_fh:
            trace_fh.close()
    if out_dir:
        write_trial_log(out_dir, tlog, config)
        dataset.to_csv(os.path.join(out_dir, "dataset.csv"))
        if config.save_checkpoint and model is not None:
            model.save(os.path.join(out_dir, "model"))
    return tlog


def _run_trial(env, model, config: ExperimentConfig, reward, T: int, seed: int, trace_fh, k: int) -> TrialRecord:
    spec = env.spec
    rng = np.random.default_rng(seed)
    state = env.reset()
    states, actions, rewards = [state], [], []
    cfg = config.planner
    current = None
    truncated = False
    plan_s = 0.0
    for t in range(T):
        if model is None:
            action = rng.uniform(spec.low, spec.high)
        else:
            step = plan.mpc_step(model, state, current, cfg, reward, rng, spec.low, spec.high)
            action, current = step.action, step.plan
            plan_s += step.wall_ms / 1000.0
            if trace_fh:
                trace_fh.write(json.dumps({"trial": k, "t": t, "best_scores": step.info.best_scores,
                                           "action": action.tolist(), "warning": step.info.warning,
                                           "wall_ms": round(step.wall_ms, 3)}) + "\n")
        nxt, r, _ = env.step(action)
        if not np.all(np.isfinite(nxt)):
            truncated = True
            break
        states.append(nxt)
        actions.append(np.asarray(action, dtype=np.float64))
        rewards.append(r)
        state = nxt
    rewards = np.array(rewards)
    return TrialRecord(k, float(np.sum(rewards)), np.array(states), np.array(actions).reshape(-1, spec.d_a),
                       rewards, truncated=truncated, plan_s=plan_s)


def resolve_output_dir(config: ExperimentConfig) -> Optional[str]:
    if config.output_dir:
        return config.output_dir
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root:
        return os.path.join(root, config.config_hash())
    return None


def run_experiment(config: ExperimentConfig) -> Dict[int, TrialLog]:
    """Runs every seed of ``config``; returns {seed: TrialLog}."""
    out = resolve_output_dir(config)
    logs = {}
    for seed in config.seeds:
        logs[seed] = _run_seed(config, seed, os.path.join(out, f"seed_{seed}") if out else None)
    if out:
        export_curves(logs, out)
    return logs


# ---------------------------------------------------------------- sweeps


def final_rewards(logs: Dict[int, TrialLog]) -> np.ndarray:
    return np.array([tl.rewards[-1] if len(tl.trials) else np.nan for tl in logs.values()])


def run_ablation(config: ExperimentConfig) -> dict:
    """Runs each model-class x propagation cell of ``config.grid``.

    Returns {"cells": {label: logs}, "summary": rows}, rows sorted by mean
    final reward then by median, both descending.
    """
    grid = list(config.grid) or list(DEFAULT_GRID)
    out = resolve_output_dir(config)
    cells, rows = {}, []
    for label in grid:
        kind, scheme = parse_cell(label)
        canon = canonical_cell(label)
        model_spec = dataclasses.replace(config.model, kind=kind, ensemble_size=None)
        planner = dataclasses.replace(config.planner, propagation=canon.split("-", 1)[1])
        sub = config.replace(model=model_spec.to_dict(), planner=planner.to_dict(), grid=[],
                             output_dir=os.path.join(out, label) if out else None)
        logs = run_experiment(sub)
        cells[label] = logs
        finals = final_rewards(logs)
        rows.append({"cell": label, "runs_as": canon, "mean_final": float(np.mean(finals)),
                     "median_final": float(np.median(finals)),
                     "finals": [float(v) for v in finals],
                     "complete": all(tl.complete for tl in logs.values())})
    rows.sort(key=lambda r: (-r["mean_final"], -r["median_final"]))
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "summary.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell", "runs_as", "mean_final", "median_final", "finals", "complete"])
            for r in rows:
                w.writerow([r["cell"], r["runs_as"], _fmt(r["mean_final"]), _fmt(r["median_final"]),
                            " ".join(map(_fmt, r["finals"])), int(r["complete"])])
    return {"cells": cells, "summary": rows}


def percentile_band(values, axis=0):
    """Median and 5/95 percentiles, using nearest-rank order statistics."""
    v = np.asarray(values, dtype=np.float64)
    return (np.median(v, axis=axis), np.percentile(v, 5, axis=axis, method="nearest"),
            np.percentile(v, 95, axis=axis, method="nearest"))


def run_horizon_sweep(config: ExperimentConfig, horizons: Sequence[int]) -> dict:
    """Repeats the experiment at each planning horizon.

    Returns {horizon: logs}; with an output directory, also writes
    horizon_summary.csv with median and 5/95 bands per trial.
    """
    out = resolve_output_dir(config)
    results = {}
    for h in horizons:
        planner = dataclasses.replace(config.planner, horizon=int(h))
        sub = config.replace(planner=planner.to_dict(), horizons=[],
                             output_dir=os.path.join(out, f"h_{h}") if out else None)
        results[int(h)] = run_experiment(sub)
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "horizon_summary.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["horizon", "trial", "median", "p05", "p95"])
            for h, logs in results.items():
                R = np.stack([tl.rewards for tl in logs.values()])
                med, lo, hi = percentile_band(R)
                for k in range(R.shape[1]):
                    w.writerow([h, k, _fmt(med[k]), _fmt(lo[k]), _fmt(hi[k])])
    return results


# ---------------------------------------------------------------- export


def max_so_far(rewards) -> np.ndarray:
    return np.maximum.accumulate(np.asarray(rewards, dtype=np.float64))


def export_curves(logs, out_dir) -> dict:
    """Writes curves.csv, band.csv and curves.svg for a set of runs.

    ``logs`` is either {seed: TrialLog} or {seed: reward array}, or a run
    directory to read them from.
    """
    if isinstance(logs, (str, os.PathLike)):
        rewards = read_trial_rewards(logs)
    else:
        rewards = {s: (v.rewards if isinstance(v, TrialLog) else np.asarray(v)) for s, v in logs.items()}
    os.makedirs(out_dir, exist_ok=True)
    seeds = sorted(rewards)
    with open(os.path.join(out_dir, "curves.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "seed", "reward", "reward_maxsofar"])
        for s in seeds:
            for k, (r, m) in enumerate(zip(rewards[s], max_so_far(rewards[s]))):
                w.writerow([k, s, _fmt(r), _fmt(m)])
    n = min((len(rewards[s]) for s in seeds), default=0)
    band = {}
    if n:
        M = np.stack([max_so_far(rewards[s])[:n] for s in seeds])
        band = {"mean": M.mean(axis=0), "lo": M.min(axis=0), "hi": M.max(axis=0)}
        with open(os.path.join(out_dir, "band.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial", "mean_maxsofar", "min_maxsofar", "max_maxsofar"])
            for k in range(n):
                w.writerow([k, _fmt(band["mean"][k]), _fmt(band["lo"][k]), _fmt(band["hi"][k])])
        with open(os.path.join(out_dir, "curves.svg"), "w") as fh:
            fh.write(_svg(band))
    return band


def _svg(band, width=480, height=300, pad=40) -> str:
    mean, lo, hi = band["mean"], band["lo"], band["hi"]
    n = len(mean)
    ymin, ymax = float(np.min(lo)), float(np.max(hi))
    if ymax - ymin < 1e-12:
        ymax = ymin + 1.0

    def xy(k, v):
        x = pad + (width - 2 * pad) * (k / max(n - 1, 1))
        y = height - pad - (height - 2 * pad) * (v - ymin) / (ymax - ymin)
        return f"{x:.2f},{y:.2f}"

    upper = " ".join(xy(k, v) for k, v in enumerate(hi))
    lower = " ".join(xy(k, v) for k, v in reversed(list(enumerate(lo))))
    line = " ".join(xy(k, v) for k, v in enumerate(mean))
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
            f'<rect width="100%" height="100%" fill="white"/>\n'
            f'<polygon points="{upper} {lower}" fill="#9ecae1" fill-opacity="0.5"/>\n'
            f'<polyline points="{line}" fill="none" stroke="#08519c" stroke-width="2"/>\n'
            f'<text x="{pad}" y="{pad - 10}" font-size="12">max reward so far '
            f'[{ymin:.3g}, {ymax:.3g}] over {n} trials</text>\n</svg>\n')
