"""Sampling-based MPC: CEM and random shooting over H-step action sequences."""

from __future__ import annotations

import dataclasses
import logging
import time
from typing import Callable, Optional

import numpy as np

from . import propagate

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-6
OPTIMIZERS = ("CEM", "RS")


@dataclasses.dataclass
class PlannerConfig:
    """MPC settings.

    ``population * iterations`` candidates are scored per CEM call;
    random shooting uses the same total as its sample count.
    """

    horizon: int = 35
    population: int = 500
    iterations: int = 5
    elites: int = 50
    optimizer: str = "CEM"
    particles: int = 20
    propagation: str = "TS1"
    warm_start: bool = True

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 1 <= self.elites <= self.population:
            raise ValueError("elite count must lie in [1, population]")
        if self.iterations < 1 or self.particles < 1:
            raise ValueError("iterations and particles must be >= 1")
        self.optimizer = self.optimizer.upper()
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        self.propagation = propagate.canonical_scheme(self.propagation)

    @property
    def budget(self) -> int:
        return self.population * self.iterations

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclasses.dataclass
class ActionPlan:
    """Per-step sampling distribution over an action sequence.

    Attributes:
        mean: (H, d_a) sampling mean.
        var: (H, d_a) sampling variance.
        low, high: (d_a,) action bounds.
    """

    mean: np.ndarray
    var: np.ndarray
    low: np.ndarray
    high: np.ndarray

    @classmethod
    def initial(cls, horizon: int, low, high) -> "ActionPlan":
        low = np.asarray(low, dtype=np.float64)
        high = np.asarray(high, dtype=np.float64)
        mean = np.tile(np.clip(0.0, low, high), (horizon, 1))
        var = np.tile(((high - low) / 4.0) ** 2, (horizon, 1))
        return cls(mean, var, low, high)

    @property
    def horizon(self) -> int:
        return self.mean.shape[0]

    def shifted(self) -> "ActionPlan":
        """Drops the first step, appends a zero-action step, resets variance."""
        fresh = ActionPlan.initial(self.horizon, self.low, self.high)
        fresh.mean[:-1] = self.mean[1:]
        return fresh


@dataclasses.dataclass
class OptimizerInfo:
    best_scores: list
    evaluations: int
    warning: bool = False


def evaluate_candidates(model, s0, actions, cfg: PlannerConfig, reward_fn: Callable, seed) -> np.ndarray:
    """Expected return of each candidate sequence in ``actions`` (C, H, d_a)."""
    res = propagate.rollout(model, s0, actions, cfg.propagation, cfg.particles, reward_fn,
                            np.random.default_rng(seed))
    return res.returns


def evaluate_candidate(model, s0, actions, cfg: PlannerConfig, reward_fn: Callable, seed) -> float:
    return float(evaluate_candidates(model, s0, np.asarray(actions)[None], cfg, reward_fn, seed)[0])


def cem_optimize(objective: Callable, plan: ActionPlan, cfg: PlannerConfig, rng):
    """Cross-entropy method.

    Args:
        objective: maps candidates (N, H, d_a) to scores (N,); higher is better.
        plan: starting sampling distribution.
        cfg: population, iteration and elite counts.
        rng: seed or Generator.

    Returns:
        (elite mean sequence, final ActionPlan, OptimizerInfo). Samples
        outside the bounds are clamped.
    """
    rng = np.random.default_rng(rng)
    mean, var = plan.mean.copy(), plan.var.copy()
    best = -np.inf
    info = OptimizerInfo(best_scores=[], evaluations=0)
    for _ in range(cfg.iterations):
        noise = rng.standard_normal((cfg.population,) + mean.shape)
        pop = np.clip(mean + np.sqrt(var) * noise, plan.low, plan.high)
        scores = np.asarray(objective(pop), dtype=np.float64)
        info.evaluations += len(pop)
        valid = np.isfinite(scores) & (scores > propagate.TRUNCATION_REWARD * 0.5)
        if not np.any(valid):
            info.warning = True
            log.warning("every CEM candidate hit the truncation penalty; keeping current mean")
            info.best_scores.append(best)
            break
        scores = np.where(np.isfinite(scores), scores, -np.inf)
        elite_idx = np.argsort(scores, kind="stable")[-cfg.elites:]
        elites = pop[elite_idx]
        best = max(best, float(scores[elite_idx[-1]]))
        info.best_scores.append(best)
        mean = propagate.stable_mean(elites, axis=0)
        var = np.maximum(elites.var(axis=0), VAR_FLOOR)
    final = ActionPlan(mean, var, plan.low, plan.high)
    return np.clip(mean, plan.low, plan.high), final, info


def random_shooting(objective: Callable, low, high, horizon: int, n: int, rng):
    """Best of ``n`` uniform sequences. Returns (sequence, OptimizerInfo)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng)
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    cands = rng.uniform(low, high, size=(n, horizon, len(low)))
    scores = np.asarray(objective(cands), dtype=np.float64)
    scores = np.where(np.isfinite(scores), scores, -np.inf)
    i = int(np.argmax(scores))
    return cands[i], OptimizerInfo(best_scores=[float(scores[i])], evaluations=n)


def make_objective(model, s0, cfg: PlannerConfig, reward_fn: Callable, rng: np.random.Generator):
    """Objective that propagates candidates from ``s0``, drawing a fresh seed per call."""

    def objective(actions):
        return evaluate_candidates(model, s0, actions, cfg, reward_fn, rng.integers(2 ** 63))

    return objective


@dataclasses.dataclass
class StepResult:
    action: np.ndarray
    plan: ActionPlan
    info: OptimizerInfo
    sequence: np.ndarray
    wall_ms: float


def mpc_step(model, state, plan_prev: Optional[ActionPlan], cfg: PlannerConfig, reward_fn: Callable,
             rng, low=None, high=None) -> StepResult:
    """Optimises an H-step sequence from ``state`` and returns its first action.

    ``plan_prev`` is the warm-start plan (already shifted) or None for a
    cold start, in which case ``low``/``high`` give the action bounds.
    """
    state = np.asarray(state, dtype=np.float64)
    if not np.all(np.isfinite(state)):
        raise ValueError("state must be finite")
    rng = np.random.default_rng(rng)
    if plan_prev is None or not cfg.warm_start:
        if plan_prev is not None:
            low, high = plan_prev.low, plan_prev.high
        plan_prev = ActionPlan.initial(cfg.horizon, low, high)
    t0 = time.perf_counter()
    objective = make_objective(model, state, cfg, reward_fn, rng)
    if cfg.optimizer == "CEM":
        seq, final, info = cem_optimize(objective, plan_prev, cfg, rng)
    else:
        seq, info = random_shooting(objective, plan_prev.low, plan_prev.high, cfg.horizon, cfg.budget, rng)
        final = ActionPlan(seq.copy(), plan_prev.var.copy(), plan_prev.low, plan_prev.high)
    wall = 1000.0 * (time.perf_counter() - t0)
    action = np.clip(seq[0], plan_prev.low, plan_prev.high)
    return StepResult(action, final.shifted(), info, seq, wall)
