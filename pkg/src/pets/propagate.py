"""Uncertainty propagation of action sequences through a dynamics model.

Schemes:
    TS1    particles resample their ensemble member at every step.
    TSinf  particles keep a balanced, fixed member assignment.
    E      a single particle follows the mixture mean.
    MM     all particles are redrawn from a Gaussian fitted to every
           (particle, member) successor, pooled per candidate.
    DS     each particle is redrawn from a Gaussian fitted to its own
           successors across members.

A model is any object with ``n_members``, ``deterministic`` and
``moments(states, actions, members=None)`` returning predicted state deltas
(see :class:`pets.dynmodel.EnsembleModel`). Every function here is batched
over candidate action sequences: ``actions`` is (H, d_a) or (C, H, d_a) and
results always carry the candidate axis first.
"""

from __future__ import annotations

import csv
import dataclasses
from typing import Callable, Optional

import numpy as np

SCHEMES = ("TS1", "TSinf", "E", "MM", "DS")
TRUNCATION_REWARD = -1e6

_ALIASES = {"TS∞": "TSinf", "TSINF": "TSinf", "TS-INF": "TSinf", "TSinf": "TSinf"}


def canonical_scheme(name: str) -> str:
    key = _ALIASES.get(name, _ALIASES.get(name.upper(), name.upper()))
    if key not in SCHEMES:
        raise ValueError(f"unknown propagation scheme {name!r}")
    return key


@dataclasses.dataclass
class RolloutResult:
    """Particle trajectories and rewards for a batch of candidates.

    Attributes:
        states: (C, H+1, P, d_s) particle states; index 0 is the start.
        rewards: (C, P, H) reward of each particle at each step.
        bootstraps: (C, H, P) member used for each step, or None for
            schemes without per-particle members.
        truncated: (C, P) True where a particle hit a non-finite state.
        scheme: propagation scheme name.
    """

    states: np.ndarray
    rewards: np.ndarray
    bootstraps: Optional[np.ndarray]
    truncated: np.ndarray
    scheme: str

    @property
    def n_particles(self) -> int:
        return self.states.shape[2]

    @property
    def horizon(self) -> int:
        return self.rewards.shape[2]

    @property
    def returns(self) -> np.ndarray:
        """Particle-averaged summed reward per candidate, shape (C,)."""
        return stable_mean(self.rewards.sum(axis=2), axis=1)


@dataclasses.dataclass
class UncertaintyDecomposition:
    """Per-step variance split, each array (C, H+1, d_s)."""

    aleatoric: np.ndarray
    epistemic: np.ndarray


def stable_mean(x, axis):
    """Mean computed as offsets from the first element along ``axis``.

    Exact (bit-identical to the common value) when all entries along the
    axis are equal.
    """
    x = np.asarray(x)
    first = np.take(x, [0], axis=axis)
    return np.squeeze(first, axis=axis) + np.mean(x - first, axis=axis)


def _moments(x, axis):
    first = np.take(x, [0], axis=axis)
    dev = x - first
    shift = np.mean(dev, axis=axis, keepdims=True)
    mean = first + shift
    var = np.mean((dev - shift) ** 2, axis=axis, keepdims=True)
    return np.squeeze(mean, axis=axis), np.squeeze(var, axis=axis)


def assign_bootstraps(P: int, B: int, variant: str, t: int, rng, previous=None) -> np.ndarray:
    """Member index (0-based) for each of P particles at step ``t``.

    TS1 draws uniformly at every step. TSinf returns ``previous`` once it
    exists; otherwise a shuffled balanced map where group sizes differ by
    at most one.
    """
    variant = canonical_scheme(variant)
    if P < 1 or B < 1:
        raise ValueError("P and B must be >= 1")
    rng = np.random.default_rng(rng)
    if variant == "TS1":
        return rng.integers(0, B, size=P)
    if variant != "TSinf":
        raise ValueError("bootstrap assignment applies to TS1 and TSinf only")
    if previous is not None and t > 0:
        return np.asarray(previous)
    return rng.permutation(np.arange(P) % B)


def _as_batch(s0, actions):
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim == 2:
        actions = actions[None]
    if actions.ndim != 3 or actions.shape[1] < 1:
        raise ValueError("actions must be (H, d_a) or (C, H, d_a) with H >= 1")
    s0 = np.asarray(s0, dtype=np.float64)
    return s0, actions


class _Tracker:
    """Shared bookkeeping: state history, rewards and truncation."""

    def __init__(self, s0, actions, P, reward_fn):
        C, H, _ = actions.shape
        d_s = s0.shape[-1]
        self.actions = actions
        self.reward_fn = reward_fn
        self.states = np.empty((C, H + 1, P, d_s))
        self.states[:, 0] = np.broadcast_to(s0, (C, P, d_s))
        self.rewards = np.empty((C, P, H))
        self.alive = np.ones((C, P), dtype=bool)

    def current(self, t):
        return self.states[:, t]

    def action_rows(self, t, P):
        a = self.actions[:, t]
        return np.broadcast_to(a[:, None, :], (a.shape[0], P, a.shape[1]))

    def record_reward(self, t):
        s = self.states[:, t]
        r = self.reward_fn(s, self.action_rows(t, s.shape[1]))
        self.rewards[:, :, t] = np.where(self.alive & np.isfinite(r), r, TRUNCATION_REWARD)

    def advance(self, t, nxt):
        ok = np.all(np.isfinite(nxt), axis=-1)
        self.alive &= ok
        self.states[:, t + 1] = np.where(self.alive[..., None], nxt, self.states[:, t])


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def rollout_ts(model, s0, actions, P: int, variant: str, reward_fn: Callable, rng) -> RolloutResult:
    """Trajectory sampling with TS1 or TSinf member assignment."""
    variant = canonical_scheme(variant)
    if variant not in ("TS1", "TSinf"):
        raise ValueError("rollout_ts handles TS1 and TSinf")
    rng = np.random.default_rng(rng)
    s0, actions = _as_batch(s0, actions)
    C, H, _ = actions.shape
    B = model.n_members
    tr = _Tracker(s0, actions, P, reward_fn)
    boots = np.empty((C, H, P), dtype=np.int64)
    fixed = None
    if variant == "TSinf":
        fixed = np.stack([assign_bootstraps(P, B, "TSinf", 0, rng) for _ in range(C)])
    for t in range(H):
        tr.record_reward(t)
        s = tr.current(t)
        idx = fixed if fixed is not None else rng.integers(0, B, size=(C, P))
        boots[:, t] = idx
        mean, var = model.moments(_flat(s), _flat(tr.action_rows(t, P)), idx.reshape(-1))
        nxt = _flat(s) + mean
        if not model.deterministic:
            nxt = nxt + np.sqrt(var) * rng.standard_normal(nxt.shape)
        tr.advance(t, nxt.reshape(s.shape))
    return RolloutResult(tr.states, tr.rewards, boots, ~tr.alive, variant)


def rollout_e(model, s0, actions, reward_fn: Callable) -> RolloutResult:
    """Propagates the mixture mean of a single particle."""
    s0, actions = _as_batch(s0, actions)
    H = actions.shape[1]
    tr = _Tracker(s0, actions, 1, reward_fn)
    for t in range(H):
        tr.record_reward(t)
        s = tr.current(t)
        means, _ = model.moments(_flat(s), _flat(tr.action_rows(t, 1)))
        nxt = _flat(s) + stable_mean(means, axis=0)
        tr.advance(t, nxt.reshape(s.shape))
    return RolloutResult(tr.states, tr.rewards, None, ~tr.alive, "E")


def _member_samples(model, s, a_rows, rng):
    """Successor of every particle under every member: (B, C, P, d_s)."""
    means, var = model.moments(_flat(s), _flat(a_rows))
    succ = _flat(s)[None] + means
    if not model.deterministic:
        succ = succ + np.sqrt(var) * rng.standard_normal(succ.shape)
    return succ.reshape((model.n_members,) + s.shape)


def rollout_mm(model, s0, actions, P: int, reward_fn: Callable, rng) -> RolloutResult:
    """Moment matching over the pooled (particle, member) fan-out."""
    rng = np.random.default_rng(rng)
    s0, actions = _as_batch(s0, actions)
    C, H, _ = actions.shape
    tr = _Tracker(s0, actions, P, reward_fn)
    for t in range(H):
        tr.record_reward(t)
        s = tr.current(t)
        succ = _member_samples(model, s, tr.action_rows(t, P), rng)
        pooled = np.moveaxis(succ, 0, 1).reshape(C, -1, s.shape[-1])
        mean, var = _moments(pooled, axis=1)
        z = rng.standard_normal(s.shape)
        tr.advance(t, mean[:, None, :] + np.sqrt(var)[:, None, :] * z)
    return RolloutResult(tr.states, tr.rewards, None, ~tr.alive, "MM")


def rollout_ds(model, s0, actions, P: int, reward_fn: Callable, rng) -> RolloutResult:
    """Per-particle moment matching across members only."""
    rng = np.random.default_rng(rng)
    s0, actions = _as_batch(s0, actions)
    H = actions.shape[1]
    tr = _Tracker(s0, actions, P, reward_fn)
    for t in range(H):
        tr.record_reward(t)
        s = tr.current(t)
        succ = _member_samples(model, s, tr.action_rows(t, P), rng)
        mean, var = _moments(succ, axis=0)
        if model.n_members == 1:
            nxt = mean
        else:
            nxt = mean + np.sqrt(var) * rng.standard_normal(s.shape)
        tr.advance(t, nxt)
    return RolloutResult(tr.states, tr.rewards, None, ~tr.alive, "DS")


def rollout(model, s0, actions, scheme: str, P: int, reward_fn: Callable, rng) -> RolloutResult:
    """Dispatches to the propagation scheme named ``scheme``."""
    scheme = canonical_scheme(scheme)
    if scheme in ("TS1", "TSinf"):
        return rollout_ts(model, s0, actions, P, scheme, reward_fn, rng)
    if scheme == "E":
        return rollout_e(model, s0, actions, reward_fn)
    if scheme == "MM":
        return rollout_mm(model, s0, actions, P, reward_fn, rng)
    return rollout_ds(model, s0, actions, P, reward_fn, rng)


def decompose(result: RolloutResult) -> UncertaintyDecomposition:
    """Splits TSinf particle variance into aleatoric and epistemic parts.

    Aleatoric is the mean over members of the within-group variance
    (unbiased, per group); epistemic is the variance across members of the
    group means.
    """
    if result.scheme != "TSinf" or result.bootstraps is None:
        raise ValueError("decomposition needs a TSinf rollout")
    boots = result.bootstraps
    if np.any(boots != boots[:, :1]):
        raise ValueError("bootstrap assignment changes over time")
    C, T, P, d_s = result.states.shape
    alea = np.empty((C, T, d_s))
    epi = np.empty((C, T, d_s))
    for c in range(C):
        groups = [np.flatnonzero(boots[c, 0] == b) for b in np.unique(boots[c, 0])]
        if any(len(g) < 2 for g in groups):
            raise ValueError("each member needs at least two particles")
        x = result.states[c]
        within = np.stack([x[:, g].var(axis=1, ddof=1) for g in groups])
        means = np.stack([x[:, g].mean(axis=1) for g in groups])
        alea[c] = within.mean(axis=0)
        epi[c] = means.var(axis=0)
    return UncertaintyDecomposition(alea, epi)


def write_rollout_csv(path, result: RolloutResult) -> None:
    """Dumps (candidate, particle, step, state..., reward) rows."""
    C, T, P, d_s = result.states.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["candidate", "particle", "step", *[f"s_{i}" for i in range(d_s)], "reward"])
        for c in range(C):
            for p in range(P):
                for t in range(T):
                    r = repr(float(result.rewards[c, p, t])) if t < T - 1 else ""
                    w.writerow([c, p, t, *[repr(float(v)) for v in result.states[c, t, p]], r])
