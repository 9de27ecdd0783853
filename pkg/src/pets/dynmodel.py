"""Learned dynamics: datasets, the D/P/DE/PE model classes, training and diagnostics.

Models predict the state change ``next_state - state`` from featurised
inputs, where angle dimensions are expanded to (sin, cos). Inputs are
standardised with statistics from the full dataset; targets stay in
environment units, so predicted variances are in squared state units.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from typing import List, Optional, Sequence

import numpy as np

from . import diffnet

log = logging.getLogger(__name__)

MODEL_KINDS = ("D", "P", "DE", "PE")
STD_FLOOR = 1e-8
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclasses.dataclass(frozen=True)
class Descriptor:
    """Shape information a model needs about its environment."""

    d_s: int
    d_a: int
    angle_dims: tuple = ()
    action_low: tuple = ()
    action_high: tuple = ()

    @classmethod
    def from_env_spec(cls, spec) -> "Descriptor":
        return cls(spec.d_s, spec.d_a, tuple(spec.angle_dims), tuple(spec.action_low),
                   tuple(spec.action_high))

    @property
    def d_in(self) -> int:
        return self.d_s + len(self.angle_dims) + self.d_a

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d) -> "Descriptor":
        return cls(d["d_s"], d["d_a"], tuple(d["angle_dims"]), tuple(d["action_low"]),
                   tuple(d["action_high"]))


class TransitionDataset:
    """Growing log of (state, action, next_state) records."""

    def __init__(self, descriptor: Descriptor, states=None, actions=None, next_states=None):
        self.descriptor = descriptor
        d = descriptor
        self.states = np.empty((0, d.d_s)) if states is None else np.asarray(states, dtype=np.float64).reshape(-1, d.d_s)
        self.actions = np.empty((0, d.d_a)) if actions is None else np.asarray(actions, dtype=np.float64).reshape(-1, d.d_a)
        self.next_states = (np.empty((0, d.d_s)) if next_states is None
                            else np.asarray(next_states, dtype=np.float64).reshape(-1, d.d_s))
        if not (len(self.states) == len(self.actions) == len(self.next_states)):
            raise ValueError("record arrays must have equal length")
        self._check_finite(self.states, self.actions, self.next_states)

    @staticmethod
    def _check_finite(*arrays):
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise ValueError("transition records must be finite")

    def __len__(self) -> int:
        return len(self.states)

    def add(self, states, actions, next_states) -> None:
        d = self.descriptor
        s = np.asarray(states, dtype=np.float64).reshape(-1, d.d_s)
        a = np.asarray(actions, dtype=np.float64).reshape(-1, d.d_a)
        n = np.asarray(next_states, dtype=np.float64).reshape(-1, d.d_s)
        if not (len(s) == len(a) == len(n)):
            raise ValueError("record arrays must have equal length")
        self._check_finite(s, a, n)
        self.states = np.concatenate([self.states, s])
        self.actions = np.concatenate([self.actions, a])
        self.next_states = np.concatenate([self.next_states, n])

    def subset(self, idx) -> "TransitionDataset":
        return TransitionDataset(self.descriptor, self.states[idx], self.actions[idx], self.next_states[idx])

    def split_holdout(self, fraction: float = 0.1):
        """Splits off the last ``fraction`` of records as a held-out set."""
        n_hold = int(round(len(self) * fraction))
        cut = len(self) - n_hold
        return self.subset(slice(0, cut)), self.subset(slice(cut, None))

    def header(self) -> List[str]:
        d = self.descriptor
        return ([f"s_{i}" for i in range(d.d_s)] + [f"a_{i}" for i in range(d.d_a)]
                + [f"sn_{i}" for i in range(d.d_s)])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for row in np.hstack([self.states, self.actions, self.next_states]):
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, descriptor: Optional[Descriptor] = None) -> "TransitionDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head = rows[0]
        d_s = sum(1 for h in head if h.startswith("s_"))
        d_a = sum(1 for h in head if h.startswith("a_"))
        if descriptor is None:
            descriptor = Descriptor(d_s, d_a)
        elif (descriptor.d_s, descriptor.d_a) != (d_s, d_a):
            raise ValueError("CSV columns do not match descriptor")
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, 2 * d_s + d_a)
        return cls(descriptor, data[:, :d_s], data[:, d_s:d_s + d_a], data[:, d_s + d_a:])


@dataclasses.dataclass
class ModelSpec:
    """Model class and training hyperparameters.

    ``ensemble_size`` of None means 5 for ensembles and 1 otherwise.
    """

    kind: str = "PE"
    ensemble_size: Optional[int] = None
    hidden: tuple = (500, 500, 500)
    epochs: int = 100
    batch_size: int = 32
    reg: float = 0.01
    lr: float = 1e-3
    bootstrap: bool = True

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"model kind must be one of {MODEL_KINDS}")
        if self.ensemble_size is None:
            self.ensemble_size = 5 if self.kind in ("DE", "PE") else 1
        if self.ensemble_size < 1:
            raise ValueError("ensemble size must be >= 1")
        if self.kind in ("D", "P") and self.ensemble_size != 1:
            raise ValueError("D and P models have a single member")
        self.hidden = tuple(int(h) for h in self.hidden)

    @property
    def probabilistic(self) -> bool:
        return self.kind in ("P", "PE")

    @property
    def resample(self) -> bool:
        return self.bootstrap and self.kind in ("DE", "PE")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def featurize(states, actions, descriptor: Descriptor) -> np.ndarray:
    """Builds network inputs: angle dims become (sin, cos), then actions are appended."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    d = descriptor
    if states.shape[-1] != d.d_s or actions.shape[-1] != d.d_a:
        raise ValueError("state/action dimensions do not match descriptor")
    if any(i < 0 or i >= d.d_s for i in d.angle_dims):
        raise IndexError("angle index out of range")
    cols = []
    for i in range(d.d_s):
        if i in d.angle_dims:
            cols.append(np.sin(states[..., i]))
            cols.append(np.cos(states[..., i]))
        else:
            cols.append(states[..., i])
    feats = np.stack(cols, axis=-1)
    return np.concatenate([feats, actions], axis=-1)


def target_of(states, next_states) -> np.ndarray:
    return np.asarray(next_states, dtype=np.float64) - np.asarray(states, dtype=np.float64)


def bootstrap_indices(n: int, n_sets: int, rng) -> np.ndarray:
    """Row indices of ``n_sets`` bootstrap resamples of ``n`` records, shape (n_sets, n)."""
    if n < 1:
        raise ValueError("cannot bootstrap an empty dataset")
    rng = np.random.default_rng(rng)
    return rng.integers(0, n, size=(n_sets, n))


def bootstrap_resample(dataset: TransitionDataset, n_sets: int, rng) -> List[TransitionDataset]:
    """Draws ``n_sets`` datasets of len(dataset) records with replacement."""
    return [dataset.subset(idx) for idx in bootstrap_indices(len(dataset), n_sets, rng)]


@dataclasses.dataclass
class GaussianPrediction:
    mean: np.ndarray
    var: np.ndarray


class EnsembleModel:
    """B trained members sharing input statistics.

    Attributes:
        members: list of :class:`diffnet.NetworkParams`.
        in_mean, in_std: input standardisation statistics.
        descriptor: environment shapes.
        spec: the :class:`ModelSpec` it was trained with.
    """

    def __init__(self, members, in_mean, in_std, descriptor: Descriptor, spec: ModelSpec):
        self.members = list(members)
        self.in_mean = np.asarray(in_mean, dtype=np.float64)
        self.in_std = np.maximum(np.asarray(in_std, dtype=np.float64), STD_FLOOR)
        self.descriptor = descriptor
        self.spec = spec

    @property
    def n_members(self) -> int:
        return len(self.members)

    @property
    def deterministic(self) -> bool:
        return not self.spec.probabilistic

    def normalize(self, feats):
        return (feats - self.in_mean) / self.in_std

    def denormalize(self, z):
        return z * self.in_std + self.in_mean

    def _member_moments(self, b: int, z):
        mean, logvar = diffnet.forward(self.members[b], z)
        var = np.zeros_like(mean) if logvar is None else np.exp(logvar)
        return mean, var

    def moments(self, states, actions, members=None):
        """Predicted delta moments for a batch of rows.

        Args:
            states: (N, d_s). actions: (N, d_a).
            members: None to evaluate every member, giving arrays shaped
                (B, N, d_s); or an int array (N,) choosing one member per
                row, giving (N, d_s).
        """
        z = self.normalize(featurize(states, actions, self.descriptor))
        if members is None:
            out = [self._member_moments(b, z) for b in range(self.n_members)]
            return np.stack([o[0] for o in out]), np.stack([o[1] for o in out])
        members = np.asarray(members)
        mean = np.empty((len(z), self.descriptor.d_s))
        var = np.empty_like(mean)
        for b in range(self.n_members):
            rows = np.flatnonzero(members == b)
            if len(rows):
                mean[rows], var[rows] = self._member_moments(b, z[rows])
        return mean, var

    def predict_member(self, b: int, state, action) -> GaussianPrediction:
        """Delta distribution of member ``b`` (0-based) for one state/action."""
        if not 0 <= b < self.n_members:
            raise IndexError("member index out of range")
        s = np.asarray(state, dtype=np.float64).reshape(1, -1)
        a = np.asarray(action, dtype=np.float64).reshape(1, -1)
        mean, var = self.moments(s, a, np.array([b]))
        return GaussianPrediction(mean[0], var[0])

    def sample_next(self, b: int, state, action, rng) -> np.ndarray:
        pred = self.predict_member(b, state, action)
        if self.deterministic:
            return np.asarray(state, dtype=np.float64) + pred.mean
        rng = np.random.default_rng(rng)
        return np.asarray(state, dtype=np.float64) + pred.mean + np.sqrt(pred.var) * rng.standard_normal(pred.mean.shape)

    # -------------------------------------------------------- persistence

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        for b, p in enumerate(self.members):
            diffnet.save_checkpoint(os.path.join(directory, f"member_{b}.npz"), p)
        manifest = {"spec": self.spec.to_dict(), "descriptor": self.descriptor.to_dict(),
                    "in_mean": self.in_mean.tolist(), "in_std": self.in_std.tolist(),
                    "n_members": self.n_members}
        with open(os.path.join(directory, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2)

    @classmethod
    def load(cls, directory) -> "EnsembleModel":
        with open(os.path.join(directory, "manifest.json")) as fh:
            m = json.load(fh)
        members = [diffnet.load_checkpoint(os.path.join(directory, f"member_{b}.npz"))[0]
                   for b in range(m["n_members"])]
        return cls(members, m["in_mean"], m["in_std"], Descriptor.from_dict(m["descriptor"]),
                   ModelSpec(**m["spec"]))


def mixture_moments(means, variances):
    """Mean, aleatoric and epistemic variance of an equal-weight member mixture.

    ``means`` and ``variances`` are shaped (B, ..., d). The total mixture
    variance is aleatoric + epistemic.
    """
    # offsets from the first member keep identical members exactly at zero spread
    dev = means - means[:1]
    shift = dev.mean(axis=0)
    mean = means[0] + shift
    aleatoric = variances.mean(axis=0)
    epistemic = np.mean((dev - shift) ** 2, axis=0)
    return mean, aleatoric, epistemic


# ---------------------------------------------------------------- training


def fit_member(params: diffnet.NetworkParams, inputs, targets, spec: ModelSpec, rng) -> diffnet.NetworkParams:
    """Minibatch Adam on one member for ``spec.epochs`` passes over its data."""
    kind = "nll" if spec.probabilistic else "mse"
    adam = diffnet.AdamState.zeros(params)
    n = len(inputs)
    bs = min(spec.batch_size, n)
    for epoch in range(spec.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            try:
                grad = diffnet.gradient(params, inputs[idx], targets[idx], kind, spec.reg)
            except FloatingPointError as exc:
                raise FloatingPointError(
                    f"non-finite gradient in epoch {epoch}, batch at {start}: {exc}") from exc
            params, adam = diffnet.adam_step(params, grad, adam, lr=spec.lr)
    return params


def fit_ensemble(inputs, targets, spec: ModelSpec, rng, descriptor: Optional[Descriptor] = None) -> EnsembleModel:
    """Trains an ensemble on already-featurised inputs and delta targets."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(inputs)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(rng)
    in_mean = inputs.mean(axis=0)
    in_std = np.maximum(inputs.std(axis=0), STD_FLOOR)
    z = (inputs - in_mean) / in_std
    d_out = targets.shape[1]
    head = diffnet.PROBABILISTIC if spec.probabilistic else diffnet.DETERMINISTIC
    widths = [inputs.shape[1], *spec.hidden, 2 * d_out if spec.probabilistic else d_out]
    B = spec.ensemble_size
    if spec.resample:
        sets = bootstrap_indices(n, B, rng)
    else:
        sets = np.tile(np.arange(n), (B, 1))
    members = []
    for b in range(B):
        params = diffnet.init_params(widths, head, rng)
        members.append(fit_member(params, z[sets[b]], targets[sets[b]], spec, rng))
    if descriptor is None:
        descriptor = Descriptor(d_s=d_out, d_a=inputs.shape[1] - d_out)
    return EnsembleModel(members, in_mean, in_std, descriptor, spec)


def train(dataset: TransitionDataset, spec: ModelSpec, rng) -> EnsembleModel:
    """Fits the model class in ``spec`` to every record of ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    feats = featurize(dataset.states, dataset.actions, dataset.descriptor)
    targets = target_of(dataset.states, dataset.next_states)
    return fit_ensemble(feats, targets, spec, rng, dataset.descriptor)


def predict_regression(model: EnsembleModel, x):
    """Per-member moments for a model fitted by :func:`fit_ensemble` on raw inputs."""
    z = model.normalize(np.asarray(x, dtype=np.float64))
    out = [model._member_moments(b, z) for b in range(model.n_members)]
    return np.stack([o[0] for o in out]), np.stack([o[1] for o in out])


# ---------------------------------------------------------------- reference models


class LinearGaussianEnsemble:
    """Hand-built ensemble of linear-Gaussian members.

    Member b maps s to ``slopes[b] * s + offsets[b] + gains[b] * sum(a)``
    plus N(0, noise_var[b]) noise per dimension. Used as an analytic
    reference for propagation.
    """

    def __init__(self, slopes, noise_var=0.0, offsets=0.0, gains=0.0, d_s: int = 1, d_a: int = 1):
        self.slopes = np.atleast_1d(np.asarray(slopes, dtype=np.float64))
        B = len(self.slopes)
        self.offsets = np.broadcast_to(np.asarray(offsets, dtype=np.float64), (B,)).copy()
        self.gains = np.broadcast_to(np.asarray(gains, dtype=np.float64), (B,)).copy()
        self.noise_var = np.broadcast_to(np.asarray(noise_var, dtype=np.float64), (B,)).copy()
        self.descriptor = Descriptor(d_s, d_a)

    @property
    def n_members(self) -> int:
        return len(self.slopes)

    @property
    def deterministic(self) -> bool:
        return bool(np.all(self.noise_var == 0.0))

    def moments(self, states, actions, members=None):
        states = np.asarray(states, dtype=np.float64)
        u = np.asarray(actions, dtype=np.float64).sum(axis=-1, keepdims=True)
        if members is None:
            sl, off, g, nv = (v[:, None, None] for v in (self.slopes, self.offsets, self.gains, self.noise_var))
            mean = (sl - 1.0) * states[None] + off + g * u[None]
            return mean, np.broadcast_to(nv, mean.shape).copy()
        b = np.asarray(members)
        mean = (self.slopes[b, None] - 1.0) * states + self.offsets[b, None] + self.gains[b, None] * u
        return mean, np.broadcast_to(self.noise_var[b, None], mean.shape).copy()


class GroundTruthModel:
    """Single deterministic "member" that replays exact environment dynamics."""

    def __init__(self, dynamics, descriptor: Descriptor):
        self.dynamics = dynamics
        self.descriptor = descriptor

    n_members = 1
    deterministic = True

    def moments(self, states, actions, members=None):
        states = np.asarray(states, dtype=np.float64)
        mean = self.dynamics(states, actions) - states
        var = np.zeros_like(mean)
        if members is None:
            return mean[None], var[None]
        return mean, var


# ---------------------------------------------------------------- diagnostics


def diagnostics_one_step(model: EnsembleModel, dataset: TransitionDataset, holdout_fraction: float = 0.1):
    """Sorted one-step prediction report for train and held-out splits.

    Returns a list of dict rows with keys split, dim, rank, target, mean,
    aleatoric_2std and epistemic_2std; rows are sorted by the ground-truth
    target within each (split, dim).
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rows = []
    train_set, hold_set = dataset.split_holdout(holdout_fraction)
    for split, ds in (("train", train_set), ("heldout", hold_set)):
        if len(ds) == 0:
            continue
        means, variances = model.moments(ds.states, ds.actions)
        mean, alea, epi = mixture_moments(means, variances)
        target = target_of(ds.states, ds.next_states)
        for d in range(target.shape[1]):
            order = np.argsort(target[:, d], kind="stable")
            for rank, i in enumerate(order):
                rows.append({"split": split, "dim": d, "rank": rank, "target": float(target[i, d]),
                             "mean": float(mean[i, d]),
                             "aleatoric_2std": float(2.0 * np.sqrt(alea[i, d])),
                             "epistemic_2std": float(2.0 * np.sqrt(epi[i, d]))})
    return rows


def write_rows_csv(path, rows: Sequence[dict]) -> None:
    if not rows:
        open(path, "w").close()
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def mixture_log_density(means, variances, targets, var_floor: float = 1.0):
    """Log density of ``targets`` under the equal-weight member mixture.

    Deterministic members (zero variance) are scored as unit-variance
    Gaussians; ``var_floor`` sets that substitute variance.
    """
    variances = np.where(variances > 0.0, variances, var_floor)
    member_ll = -0.5 * np.sum((targets[None] - means) ** 2 / variances + np.log(variances) + LOG_2PI, axis=-1)
    B = means.shape[0]
    top = member_ll.max(axis=0)
    return top + np.log(np.exp(member_ll - top).sum(axis=0)) - np.log(B), member_ll


def diagnostics_accuracy(model, trajectories: Sequence[TransitionDataset]):
    """One-step MSE and mixture NLL for each held-out trajectory.

    Returns a list of (mse, nll) pairs, both averaged over the trajectory's
    transitions. MSE is summed over state dimensions.
    """
    if len(trajectories) == 0:
        raise ValueError("no trajectories")
    out = []
    for traj in trajectories:
        means, variances = model.moments(traj.states, traj.actions)
        target = target_of(traj.states, traj.next_states)
        mse = float(np.mean(np.sum((means.mean(axis=0) - target) ** 2, axis=-1)))
        ll, _ = mixture_log_density(means, variances, target)
        out.append((mse, float(-np.mean(ll))))
    return out
