"""Analytic benchmark environments and the heteroscedastic sine dataset.

All step and reward functions are vectorised: states carry a trailing state
dimension and actions a trailing action dimension, with any number of
leading batch axes. That lets the same code serve the simulator and the
ground-truth "model" used when planning against exact dynamics.

Angles are measured from the upright position and are never wrapped.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Optional

import numpy as np

# Cartpole constants (kg, m, m/s^2, N, s).
CART_MASS = 1.0
POLE_MASS = 0.1
POLE_HALF_LENGTH = 0.5
GRAVITY = 9.81
FORCE_MAX = 10.0
CARTPOLE_DT = 0.02
CARTPOLE_REWARD_SCALE = 0.6
ACTION_COST = 0.01

# Pendulum constants.
PEND_MASS = 1.0
PEND_LENGTH = 1.0
TORQUE_MAX = 2.0
PENDULUM_DT = 0.05
PENDULUM_REWARD_SCALE = 1.0

MAX_NOISE_FRACTION = 0.2


@dataclasses.dataclass(frozen=True)
class EnvSpec:
    """Static description of an environment.

    Attributes:
        name: registry id.
        d_s: state dimension.
        d_a: action dimension.
        angle_dims: indices of state dimensions holding angles.
        action_low: per-dimension lower action bound.
        action_high: per-dimension upper action bound.
        dt: integration step in seconds.
        task_horizon: steps per episode.
        reward_id: name of the reward function.
        init_state: state every episode starts from.
    """

    name: str
    d_s: int
    d_a: int
    angle_dims: tuple
    action_low: tuple
    action_high: tuple
    dt: float
    task_horizon: int
    reward_id: str
    init_state: tuple

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if len(self.action_low) != self.d_a or len(self.action_high) != self.d_a:
            raise ValueError("action bounds must have d_a entries")
        if len(self.init_state) != self.d_s:
            raise ValueError("init_state must have d_s entries")

    @property
    def low(self) -> np.ndarray:
        return np.asarray(self.action_low, dtype=np.float64)

    @property
    def high(self) -> np.ndarray:
        return np.asarray(self.action_high, dtype=np.float64)


# ---------------------------------------------------------------- cartpole


def cartpole_step(state, action, dt: float = CARTPOLE_DT):
    """Advances the frictionless cartpole by one semi-implicit Euler step.

    State is (x, x_dot, theta, theta_dot) with theta = 0 upright; action is
    the horizontal force on the cart in newtons.
    """
    state = np.asarray(state, dtype=np.float64)
    force = np.asarray(action, dtype=np.float64)[..., 0]
    x, x_dot, th, th_dot = (state[..., i] for i in range(4))
    total = CART_MASS + POLE_MASS
    ml = POLE_MASS * POLE_HALF_LENGTH
    sin, cos = np.sin(th), np.cos(th)
    temp = (force + ml * th_dot ** 2 * sin) / total
    th_acc = (GRAVITY * sin - cos * temp) / (
        POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos ** 2 / total))
    x_acc = temp - ml * th_acc * cos / total
    x_dot = x_dot + dt * x_acc
    th_dot = th_dot + dt * th_acc
    return np.stack([x + dt * x_dot, x_dot, th + dt * th_dot, th_dot], axis=-1)


def cartpole_energy(state):
    """Total mechanical energy (J) of the cartpole, pole modelled as a rod."""
    state = np.asarray(state, dtype=np.float64)
    x_dot, th, th_dot = state[..., 1], state[..., 2], state[..., 3]
    l = POLE_HALF_LENGTH
    kinetic = (0.5 * (CART_MASS + POLE_MASS) * x_dot ** 2
               + POLE_MASS * l * x_dot * th_dot * np.cos(th)
               + 0.5 * POLE_MASS * (4.0 / 3.0) * l ** 2 * th_dot ** 2)
    return kinetic + POLE_MASS * GRAVITY * l * np.cos(th)


def cartpole_reward(state, action):
    """Saturating tip-distance reward minus a quadratic force penalty.

    The tip sits POLE_HALF_LENGTH from the pivot; its target is the upright
    position above the origin. The penalty is ACTION_COST times the squared
    force in units of FORCE_MAX, so the range is [-ACTION_COST, 1].
    """
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    x, th = state[..., 0], state[..., 2]
    l = POLE_HALF_LENGTH
    dx = x + l * np.sin(th)
    dy = l * np.cos(th) - l
    d2 = dx ** 2 + dy ** 2
    return np.exp(-d2 / CARTPOLE_REWARD_SCALE ** 2) - ACTION_COST * np.sum((action / FORCE_MAX) ** 2, axis=-1)


def cartpole_upright(state, x_tol: float = 0.25, th_tol: float = 0.3) -> np.ndarray:
    """True where the pole is within th_tol of upright and the cart near 0."""
    state = np.asarray(state, dtype=np.float64)
    th = np.mod(state[..., 2] + np.pi, 2 * np.pi) - np.pi
    return (np.abs(th) < th_tol) & (np.abs(state[..., 0]) < x_tol)


# ---------------------------------------------------------------- pendulum


def pendulum_step(state, action, dt: float = PENDULUM_DT):
    """Semi-implicit Euler step of a point-mass pendulum; theta = 0 upright."""
    state = np.asarray(state, dtype=np.float64)
    torque = np.asarray(action, dtype=np.float64)[..., 0]
    th, th_dot = state[..., 0], state[..., 1]
    th_acc = (GRAVITY / PEND_LENGTH) * np.sin(th) + torque / (PEND_MASS * PEND_LENGTH ** 2)
    th_dot = th_dot + dt * th_acc
    return np.stack([th + dt * th_dot, th_dot], axis=-1)


def pendulum_energy(state):
    state = np.asarray(state, dtype=np.float64)
    th, th_dot = state[..., 0], state[..., 1]
    return (0.5 * PEND_MASS * PEND_LENGTH ** 2 * th_dot ** 2
            + PEND_MASS * GRAVITY * PEND_LENGTH * np.cos(th))


def pendulum_reward(state, action):
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    th = state[..., 0]
    d2 = 2.0 * PEND_LENGTH ** 2 * (1.0 - np.cos(th))
    return np.exp(-d2 / PENDULUM_REWARD_SCALE ** 2) - ACTION_COST * np.sum((action / TORQUE_MAX) ** 2, axis=-1)


# ---------------------------------------------------------------- registry

CARTPOLE = EnvSpec(
    name="cartpole", d_s=4, d_a=1, angle_dims=(2,),
    action_low=(-FORCE_MAX,), action_high=(FORCE_MAX,),
    dt=CARTPOLE_DT, task_horizon=200, reward_id="cartpole",
    init_state=(0.0, 0.0, np.pi, 0.0))

PENDULUM = EnvSpec(
    name="pendulum", d_s=2, d_a=1, angle_dims=(0,),
    action_low=(-TORQUE_MAX,), action_high=(TORQUE_MAX,),
    dt=PENDULUM_DT, task_horizon=200, reward_id="pendulum",
    init_state=(np.pi, 0.0))

_DYNAMICS = {"cartpole": cartpole_step, "pendulum": pendulum_step}
_REWARDS = {"cartpole": cartpole_reward, "pendulum": pendulum_reward}
_SPECS = {"cartpole": CARTPOLE, "pendulum": PENDULUM}


def reward_fn(reward_id: str) -> Callable:
    try:
        return _REWARDS[reward_id]
    except KeyError:
        raise KeyError(f"unknown reward id {reward_id!r}") from None


class Env:
    """A single-owner simulator instance.

    Args:
        spec: environment description.
        noise_fraction: std of Gaussian action noise as a fraction of the
            action range, in [0, 0.2].
        seed: seed of the action-noise stream.
    """

    def __init__(self, spec: EnvSpec, noise_fraction: float = 0.0, seed: Optional[int] = None):
        if not 0.0 <= noise_fraction <= MAX_NOISE_FRACTION:
            raise ValueError(f"noise fraction must lie in [0, {MAX_NOISE_FRACTION}]")
        self.spec = spec
        self.noise_fraction = float(noise_fraction)
        self.rng = np.random.default_rng(seed)
        self._step = _DYNAMICS[spec.name]
        self.reward = _REWARDS[spec.reward_id]
        self.state = self.reset()

    def reset(self) -> np.ndarray:
        self.state = np.asarray(self.spec.init_state, dtype=np.float64).copy()
        return self.state.copy()

    def dynamics(self, state, action):
        """Noise-free transition, vectorised over leading axes."""
        return self._step(state, action, self.spec.dt)

    def step(self, action):
        """Applies ``action`` (with noise, if configured); returns (next_state, reward, realised_action)."""
        realised = noisy_action(self, action, self.rng)
        reward = float(self.reward(self.state, realised))
        self.state = self._step(self.state, realised, self.spec.dt)
        return self.state.copy(), reward, realised

    def clone(self) -> "Env":
        other = Env(self.spec, self.noise_fraction)
        other.rng = np.random.default_rng()
        other.rng.bit_generator.state = self.rng.bit_generator.state
        other.state = self.state.copy()
        return other


def noisy_action(env: Env, action, rng: np.random.Generator) -> np.ndarray:
    """Adds N(0, (fraction * range)^2) to ``action`` and clamps to bounds."""
    spec = env.spec
    action = np.asarray(action, dtype=np.float64)
    if env.noise_fraction > 0.0:
        std = env.noise_fraction * (spec.high - spec.low)
        action = action + std * rng.standard_normal(action.shape)
    return np.clip(action, spec.low, spec.high)


def noisy_step(env: Env, state, action, rng: np.random.Generator) -> np.ndarray:
    """Inner transition applied to a noise-corrupted, clamped action."""
    return env.dynamics(state, noisy_action(env, action, rng))


def make_env(env_id: str, seed: Optional[int] = None) -> Env:
    """Builds an environment from a registry id.

    Ids are ``cartpole``, ``pendulum``, or ``<name>-noise:<fraction>``,
    e.g. ``cartpole-noise:0.1``.
    """
    name, noise = env_id, 0.0
    if "-noise:" in env_id:
        name, frac = env_id.split("-noise:", 1)
        noise = float(frac)
    if name not in _SPECS:
        raise KeyError(f"unknown environment id {env_id!r}")
    return Env(_SPECS[name], noise_fraction=noise, seed=seed)


def get_spec(env_id: str) -> EnvSpec:
    return _SPECS[env_id.split("-noise:", 1)[0]]


# ---------------------------------------------------------------- sine data

SINE_NOISE_VARIANCE = 0.0225


def sine_noise_variance(x):
    return SINE_NOISE_VARIANCE * np.abs(np.sin(1.5 * np.asarray(x) + np.pi / 8))


def sine_dataset(n: int = 2000, rng=None):
    """Heteroscedastic sine regression data.

    x is uniform on [-2pi, -pi] U [pi, 2pi]; y = sin(x) plus zero-mean
    Gaussian noise whose variance is 0.0225 * |sin(1.5 x + pi/8)|.

    Returns:
        (x, y), each shaped (n, 1).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng)
    mag = rng.uniform(np.pi, 2 * np.pi, size=n)
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    x = sign * mag
    y = np.sin(x) + np.sqrt(sine_noise_variance(x)) * rng.standard_normal(n)
    return x[:, None], y[:, None]
