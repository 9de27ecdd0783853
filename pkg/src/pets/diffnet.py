"""Small multilayer perceptron with hand-written reverse mode and Adam.

Hidden layers use swish; the output layer is affine. A probabilistic head
emits ``2 * d_out`` values, a mean half and a raw log-variance half that is
squashed between learnable bounds with two softplus compositions. Everything
runs in float64.
"""

from __future__ import annotations

import dataclasses
import json
from typing import List, Optional, Sequence

import numpy as np

PROBABILISTIC = "probabilistic"
DETERMINISTIC = "deterministic"
HEADS = (PROBABILISTIC, DETERMINISTIC)

INIT_MAX_LOGVAR = 0.5
INIT_MIN_LOGVAR = -10.0


@dataclasses.dataclass
class NetworkParams:
    """Weights, biases and log-variance bounds of one network.

    ``weights[k]`` has shape (fan_in, fan_out). The bound vectors have one
    entry per output dimension and are present for both heads, although a
    deterministic head never reads them. Gradients use the same container.
    """

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    max_logvar: np.ndarray
    min_logvar: np.ndarray
    head: str = PROBABILISTIC

    @property
    def d_out(self) -> int:
        return self.max_logvar.shape[0]

    @property
    def widths(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def tensors(self) -> List[np.ndarray]:
        return [*self.weights, *self.biases, self.max_logvar, self.min_logvar]

    def with_tensors(self, tensors: Sequence[np.ndarray]) -> "NetworkParams":
        n = len(self.weights)
        return NetworkParams(
            weights=list(tensors[:n]),
            biases=list(tensors[n:2 * n]),
            max_logvar=tensors[2 * n],
            min_logvar=tensors[2 * n + 1],
            head=self.head,
        )

    def zeros_like(self) -> "NetworkParams":
        return self.with_tensors([np.zeros_like(t) for t in self.tensors()])

    def copy(self) -> "NetworkParams":
        return self.with_tensors([t.copy() for t in self.tensors()])

    def validate(self) -> None:
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError("layer shapes do not chain")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ValueError("bias shape does not match layer width")
        mult = 2 if self.head == PROBABILISTIC else 1
        if self.weights[-1].shape[1] != mult * self.d_out:
            raise ValueError("final layer width does not match head")
        if np.any(self.max_logvar <= self.min_logvar):
            raise ValueError("max_logvar must exceed min_logvar")


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Gaussian samples with out-of-range (|z| > 2 std) draws redrawn."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(layer_widths: Sequence[int], head: str = PROBABILISTIC, rng_seed=None) -> NetworkParams:
    """Initialises a network.

    Args:
        layer_widths: widths of every layer from input to output. For a
            probabilistic head the last width is 2 * d_out (means followed
            by raw log-variances) and must be even.
        head: ``"probabilistic"`` or ``"deterministic"``.
        rng_seed: seed or Generator.

    Weights follow a Gaussian with variance 1/fan_in truncated at two
    standard deviations; biases start at zero.
    """
    widths = [int(w) for w in layer_widths]
    if len(widths) < 2:
        raise ValueError("need at least an input and an output width")
    if any(w <= 0 for w in widths):
        raise ValueError("layer widths must be positive")
    if head not in HEADS:
        raise ValueError(f"unknown head {head!r}")
    if head == PROBABILISTIC and widths[-1] % 2:
        raise ValueError("probabilistic head needs an even output width")
    rng = np.random.default_rng(rng_seed)
    d_out = widths[-1] // 2 if head == PROBABILISTIC else widths[-1]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(truncated_normal(rng, (fan_in, fan_out), np.sqrt(1.0 / fan_in)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(
        weights=weights,
        biases=biases,
        max_logvar=np.full(d_out, INIT_MAX_LOGVAR),
        min_logvar=np.full(d_out, INIT_MIN_LOGVAR),
        head=head,
    )


def sigmoid(x):
    x = np.array(x, dtype=np.float64, ndmin=1) if np.ndim(x) == 0 else np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        y = np.negative(x)
        np.exp(y, out=y)
    y += 1.0
    return np.reciprocal(y, out=y)


def softplus(x):
    """log(1 + e^x), computed without overflow."""
    x = np.asarray(x, dtype=np.float64)
    y = np.abs(x)
    np.negative(y, out=y)
    np.exp(y, out=y)
    np.log1p(y, out=y)
    y += np.maximum(x, 0.0)
    return y


def swish(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        return float(x) * float(sigmoid(x)[0])
    with np.errstate(over="ignore"):
        y = np.negative(x)
        np.exp(y, out=y)
    y += 1.0
    return np.divide(x, y, out=y)


def bound_logvar(raw, max_logvar, min_logvar):
    """Softly clamps raw log-variances into (min_logvar, max_logvar + ln 2]."""
    max_logvar = np.asarray(max_logvar, dtype=np.float64)
    min_logvar = np.asarray(min_logvar, dtype=np.float64)
    if np.any(max_logvar <= min_logvar):
        raise ValueError("max_logvar must exceed min_logvar")
    v1 = max_logvar - softplus(max_logvar - raw)
    return min_logvar + softplus(v1 - min_logvar)


def _check_inputs(params: NetworkParams, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ValueError(
            f"expected inputs with {params.weights[0].shape[0]} columns, got shape {x.shape}")
    return x


def _forward_cache(params: NetworkParams, inputs):
    """Forward pass keeping activations and hidden sigmoids for backprop."""
    h = _check_inputs(params, inputs)
    acts, sigs = [h], []
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w
        z += b
        if k == last:
            h = z
        else:
            s = sigmoid(z)
            sigs.append((z, s))
            h = z * s
        acts.append(h)
    return acts, sigs


def _forward_out(params: NetworkParams, x):
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w
        h += b
        if k != last:
            h = swish(h)
    return h


def forward(params: NetworkParams, inputs):
    """Evaluates the network on a batch of rows.

    Returns:
        (mean, bounded_logvar); the second item is None for a deterministic
        head.
    """
    x = _check_inputs(params, inputs)
    if x.shape[0] == 1:
        # single-row products take a different BLAS path; keep rows batch-size invariant
        out = _forward_out(params, np.vstack([x, x]))[:1]
    else:
        out = _forward_out(params, x)
    if params.head == DETERMINISTIC:
        return out, None
    d = params.d_out
    return out[:, :d], bound_logvar(out[:, d:], params.max_logvar, params.min_logvar)


def gaussian_nll(mean, bounded_logvar, targets, max_logvar=None, min_logvar=None, reg: float = 0.0) -> float:
    """Summed Gaussian negative log-likelihood without the 2*pi constant.

    sum_n (mu - s)^T Sigma^-1 (mu - s) + log det Sigma, plus
    ``reg * sum(max_logvar - min_logvar)`` when bounds are supplied.
    """
    mean, logvar, targets = (np.asarray(a, dtype=np.float64) for a in (mean, bounded_logvar, targets))
    if not (mean.shape == logvar.shape == targets.shape):
        raise ValueError("mean, logvar and targets must share a shape")
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(logvar)) and np.all(np.isfinite(targets))):
        raise FloatingPointError("non-finite input to gaussian_nll")
    loss = float(np.sum((mean - targets) ** 2 * np.exp(-logvar) + logvar))
    if reg and max_logvar is not None:
        loss += reg * float(np.sum(max_logvar - min_logvar))
    return loss


def mse_loss(mean, targets) -> float:
    """Sum over rows of the squared Euclidean residual."""
    mean, targets = np.asarray(mean, dtype=np.float64), np.asarray(targets, dtype=np.float64)
    if mean.shape != targets.shape:
        raise ValueError("shape mismatch between predictions and targets")
    return float(np.sum((mean - targets) ** 2))


def loss(params: NetworkParams, inputs, targets, loss_kind: str = "nll", reg: float = 0.0) -> float:
    mean, logvar = forward(params, inputs)
    if loss_kind == "mse":
        return mse_loss(mean, targets)
    if logvar is None:
        raise ValueError("nll loss needs a probabilistic head")
    return gaussian_nll(mean, logvar, targets, params.max_logvar, params.min_logvar, reg)


def gradient(params: NetworkParams, inputs, targets, loss_kind: str = "nll", reg: float = 0.0) -> NetworkParams:
    """Exact gradient of :func:`loss` with respect to every parameter tensor."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape[0] == 0:
        raise ValueError("empty batch")
    acts, sigs = _forward_cache(params, inputs)
    out = acts[-1]
    d = params.d_out
    grad = params.zeros_like()

    if loss_kind == "mse":
        d_out = np.zeros_like(out)
        d_out[:, :d] = 2.0 * (out[:, :d] - targets)
    elif loss_kind == "nll":
        if params.head != PROBABILISTIC:
            raise ValueError("nll loss needs a probabilistic head")
        mean, raw = out[:, :d], out[:, d:]
        hi, lo = params.max_logvar, params.min_logvar
        u = hi - raw
        v1 = hi - softplus(u)
        w = v1 - lo
        logvar = lo + softplus(w)
        inv_var = np.exp(-logvar)
        resid = mean - targets
        g_logvar = 1.0 - resid ** 2 * inv_var
        sig_w = sigmoid(w)
        sig_u = sigmoid(u)
        g_v1 = g_logvar * sig_w
        d_out = np.concatenate([2.0 * resid * inv_var, g_v1 * sig_u], axis=1)
        grad.max_logvar = np.sum(g_v1 * (1.0 - sig_u), axis=0) + reg
        grad.min_logvar = np.sum(g_logvar * (1.0 - sig_w), axis=0) - reg
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")

    delta = d_out
    for k in range(len(params.weights) - 1, -1, -1):
        grad.weights[k] = acts[k].T @ delta
        grad.biases[k] = delta.sum(axis=0)
        if k > 0:
            z, s = sigs[k - 1]
            delta = (delta @ params.weights[k].T) * (s * (1.0 + z * (1.0 - s)))

    for t in grad.tensors():
        if not np.all(np.isfinite(t)):
            raise FloatingPointError("non-finite gradient")
    return grad


@dataclasses.dataclass
class AdamState:
    step: int
    m: List[np.ndarray]
    v: List[np.ndarray]

    @classmethod
    def zeros(cls, params: NetworkParams) -> "AdamState":
        return cls(0, [np.zeros_like(t) for t in params.tensors()],
                   [np.zeros_like(t) for t in params.tensors()])


def adam_step(params: NetworkParams, grad: NetworkParams, state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns new (params, state); inputs are untouched."""
    p_t, g_t = params.tensors(), grad.tensors()
    if len(p_t) != len(g_t) or any(a.shape != b.shape for a, b in zip(p_t, g_t)):
        raise ValueError("gradient is not shape-congruent with parameters")
    step = state.step + 1
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_t, g_t, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return params.with_tensors(new_p), AdamState(step, new_m, new_v)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: NetworkParams, adam: Optional[AdamState] = None) -> None:
    """Writes params (and optionally Adam state) to a single .npz file."""
    header = {"widths": params.widths, "head": params.head, "d_out": params.d_out,
              "n_layers": len(params.weights), "adam_step": None if adam is None else adam.step}
    arrays = {"header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for i, t in enumerate(params.tensors()):
        arrays[f"p{i}"] = t
    if adam is not None:
        for i, (m, v) in enumerate(zip(adam.m, adam.v)):
            arrays[f"m{i}"] = m
            arrays[f"v{i}"] = v
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Reads a checkpoint. Returns (params, adam_state_or_None)."""
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        n = 2 * header["n_layers"] + 2
        tensors = [data[f"p{i}"].copy() for i in range(n)]
        adam = None
        if header["adam_step"] is not None:
            adam = AdamState(header["adam_step"], [data[f"m{i}"].copy() for i in range(n)],
                             [data[f"v{i}"].copy() for i in range(n)])
    k = header["n_layers"]
    params = NetworkParams(tensors[:k], tensors[k:2 * k], tensors[2 * k], tensors[2 * k + 1], header["head"])
    return params, adam
