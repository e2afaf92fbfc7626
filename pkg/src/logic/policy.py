"""Stochastic Gaussian policy network with hand-written backpropagation.

The network maps the 9-dimensional observation through four Leaky ReLU
hidden layers to two outputs: a mean head squashed onto (0, 1) by a
logistic, and a standard-deviation head passed through softplus.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

LAYER_SIZES = (9, 20, 20, 20, 20, 2)
LEAKY_SLOPE = 0.01
STD_FLOOR = 1e-4
CHECKPOINT_FORMAT = "pwm-opto-policy"
CHECKPOINT_VERSION = 1
LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


class PolicyNumericalError(FloatingPointError):
    """Raised when the network produces non-finite activations."""


class CheckpointError(ValueError):
    """Raised when a checkpoint cannot be read or does not fit the network."""


@dataclass
class PolicyParams:
    """Weights (out x in) and biases of every layer, input layer first."""

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty lists of equal length")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} expects {w.shape[1]} inputs, previous layer gives {self.weights[i - 1].shape[0]}")

    @property
    def layer_sizes(self):
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def size(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def flatten(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vector):
        """New parameters of the same shapes filled from a flat vector."""
        vector = np.asarray(vector, dtype=float)
        if vector.size != self.size:
            raise ValueError(f"expected {self.size} values, got {vector.size}")
        weights, biases, offset = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vector[offset:offset + w.size].reshape(w.shape).copy())
            offset += w.size
            biases.append(vector[offset:offset + b.size].copy())
            offset += b.size
        return PolicyParams(weights, biases)

    def copy(self):
        return PolicyParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self):
        return PolicyParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def axpy(self, alpha, other):
        """Return self + alpha * other."""
        return PolicyParams(
            [w + alpha * dw for w, dw in zip(self.weights, other.weights)],
            [b + alpha * db for b, db in zip(self.biases, other.biases)],
        )

    def norm(self):
        return float(np.linalg.norm(self.flatten()))

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_params(rng, layer_sizes=LAYER_SIZES):
    """Uniform weights in +-1/sqrt(fan_in), zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return PolicyParams(weights, biases)


def _softplus(a):
    return float(np.logaddexp(0.0, a))


def _forward_cache(z, theta):
    z = np.asarray(z, dtype=float)
    if z.shape != (theta.layer_sizes[0],):
        raise ValueError(f"observation must have shape ({theta.layer_sizes[0]},), got {z.shape}")
    inputs, pre = [], []
    h = z
    last = len(theta.weights) - 1
    for i, (w, b) in enumerate(zip(theta.weights, theta.biases)):
        inputs.append(h)
        a = w @ h + b
        pre.append(a)
        h = a if i == last else np.where(a > 0, a, LEAKY_SLOPE * a)
    if not np.all(np.isfinite(h)):
        raise PolicyNumericalError(f"non-finite network output {h.tolist()}")
    return h, inputs, pre


def forward(z, theta):
    """Mean and standard deviation of the action distribution at z."""
    out, _, _ = _forward_cache(z, theta)
    return float(expit(out[0])), _softplus(out[1]) + STD_FLOOR


@dataclass(frozen=True)
class ActionSample:
    raw: float
    applied: float
    log_prob: float
    mean: float
    std: float


def log_prob(raw, mean, std):
    """Log density of a normal distribution evaluated at the raw draw."""
    return -((raw - mean) ** 2) / (2 * std ** 2) - math.log(std) - LOG_SQRT_2PI


def sample_action(mean, std, rng, low=0.0, high=1.0):
    if not std > 0:
        raise ValueError(f"std must be > 0, got {std!r}")
    raw = float(rng.normal(mean, std))
    return ActionSample(
        raw=raw,
        applied=min(high, max(low, raw)),
        log_prob=log_prob(raw, mean, std),
        mean=mean,
        std=std,
    )


def grad_log_prob(z, raw, theta):
    """Gradient of log pi(raw | z, theta) with respect to every parameter."""
    out, inputs, pre = _forward_cache(z, theta)
    mean = float(expit(out[0]))
    std = _softplus(out[1]) + STD_FLOOR
    diff = raw - mean

    # d log_prob / d head pre-activations
    d_mean = diff / std ** 2 * mean * (1.0 - mean)
    d_std = (diff ** 2 / std ** 3 - 1.0 / std) * float(expit(out[1]))
    delta = np.array([d_mean, d_std])

    n_layers = len(theta.weights)
    grad_w, grad_b = [None] * n_layers, [None] * n_layers
    for i in reversed(range(n_layers)):
        grad_w[i] = np.outer(delta, inputs[i])
        grad_b[i] = delta.copy()
        if i > 0:
            upstream = theta.weights[i].T @ delta
            delta = upstream * np.where(pre[i - 1] > 0, 1.0, LEAKY_SLOPE)
    return PolicyParams(grad_w, grad_b)


def save_checkpoint(theta, path, metadata=None):
    """Write parameters as JSON; floats use shortest repr so reloads are bit-exact."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "layer_sizes": list(theta.layer_sizes),
        "weights": [w.ravel(order="C").tolist() for w in theta.weights],
        "biases": [b.tolist() for b in theta.biases],
        "metadata": metadata or {},
    }
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")
    logger.debug("Saved policy checkpoint to %s", path)


def load_checkpoint(path, expected_sizes=LAYER_SIZES):
    """Read a checkpoint; returns (theta, metadata)."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict):
        raise CheckpointError(f"checkpoint {path} is not a JSON object")
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {payload.get('format')!r} v{payload.get('format_version')!r}")
    sizes = tuple(payload.get("layer_sizes", ()))
    if expected_sizes is not None and sizes != tuple(expected_sizes):
        raise CheckpointError(f"checkpoint layer sizes {sizes} do not match the network {tuple(expected_sizes)}")
    try:
        weights = [
            np.array(flat, dtype=float).reshape(fan_out, fan_in)
            for flat, fan_in, fan_out in zip(payload["weights"], sizes[:-1], sizes[1:])
        ]
        biases = [np.array(b, dtype=float) for b in payload["biases"]]
        theta = PolicyParams(weights, biases)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"malformed checkpoint {path}: {e}") from e
    if not theta.is_finite():
        raise CheckpointError(f"checkpoint {path} contains non-finite values")
    return theta, payload.get("metadata", {})
