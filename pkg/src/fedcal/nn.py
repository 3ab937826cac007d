"""Small ReLU MLPs over flat parameter vectors.

Parameters live in a single float64 vector. Layer ``l`` contributes its
weight matrix (``fan_in x fan_out``, row-major) followed by its bias, in
input-to-output order. Every function here is pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

HEADS = ("categorical", "gaussian-mean-only", "gaussian-mean-and-logvar")
LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces inf/nan."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (100,)
    output_dim: int = 1
    head: str = "categorical"
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden layer widths must be positive")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.head == "categorical" and self.output_dim < 2:
            raise ValueError("categorical head needs output_dim >= 2 classes")
        if self.head != "categorical" and self.output_dim != 1:
            raise ValueError("gaussian heads support scalar targets only")

    @property
    def final_width(self) -> int:
        if self.head == "gaussian-mean-and-logvar":
            return 2
        return self.output_dim

    @property
    def layer_sizes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.final_width]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_sizes)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "head": self.head,
            "activation": self.activation,
        }


@dataclass(frozen=True)
class PriorSpec:
    """Isotropic Gaussian weight prior N(0, sigma^2 I)."""

    sigma: float = 5e4
    kind: str = "isotropic-gaussian"

    def __post_init__(self):
        if self.kind != "isotropic-gaussian":
            raise ValueError(f"unsupported prior {self.kind!r}")
        if not self.sigma > 0:
            raise ValueError("prior sigma must be positive")

    def neg_log_prob(self, params: np.ndarray) -> float:
        # constant term dropped; only the parameter-dependent part matters
        return 0.5 * float(params @ params) * self.precision

    def neg_log_prob_grad(self, params: np.ndarray) -> np.ndarray:
        return params * self.precision

    @property
    def precision(self) -> float:
        # huge or infinite sigma means a flat prior: precision underflows to 0
        with np.errstate(over="ignore"):
            return float(1.0 / np.square(np.float64(self.sigma)))


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.asarray(self.targets)
        if len(self.inputs) < 1 or len(self.inputs) != len(self.targets):
            raise ValueError("batch needs n >= 1 rows with matching targets")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("batch inputs contain non-finite values")

    def __len__(self):
        return len(self.inputs)


def unpack(params: np.ndarray, config: MlpConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of (W, b) per layer. No copies are made."""
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.size != config.n_params:
        raise ValueError(f"expected {config.n_params} parameters, got {params.size}")
    layers, offset = [], 0
    for fan_in, fan_out in config.layer_sizes:
        w = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset:offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def mlp_init(config: MlpConfig, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in config.layer_sizes:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


@dataclass
class _Cache:
    activations: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)


def _check_inputs(inputs, config: MlpConfig) -> np.ndarray:
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[1] != config.input_dim:
        raise ValueError(f"inputs have {x.shape[1]} features, model expects {config.input_dim}")
    return x


def forward_raw(params, config: MlpConfig, inputs) -> tuple[np.ndarray, _Cache]:
    """Final-layer outputs (logits, or mean/log-variance) plus a backprop cache."""
    x = _check_inputs(inputs, config)
    layers = unpack(params, config)
    cache = _Cache()
    h = x
    for idx, (w, b) in enumerate(layers):
        cache.activations.append(h)
        z = h @ w + b
        if not np.all(np.isfinite(z)):
            raise NonFiniteError(f"non-finite pre-activation in layer {idx}", layer=idx)
        cache.pre.append(z)
        h = np.maximum(z, 0.0) if idx < len(layers) - 1 else z
    return h, cache


def backward(params, config: MlpConfig, cache: _Cache, d_out: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the flat parameters given d(loss)/d(final outputs)."""
    layers = unpack(params, config)
    grads = [None] * (2 * len(layers))
    delta = d_out
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        grads[2 * idx] = (cache.activations[idx].T @ delta).ravel()
        grads[2 * idx + 1] = delta.sum(axis=0)
        if idx > 0:
            delta = (delta @ w.T) * (cache.pre[idx - 1] > 0)
        if not np.all(np.isfinite(delta)):
            raise NonFiniteError(f"non-finite gradient in layer {idx}", layer=idx)
    return np.concatenate(grads)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward(params, config: MlpConfig, inputs):
    """Predictive distribution per input row.

    categorical -> ``(n, K)`` probabilities; gaussian-mean-only -> ``(n,)``
    means; gaussian-mean-and-logvar -> ``(means, variances)``.
    """
    out, _ = forward_raw(params, config, inputs)
    if config.head == "categorical":
        return softmax(out)
    if config.head == "gaussian-mean-only":
        return out[:, 0]
    return out[:, 0], np.exp(out[:, 1])


def _data_nll(out: np.ndarray, targets: np.ndarray, config: MlpConfig, obs_var: float):
    """Per-row NLL and its gradient w.r.t. the final outputs."""
    n = len(out)
    if config.head == "categorical":
        labels = np.asarray(targets, dtype=np.int64)
        if labels.min() < 0 or labels.max() >= config.output_dim:
            raise ValueError("class label out of range")
        logp = log_softmax(out)
        nll = -logp[np.arange(n), labels]
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return nll, d
    y = np.asarray(targets, dtype=np.float64).reshape(n)
    mu = out[:, 0]
    if config.head == "gaussian-mean-only":
        resid = mu - y
        nll = 0.5 * (LOG_2PI + math.log(obs_var)) + 0.5 * resid**2 / obs_var
        return nll, (resid / obs_var)[:, None]
    logvar = out[:, 1]
    inv_var = np.exp(-logvar)
    resid = mu - y
    nll = 0.5 * (LOG_2PI + logvar) + 0.5 * resid**2 * inv_var
    d = np.stack([resid * inv_var, 0.5 - 0.5 * resid**2 * inv_var], axis=1)
    return nll, d


def loss_and_grad(
    params,
    config: MlpConfig,
    batch: Batch,
    prior: PriorSpec,
    temperature: float = 1.0,
    n_data: int | None = None,
    obs_var: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Tempered energy ``mean NLL + (T / n_data) * (-log p(theta))`` and its gradient.

    ``n_data`` is the size of the full shard the batch was drawn from; it
    defaults to the batch size. ``obs_var`` is the fixed observation
    variance used by the gaussian-mean-only head.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    params = np.asarray(params, dtype=np.float64)
    n_data = len(batch) if n_data is None else n_data
    out, cache = forward_raw(params, config, batch.inputs)
    nll, d_out = _data_nll(out, batch.targets, config, obs_var)
    n = len(batch)
    grad = backward(params, config, cache, d_out / n)
    scale = temperature / n_data
    loss = float(nll.mean()) + scale * prior.neg_log_prob(params)
    grad = grad + scale * prior.neg_log_prob_grad(params)
    if not math.isfinite(loss):
        raise NonFiniteError("non-finite loss", layer=len(config.layer_sizes) - 1)
    return loss, grad
