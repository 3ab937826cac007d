"""Distil an ensemble teacher into a single student network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aggregation import GaussianPrediction
from .nn import MlpConfig, backward, forward_raw, log_softmax, mlp_init
from .sampling import OptimizerConfig, OptimizerState, iterate_minibatches, optimizer_step

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class DistillConfig:
    epochs: int = 100
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig("adam", 1e-4))
    batch_size: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class DistillResult:
    params: np.ndarray
    epoch_losses: list[float]


def kl_categorical(teacher: np.ndarray, student_logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise KL(teacher || softmax(logits)) and its gradient w.r.t. the logits."""
    log_s = log_softmax(student_logits)
    t = teacher
    log_t = np.log(np.maximum(t, PROB_FLOOR))
    kl = np.sum(np.where(t > 0, t * (log_t - log_s), 0.0), axis=1)
    return kl, np.exp(log_s) - t


def kl_gaussian(t_mean, t_var, s_mean, s_logvar) -> tuple[np.ndarray, np.ndarray]:
    """KL(N(t_mean, t_var) || N(s_mean, exp(s_logvar))) and d/d(s_mean, s_logvar)."""
    s_var = np.exp(s_logvar)
    diff = s_mean - t_mean
    ratio = (t_var + diff**2) / s_var
    kl = 0.5 * (s_logvar - np.log(t_var) + ratio - 1.0)
    grad = np.stack([diff / s_var, 0.5 * (1.0 - ratio)], axis=1)
    return kl, grad


def _teacher_targets(teacher, X):
    out = teacher(X) if callable(teacher) else teacher
    if isinstance(out, GaussianPrediction):
        if np.any(~(out.variance > 0)) or not np.all(np.isfinite(out.mean)):
            raise ValueError("teacher emitted an invalid Gaussian")
        return out
    p = np.asarray(out, dtype=np.float64)
    if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("teacher emitted an invalid class distribution")
    return p


def distillation_loss(params, student: MlpConfig, X, targets) -> tuple[float, np.ndarray]:
    """Mean KL from teacher targets to the student over ``X`` and its parameter gradient."""
    out, cache = forward_raw(params, student, X)
    n = len(out)
    if student.head == "categorical":
        kl, d_out = kl_categorical(targets, out)
    else:
        kl, d_out = kl_gaussian(targets.mean, targets.variance, out[:, 0], out[:, 1])
    return float(kl.mean()), backward(params, student, cache, d_out / n)


def distill(teacher, student: MlpConfig, X, config: DistillConfig | None = None,
            init: np.ndarray | None = None) -> DistillResult:
    """Fit ``student`` to the teacher's predictive distribution on ``X``.

    ``teacher`` is a callable ``X -> predictions`` or precomputed
    predictions. Classification students need a categorical head;
    regression students need ``gaussian-mean-and-logvar``.
    """
    config = config or DistillConfig()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    targets = _teacher_targets(teacher, X)
    gaussian = isinstance(targets, GaussianPrediction)
    if gaussian and student.head != "gaussian-mean-and-logvar":
        raise ValueError("regression students need the gaussian-mean-and-logvar head")
    if not gaussian and student.head != "categorical":
        raise ValueError("classification students need the categorical head")
    rng = np.random.default_rng(config.seed)
    params = mlp_init(student, config.seed) if init is None else np.array(init, dtype=np.float64)
    state = OptimizerState()
    losses = []
    for _ in range(config.epochs):
        total = 0.0
        for idx in iterate_minibatches(len(X), config.batch_size, rng):
            if gaussian:
                batch_t = GaussianPrediction(targets.mean[idx], targets.variance[idx])
            else:
                batch_t = targets[idx]
            loss, grad = distillation_loss(params, student, X[idx], batch_t)
            total += loss * len(idx)
            state, params = optimizer_step(state, params, grad, config.optimizer)
        losses.append(total / len(X))
    return DistillResult(params, losses)
