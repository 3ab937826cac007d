"""Accuracy and calibration metrics."""

from __future__ import annotations

import numpy as np

from .nn import LOG_2PI

PROB_FLOOR = 1e-12


def _probs_labels(probs, labels):
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(p) != len(y):
        raise ValueError(f"{len(p)} predictions but {len(y)} labels")
    if y.size and (y.min() < 0 or y.max() >= p.shape[1]):
        raise ValueError("label out of range")
    return p, y


def nll_classification(probs, labels) -> float:
    p, y = _probs_labels(probs, labels)
    return float(-np.log(np.maximum(p[np.arange(len(y)), y], PROB_FLOOR)).mean())


def nll_gaussian(mean, variance, targets) -> float:
    mu = np.asarray(mean, dtype=np.float64)
    var = np.asarray(variance, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if np.any(~(var > 0)):
        raise ValueError("variances must be positive")
    return float((0.5 * (LOG_2PI + np.log(var)) + 0.5 * (y - mu) ** 2 / var).mean())


def accuracy(probs, labels) -> float:
    p, y = _probs_labels(probs, labels)
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return float((p.argmax(axis=1) == y).mean())


def rmse(pred, targets) -> float:
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    return float(np.sqrt(np.mean(diff**2)))


def ece(probs, labels, n_bins: int = 15) -> float:
    """Expected calibration error with ``n_bins`` equal-width, right-closed bins.

    Bin ``m`` (1-based) holds confidences in ``((m-1)/M, m/M]``; a
    confidence of exactly 0 falls in the first bin.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be positive")
    p, y = _probs_labels(probs, labels)
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == y).astype(np.float64)
    inner_edges = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
    bins = np.searchsorted(inner_edges, conf, side="left")
    n = len(y)
    total = 0.0
    for b in np.unique(bins):
        mask = bins == b
        total += mask.sum() / n * abs(correct[mask].mean() - conf[mask].mean())
    return float(total)


def classification_metrics(probs, labels, n_bins: int = 15) -> dict:
    return {
        "nll": nll_classification(probs, labels),
        "ece": ece(probs, labels, n_bins),
        "accuracy": accuracy(probs, labels),
    }


def regression_metrics(mean, variance, targets) -> dict:
    return {"gaussian_nll": nll_gaussian(mean, variance, targets), "rmse": rmse(mean, targets)}
