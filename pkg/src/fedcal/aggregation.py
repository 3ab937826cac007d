"""Fusion of client predictive posteriors: mixture, product (BCM) and beta.

Categorical predictions are arrays whose last axis holds class
probabilities; a stack of client predictions has the client on axis 0.
Gaussian predictions carry elementwise mean/variance arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from .nn import LOG_2PI, MlpConfig, forward
from .sampling import OptimizerConfig, OptimizerState, PosteriorSampleSet, optimizer_step

PROB_FLOOR = 1e-12
MODES = ("mixture", "product", "beta")


class AggregationError(ValueError):
    pass


@dataclass
class GaussianPrediction:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.variance = np.asarray(self.variance, dtype=np.float64)
        if self.mean.shape != self.variance.shape:
            raise ValueError("mean and variance shapes differ")
        if np.any(~(self.variance > 0)):
            raise ValueError("Gaussian prediction needs positive variance")

    @property
    def precision(self) -> np.ndarray:
        return 1.0 / self.variance


@dataclass(frozen=True)
class PriorPredictive:
    """Prior predictive p(y|x).

    ``uniform`` for classification; ``flat`` (zero precision) or
    ``gaussian`` with ``mean``/``variance`` for regression.
    """

    kind: str = "uniform"
    mean: float = 0.0
    variance: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "flat", "gaussian"):
            raise ValueError(f"unknown prior predictive {self.kind!r}")
        if self.kind == "gaussian" and not self.variance > 0:
            raise ValueError("gaussian prior predictive needs positive variance")

    @property
    def precision(self) -> float:
        return 1.0 / self.variance if self.kind == "gaussian" else 0.0


@dataclass
class AggregationConfig:
    mode: str = "beta"
    beta: float = 0.5
    prior: PriorPredictive = field(default_factory=PriorPredictive)
    client_weights: np.ndarray | None = None
    tune: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown aggregation mode {self.mode!r}")
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")
        if self.client_weights is not None:
            self.client_weights = check_weights(self.client_weights)


def check_weights(weights, m: int | None = None) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or (m is not None and w.size != m):
        raise AggregationError(f"expected {m} client weights, got shape {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise AggregationError("client weights must be a probability vector")
    return w


def size_weights(sizes) -> np.ndarray:
    s = np.asarray(sizes, dtype=np.float64)
    return s / s.sum()


def _stack(preds) -> np.ndarray:
    p = np.asarray(preds, dtype=np.float64)
    if p.ndim < 2:
        raise AggregationError("expected a stack of client predictions")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise AggregationError("probabilities must be finite and non-negative")
    return p


# ---------------------------------------------------------------- local


def local_predictive(samples: PosteriorSampleSet, config: MlpConfig, x, obs_var: float = 1.0):
    """Monte Carlo posterior predictive of one client.

    Categorical: mean of per-sample class probabilities. Gaussian: moment
    match of the per-sample ``N(mu_j, obs_var)``.
    """
    outs = [forward(theta, config, x) for theta in samples.samples]
    if config.head == "categorical":
        return np.mean(outs, axis=0)
    if config.head == "gaussian-mean-only":
        mus = np.stack(outs)
        return GaussianPrediction(mus.mean(axis=0), obs_var + mus.var(axis=0))
    mus = np.stack([o[0] for o in outs])
    vs = np.stack([o[1] for o in outs])
    mean = mus.mean(axis=0)
    return GaussianPrediction(mean, (vs + mus**2).mean(axis=0) - mean**2)


# ---------------------------------------------------------- categorical


def _normalize_log(logp: np.ndarray) -> np.ndarray:
    return np.exp(logp - logsumexp(logp, axis=-1, keepdims=True))


def mixture_aggregate(preds, weights) -> np.ndarray:
    p = _stack(preds)
    w = check_weights(weights, len(p))
    mix = np.tensordot(w, p, axes=1)
    return mix / mix.sum(axis=-1, keepdims=True)


def _log_product(p: np.ndarray, prior: PriorPredictive | np.ndarray | None) -> np.ndarray:
    """Unnormalized log of prod_i p_i / p_prior^(m-1)."""
    if np.any(p.sum(axis=-1) <= 0):
        raise AggregationError("a client assigns zero probability to every class")
    logp = np.log(np.maximum(p, PROB_FLOOR)).sum(axis=0)
    m = len(p)
    if isinstance(prior, np.ndarray):
        logp = logp - (m - 1) * np.log(np.maximum(prior, PROB_FLOOR))
    # uniform prior: the correction is a constant removed by normalization
    return logp


def product_aggregate(preds, prior: PriorPredictive | np.ndarray | None = None) -> np.ndarray:
    """BCM product rule in log space.

    ``prior`` may be an explicit prior-predictive probability array; the
    default (uniform) cancels in the normalization.
    """
    return _normalize_log(_log_product(_stack(preds), prior))


def _beta_logits(p: np.ndarray, w: np.ndarray, prior) -> tuple[np.ndarray, np.ndarray]:
    log_prod = _log_product(p, prior)
    log_prod = log_prod - logsumexp(log_prod, axis=-1, keepdims=True)
    mix = np.tensordot(w, p, axes=1)
    log_mix = np.log(np.maximum(mix, PROB_FLOOR))
    log_mix = log_mix - logsumexp(log_mix, axis=-1, keepdims=True)
    return log_prod, log_mix


def beta_aggregate(preds, weights, beta: float, prior=None) -> np.ndarray:
    """normalize(exp(beta * log product + (1 - beta) * log mixture))."""
    if not 0 <= beta <= 1:
        raise AggregationError("beta must lie in [0, 1]")
    p = _stack(preds)
    w = check_weights(weights, len(p))
    if beta == 0:
        return mixture_aggregate(p, w)
    if beta == 1:
        return product_aggregate(p, prior)
    log_prod, log_mix = _beta_logits(p, w, prior)
    return _normalize_log(beta * log_prod + (1 - beta) * log_mix)


# ------------------------------------------------------------- gaussian


def mixture_moment_match(gaussians: list[GaussianPrediction], weights) -> GaussianPrediction:
    w = check_weights(weights, len(gaussians))
    means = np.stack([g.mean for g in gaussians])
    variances = np.stack([g.variance for g in gaussians])
    mu = np.tensordot(w, means, axes=1)
    second = np.tensordot(w, variances + means**2, axes=1)
    # the subtraction below cannot go negative analytically; guard rounding only
    var = second - mu**2
    if np.any(~(var > 0)):
        raise AggregationError("moment-matched variance is not positive")
    return GaussianPrediction(mu, var)


def product_gaussian(
    gaussians: list[GaussianPrediction], prior: PriorPredictive | None = None
) -> GaussianPrediction:
    """Scalar BCM: precisions add, minus (m - 1) prior precisions."""
    prior = prior or PriorPredictive("flat")
    m = len(gaussians)
    prec = sum(g.precision for g in gaussians) - (m - 1) * prior.precision
    weighted = sum(g.precision * g.mean for g in gaussians) - (m - 1) * prior.precision * prior.mean
    prec = np.asarray(prec, dtype=np.float64)
    if np.any(~(prec > 0)):
        raise AggregationError("prior precision exceeds evidence: fused precision is not positive")
    return GaussianPrediction(weighted / prec, 1.0 / prec)


def beta_gaussian(prod: GaussianPrediction, mix: GaussianPrediction, beta: float) -> GaussianPrediction:
    """Precision interpolation between the product and the moment-matched mixture."""
    if not 0 <= beta <= 1:
        raise AggregationError("beta must lie in [0, 1]")
    if beta == 0:
        return GaussianPrediction(mix.mean.copy(), mix.variance.copy())
    if beta == 1:
        return GaussianPrediction(prod.mean.copy(), prod.variance.copy())
    prec = beta * prod.precision + (1 - beta) * mix.precision
    mean = (beta * prod.precision * prod.mean + (1 - beta) * mix.precision * mix.mean) / prec
    return GaussianPrediction(mean, 1.0 / prec)


def fuse(local_preds, weights, mode: str, beta: float = 0.5, prior: PriorPredictive | None = None):
    """Dispatch on prediction type and aggregation mode."""
    if mode not in MODES:
        raise AggregationError(f"unknown aggregation mode {mode!r}")
    if isinstance(local_preds[0], GaussianPrediction):
        prior = prior if prior is not None and prior.kind != "uniform" else PriorPredictive("flat")
        if mode == "mixture":
            return mixture_moment_match(local_preds, weights)
        prod = product_gaussian(local_preds, prior)
        if mode == "product":
            return prod
        return beta_gaussian(prod, mixture_moment_match(local_preds, weights), beta)
    if mode == "mixture":
        return mixture_aggregate(local_preds, weights)
    if mode == "product":
        return product_aggregate(local_preds)
    return beta_aggregate(local_preds, weights, beta)


# ----------------------------------------------------------- beta tuning


@dataclass(frozen=True)
class BetaTunerConfig:
    learning_rate: float = 1e-2
    steps: int = 1000
    init_beta: float = 0.5
    snap_endpoints: bool = True


class _CategoricalObjective:
    def __init__(self, preds, weights, labels, prior=None):
        p = _stack(preds)
        w = check_weights(weights, len(p))
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.labels.size == 0:
            raise AggregationError("server set is empty")
        self.log_prod, self.log_mix = _beta_logits(p, w, prior)
        self.diff = self.log_prod - self.log_mix

    def __call__(self, beta: float) -> tuple[float, float]:
        s = self.log_mix + beta * self.diff
        logp = s - logsumexp(s, axis=-1, keepdims=True)
        rows = np.arange(len(self.labels))
        nll = -logp[rows, self.labels]
        # d/dbeta of -log p_beta(y) = -diff_y + E_{p_beta}[diff]
        grad = -self.diff[rows, self.labels] + (np.exp(logp) * self.diff).sum(axis=-1)
        return float(nll.mean()), float(grad.mean())


class _GaussianObjective:
    def __init__(self, local_preds, weights, targets, prior=None):
        self.prod = product_gaussian(local_preds, prior)
        self.mix = mixture_moment_match(local_preds, weights)
        self.y = np.asarray(targets, dtype=np.float64)
        if self.y.size == 0 or not np.all(np.isfinite(self.y)):
            raise AggregationError("server targets must be non-empty and finite")

    def __call__(self, beta: float) -> tuple[float, float]:
        lp, lm = self.prod.precision, self.mix.precision
        mp, mm = self.prod.mean, self.mix.mean
        lam = beta * lp + (1 - beta) * lm
        eta = beta * lp * mp + (1 - beta) * lm * mm
        mu = eta / lam
        r = self.y - mu
        nll = 0.5 * (LOG_2PI - np.log(lam)) + 0.5 * lam * r**2
        d_lam = lp - lm
        d_mu = ((lp * mp - lm * mm) - mu * d_lam) / lam
        grad = -0.5 * d_lam / lam + 0.5 * d_lam * r**2 - lam * r * d_mu
        return float(nll.mean()), float(grad.mean())


def beta_objective(local_preds, weights, targets, prior=None):
    """Callable ``beta -> (mean NLL, d mean NLL / d beta)`` on a labelled set."""
    if isinstance(local_preds[0], GaussianPrediction):
        prior = prior if prior is not None and prior.kind != "uniform" else PriorPredictive("flat")
        return _GaussianObjective(local_preds, weights, targets, prior)
    return _CategoricalObjective(local_preds, weights, targets)


def tune_beta(local_preds, weights, targets, config: BetaTunerConfig | None = None, prior=None):
    """Minimize server-set NLL over beta = sigmoid(b) with full-batch Adam.

    Returns ``(beta_star, trace)``; each trace entry records step, beta,
    mean NLL and the gradient w.r.t. beta.
    """
    config = config or BetaTunerConfig()
    objective = beta_objective(local_preds, weights, targets, prior)
    init = min(max(config.init_beta, 1e-6), 1 - 1e-6)
    b = np.array([math.log(init / (1 - init))])
    nll, grad = objective(float(expit(b[0])))
    if not (math.isfinite(nll) and math.isfinite(grad)):
        raise AggregationError("beta objective is not finite at initialization")
    opt = OptimizerConfig("adam", config.learning_rate)
    state = OptimizerState()
    trace = []
    best_beta, best_nll = float(expit(b[0])), nll
    for step in range(config.steps):
        beta = float(expit(b[0]))
        nll, grad = objective(beta)
        trace.append({"step": step, "beta": beta, "nll": nll, "grad": grad})
        if nll < best_nll:
            best_beta, best_nll = beta, nll
        state, b = optimizer_step(state, b, np.array([grad * beta * (1 - beta)]), opt)
    beta = float(expit(b[0]))
    nll, grad = objective(beta)
    trace.append({"step": config.steps, "beta": beta, "nll": nll, "grad": grad})
    if nll < best_nll:
        best_beta, best_nll = beta, nll
    if config.snap_endpoints:
        # the sigmoid never reaches 0 or 1 exactly
        for edge in (0.0, 1.0):
            edge_nll, edge_grad = objective(edge)
            if edge_nll < best_nll:
                best_beta, best_nll = edge, edge_nll
                trace.append({"step": "endpoint", "beta": edge, "nll": edge_nll, "grad": edge_grad})
    return best_beta, trace


# --------------------------------------------------------------- ensemble


@dataclass
class Ensemble:
    """Server-side teacher built from client sample sets."""

    sample_sets: list[PosteriorSampleSet]
    model: MlpConfig
    weights: np.ndarray
    mode: str = "beta"
    beta: float = 0.5
    prior: PriorPredictive | None = None
    obs_var: float = 1.0

    def local_predictions(self, x) -> list:
        preds = [local_predictive(s, self.model, x, self.obs_var) for s in self.sample_sets]
        if self.model.head == "categorical":
            return np.stack(preds)
        return preds

    def predict(self, x, mode: str | None = None, beta: float | None = None):
        return fuse(
            self.local_predictions(x), self.weights, mode or self.mode,
            self.beta if beta is None else beta, self.prior,
        )
