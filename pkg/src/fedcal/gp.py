"""Exact GP regression and the synthetic calibration studies built on it.

The studies fit one GP per client, fuse the client predictions with the
product rule and with the moment-matched mixture, and compare the fused
variances against the observation variance.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .aggregation import (
    GaussianPrediction,
    PriorPredictive,
    mixture_aggregate,
    mixture_moment_match,
    product_aggregate,
    product_gaussian,
    size_weights,
)


class GPError(RuntimeError):
    pass


@dataclass(frozen=True)
class RBFKernel:
    lengthscale: float = 1.0
    signal_variance: float = 1.0

    def __post_init__(self):
        if not (self.lengthscale > 0 and self.signal_variance > 0):
            raise ValueError("lengthscale and signal_variance must be positive")

    def __call__(self, a, b) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        b = np.atleast_2d(np.asarray(b, dtype=np.float64))
        sq = (a**2).sum(1)[:, None] + (b**2).sum(1)[None, :] - 2 * a @ b.T
        return self.signal_variance * np.exp(-np.maximum(sq, 0.0) / (2 * self.lengthscale**2))

    def diag(self, a) -> np.ndarray:
        return np.full(len(np.atleast_2d(a)), self.signal_variance)


@dataclass(frozen=True)
class GpHyper:
    kernel: RBFKernel = field(default_factory=RBFKernel)
    obs_var: float = 0.1
    jitter: float = 1e-9
    max_jitter: float = 1e-5

    def __post_init__(self):
        if not self.obs_var > 0:
            raise ValueError("obs_var must be positive")


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def gp_posterior(X_train, y_train, X_test, hyper: GpHyper) -> GaussianPrediction:
    """Predictive ``N(mu, obs_var + k** - k*' (K + obs_var I)^-1 k*)`` at each test point.

    Jitter (relative to the signal variance) starts at ``hyper.jitter`` and
    grows tenfold up to ``hyper.max_jitter`` if the Cholesky factorization
    fails.
    """
    X_test = _as_2d(X_test)
    k = hyper.kernel
    prior_var = hyper.obs_var + k.diag(X_test)
    if X_train is None or len(X_train) == 0:
        return GaussianPrediction(np.zeros(len(X_test)), prior_var)
    X_train = _as_2d(X_train)
    y = np.asarray(y_train, dtype=np.float64)
    gram = k(X_train, X_train) + hyper.obs_var * np.eye(len(X_train))
    jitter = hyper.jitter * k.signal_variance
    while True:
        try:
            factor = cho_factor(gram + jitter * np.eye(len(gram)), lower=True)
            break
        except LinAlgError:
            jitter *= 10
            if jitter > hyper.max_jitter * k.signal_variance * (1 + 1e-12):
                raise GPError("Cholesky factorization failed after jitter escalation") from None
    k_star = k(X_train, X_test)
    mean = k_star.T @ cho_solve(factor, y)
    v = cho_solve(factor, k_star)
    var = prior_var - np.einsum("ij,ij->j", k_star, v)
    return GaussianPrediction(mean, np.maximum(var, np.finfo(float).tiny))


# ------------------------------------------------------------ regression


@dataclass
class CalibrationReport:
    partition_kind: str
    m: int
    n_per_client: int
    obs_var: float
    records: list[dict]
    summary: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.records:
            writer = csv.DictWriter(buf, fieldnames=list(self.records[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(self.records)
        return buf.getvalue()


def true_function(x):
    return np.sin(x)


def client_inputs(partition_kind: str, m: int, n_per_client: int, lengthscale: float,
                  rng: np.random.Generator, width: float | None = None,
                  gap: float | None = None) -> tuple[list[np.ndarray], list[tuple[float, float]]]:
    """Per-client 1-D inputs and the interval each client covers.

    Homogeneous clients all draw from one interval; heterogeneous clients
    get disjoint intervals separated by ``gap`` (default ten lengthscales).
    """
    width = 10 * lengthscale if width is None else width
    gap = 10 * lengthscale if gap is None else gap
    if partition_kind == "idealized-homogeneous":
        intervals = [(0.0, width)] * m
    elif partition_kind == "idealized-heterogeneous":
        intervals = [(k * (width + gap), k * (width + gap) + width) for k in range(m)]
    else:
        raise ValueError(f"unknown partition kind {partition_kind!r}")
    xs = [rng.uniform(lo, hi, size=n_per_client) for lo, hi in intervals]
    return xs, intervals


def run_regression_calibration_study(
    partition_kind: str = "idealized-homogeneous",
    m: int = 5,
    n_per_client: int = 200,
    hyper: GpHyper | None = None,
    seed: int = 0,
    n_test: int = 20,
    prior: str = "flat",
    width: float | None = None,
    gap: float | None = None,
) -> CalibrationReport:
    """Fit a GP per client, fuse with the product rule and the mixture.

    ``prior`` selects the product rule's prior correction: ``flat`` (zero
    precision) or ``gp`` (the GP prior predictive ``N(0, obs_var + s^2)``).
    Test points sit in the central 80% of the data interval (homogeneous) or
    of each client's interval (heterogeneous, spread round-robin).
    """
    if m < 2:
        raise ValueError("a calibration study needs m >= 2 clients")
    hyper = hyper or GpHyper(RBFKernel(1.0, 10.0), 0.1)
    rng = np.random.default_rng(seed)
    ell = hyper.kernel.lengthscale
    xs, intervals = client_inputs(partition_kind, m, n_per_client, ell, rng, width, gap)
    ys = [true_function(x) + math.sqrt(hyper.obs_var) * rng.standard_normal(len(x)) for x in xs]

    if partition_kind == "idealized-homogeneous":
        lo, hi = intervals[0]
        x_test = np.linspace(lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo), n_test)
        owner = np.full(n_test, -1)
    else:
        owner = np.arange(n_test) % m
        x_test = np.empty(n_test)
        for k in range(m):
            lo, hi = intervals[k]
            idx = np.flatnonzero(owner == k)
            x_test[idx] = np.linspace(lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo), len(idx) + 2)[1:-1]

    locals_ = [gp_posterior(x, y, x_test, hyper) for x, y in zip(xs, ys)]
    weights = size_weights([len(x) for x in xs])
    kss = hyper.kernel.diag(x_test[:, None])
    if prior == "flat":
        prior_pred = PriorPredictive("flat")
    elif prior == "gp":
        prior_pred = PriorPredictive("gaussian", 0.0, hyper.obs_var + hyper.kernel.signal_variance)
    else:
        raise ValueError(f"unknown study prior {prior!r}")
    bcm = product_gaussian(locals_, prior_pred)
    mix = mixture_moment_match(locals_, weights)

    records = []
    for j, x in enumerate(x_test):
        k = int(owner[j])
        w_k = float(weights[k]) if k >= 0 else 1.0
        records.append({
            "x": float(x),
            "client": k,
            "f": float(true_function(x)),
            "mu_bcm": float(bcm.mean[j]),
            "var_bcm": float(bcm.variance[j]),
            "mu_mix": float(mix.mean[j]),
            "var_mix": float(mix.variance[j]),
            "obs_var": hyper.obs_var,
            "k_star_star": float(kss[j]),
            "mixture_floor": float(hyper.obs_var + kss[j] * (1 - w_k)),
        })
    bcm_ratio = bcm.variance / hyper.obs_var
    mix_ratio = mix.variance / hyper.obs_var
    summary = {
        "bcm_ratio_mean": float(bcm_ratio.mean()),
        "bcm_ratio_min": float(bcm_ratio.min()),
        "bcm_ratio_max": float(bcm_ratio.max()),
        "mix_ratio_mean": float(mix_ratio.mean()),
        "mix_ratio_min": float(mix_ratio.min()),
        "mix_ratio_max": float(mix_ratio.max()),
        "bcm_mean_max_z": float(np.max(np.abs(bcm.mean - true_function(x_test)) / np.sqrt(bcm.variance))),
    }
    config = {
        "lengthscale": ell,
        "signal_variance": hyper.kernel.signal_variance,
        "prior": prior,
        "seed": seed,
        "n_test": n_test,
        "intervals": [list(iv) for iv in (intervals if partition_kind != "idealized-homogeneous" else intervals[:1])],
    }
    return CalibrationReport(partition_kind, m, n_per_client, hyper.obs_var, records, summary, config)


# -------------------------------------------------------- classification


def simplex_grid(n_classes: int, n_points: int = 100, seed: int = 0) -> np.ndarray:
    """``n_points`` non-uniform points on the probability simplex."""
    if n_classes == 2:
        a = np.linspace(0.01, 0.99, n_points + 1)
        a = a[~np.isclose(a, 0.5)][:n_points]
        return np.stack([a, 1 - a], axis=1)
    rng = np.random.default_rng(seed)
    pts = rng.dirichlet(np.ones(n_classes), size=n_points)
    return pts


def run_classification_calibration_study(
    true_dists,
    m: int,
    partition_kind: str,
    weights=None,
) -> dict:
    """Idealized local models fused by product and mixture, for each ``p_T``.

    Homogeneous: every client outputs ``p_T``. Heterogeneous: client 0
    outputs ``p_T`` and the rest output the uniform prior.
    """
    p_true = np.atleast_2d(np.asarray(true_dists, dtype=np.float64))
    n_classes = p_true.shape[1]
    weights = np.full(m, 1.0 / m) if weights is None else np.asarray(weights, dtype=np.float64)
    uniform = np.full(n_classes, 1.0 / n_classes)
    records = []
    violations = 0
    for p in p_true:
        if partition_kind == "idealized-homogeneous":
            locals_ = np.stack([p] * m)
        elif partition_kind == "idealized-heterogeneous":
            locals_ = np.stack([p] + [uniform] * (m - 1))
        else:
            raise ValueError(f"unknown partition kind {partition_kind!r}")
        c = int(np.argmax(p))
        p_bcm = float(product_aggregate(locals_)[c])
        p_mix = float(mixture_aggregate(locals_, weights)[c])
        degenerate = np.allclose(p, uniform, atol=1e-15)
        if degenerate:
            checks = {"bcm": abs(p_bcm - p[c]) < 1e-12, "mix": abs(p_mix - p[c]) < 1e-12}
        elif partition_kind == "idealized-homogeneous":
            checks = {"bcm": p_bcm > p[c], "mix": abs(p_mix - p[c]) < 1e-12}
        else:
            checks = {"bcm": abs(p_bcm - p[c]) < 1e-12, "mix": p_mix < p[c]}
        violations += sum(not ok for ok in checks.values())
        records.append({
            "p_true": p.tolist(), "class": c, "p_true_c": float(p[c]),
            "p_bcm_c": p_bcm, "p_mix_c": p_mix,
            "bcm_ok": bool(checks["bcm"]), "mix_ok": bool(checks["mix"]),
        })
    return {
        "partition_kind": partition_kind,
        "m": m,
        "n_classes": n_classes,
        "violations": violations,
        "records": records,
    }
