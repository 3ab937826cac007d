"""Shared oracles for the test-suite."""

import numpy as np

from fedcal.nn import Batch, MlpConfig, PriorSpec, loss_and_grad, mlp_init


def finite_difference(f, x, step=1e-5):
    """Central differences of scalar ``f`` at every coordinate of ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        out[i] = (f(x + e) - f(x - e)) / (2 * step)
    return out


def relative_error(a, b, floor=1e-6):
    """Elementwise |a - b| / max(|a|, |b|, floor). The floor stops exact zeros dividing by zero."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


HEAD_CHOICES = ("categorical", "gaussian-mean-only", "gaussian-mean-and-logvar")


def random_problem(seed):
    """A small random MLP, batch, prior and temperature."""
    rng = np.random.default_rng(seed)
    head = HEAD_CHOICES[seed % 3]
    d_in = int(rng.integers(1, 4))
    hidden = tuple(int(h) for h in rng.integers(2, 6, size=int(rng.integers(1, 3))))
    k = int(rng.integers(2, 5)) if head == "categorical" else 1
    cfg = MlpConfig(d_in, hidden, k, head)
    params = mlp_init(cfg, seed) + 0.1 * rng.standard_normal(cfg.n_params)
    n = int(rng.integers(3, 9))
    x = rng.standard_normal((n, d_in))
    y = rng.integers(0, k, size=n) if head == "categorical" else rng.standard_normal(n)
    prior = PriorSpec(float(rng.uniform(0.5, 3.0)))
    temperature = float(rng.uniform(0.1, 2.0))
    n_data = int(rng.integers(n, 5 * n))
    return cfg, params, Batch(x, y), prior, temperature, n_data


def gradient_check(seed, obs_var=0.7):
    cfg, params, batch, prior, t, n_data = random_problem(seed)
    _, grad = loss_and_grad(params, cfg, batch, prior, t, n_data, obs_var)
    numeric = finite_difference(
        lambda p: loss_and_grad(p, cfg, batch, prior, t, n_data, obs_var)[0], params)
    return grad, numeric


def conjugate_problem(n=50, prior_sigma=1.0, obs_var=1.0, seed=123):
    """1-D Bayesian linear regression with its closed-form posterior over (w, b)."""
    from fedcal.data import Dataset

    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    y = 2.0 * x + 0.5 + rng.normal(0.0, np.sqrt(obs_var), n)
    design = np.column_stack([x, np.ones(n)])
    precision = design.T @ design / obs_var + np.eye(2) / prior_sigma**2
    cov = np.linalg.inv(precision)
    mean = cov @ design.T @ y / obs_var
    return Dataset(x[:, None], y), mean, cov


def conjugate_sampler(seed, **overrides):
    from fedcal.sampling import SamplerConfig

    kw = dict(cycles=200, epochs_total=40000, samples_per_cycle=5, max_samples=1000,
              base_learning_rate=0.01, temperature=1.0, batch_size=50, seed=seed)
    kw.update(overrides)
    return SamplerConfig(**kw)
