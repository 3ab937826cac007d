"""Point optimizers and the cyclical SG-HMC posterior sampler."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .nn import Batch, MlpConfig, NonFiniteError, PriorSpec, loss_and_grad, mlp_init

OPTIMIZERS = ("sgd", "sgdm", "adam")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))


@dataclass
class OptimizerState:
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def optimizer_step(
    state: OptimizerState, params: np.ndarray, grad: np.ndarray, config: OptimizerConfig
) -> tuple[OptimizerState, np.ndarray]:
    """One SGD / SGD-momentum / Adam update. Inputs are not mutated."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != np.shape(params):
        raise ValueError("gradient and parameters differ in length")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient passed to optimizer")
    lr = config.learning_rate
    t = state.step + 1
    if config.kind == "sgd":
        return OptimizerState(t), params - lr * grad
    if config.kind == "sgdm":
        buf = grad if state.m is None else config.momentum * state.m + grad
        return OptimizerState(t, buf), params - lr * buf
    b1, b2 = config.adam_betas
    m = (1 - b1) * grad if state.m is None else b1 * state.m + (1 - b1) * grad
    v = (1 - b2) * grad**2 if state.v is None else b2 * state.v + (1 - b2) * grad**2
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return OptimizerState(t, m, v), params - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def train_point(
    data: Dataset,
    config: MlpConfig,
    prior: PriorSpec,
    optimizer: OptimizerConfig,
    epochs: int,
    batch_size: int,
    seed: int,
    init: np.ndarray | None = None,
    obs_var: float = 1.0,
) -> np.ndarray:
    """Plain MAP training (used by the FedAvg baseline)."""
    rng = np.random.default_rng(seed)
    params = mlp_init(config, seed) if init is None else np.array(init, dtype=np.float64)
    state = OptimizerState()
    n = len(data)
    for _ in range(epochs):
        for idx in iterate_minibatches(n, batch_size, rng):
            _, grad = loss_and_grad(
                params, config, Batch(data.X[idx], data.y[idx]), prior, 1.0, n, obs_var
            )
            state, params = optimizer_step(state, params, grad, optimizer)
    return params


@dataclass(frozen=True)
class SamplerConfig:
    cycles: int = 5
    epochs_total: int = 25
    samples_per_cycle: int = 2
    max_samples: int = 6
    base_learning_rate: float = 0.1
    temperature: float = 1.0
    batch_size: int = 100
    seed: int = 0
    momentum: float = 0.9
    exploration_fraction: float = 0.5
    temperature_mode: str = "fixed"

    def __post_init__(self):
        for name in ("cycles", "epochs_total", "samples_per_cycle", "max_samples", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.base_learning_rate > 0:
            raise ValueError("base_learning_rate must be positive")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0 <= self.exploration_fraction < 1:
            raise ValueError("exploration_fraction must lie in [0, 1)")
        if self.temperature_mode not in ("fixed", "inverse-n"):
            raise ValueError(f"unknown temperature_mode {self.temperature_mode!r}")

    def temperature_for(self, n: int) -> float:
        """``inverse-n`` mode uses T = 1/|D_i| for a shard of size ``n``."""
        return 1.0 / n if self.temperature_mode == "inverse-n" else self.temperature

    @property
    def n_samples(self) -> int:
        return min(self.cycles * self.samples_per_cycle, self.max_samples)

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PosteriorSampleSet:
    samples: list[np.ndarray]
    client_id: int = 0
    fingerprint: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.samples:
            raise ValueError("a sample set needs at least one sample")
        self.samples = [np.asarray(s, dtype=np.float64) for s in self.samples]
        if len({s.size for s in self.samples}) != 1:
            raise ValueError("all samples must have the same length")

    def __len__(self):
        return len(self.samples)

    def as_array(self) -> np.ndarray:
        return np.stack(self.samples)


def cosine_lr(base: float, step_in_cycle: int, cycle_len: int) -> float:
    return 0.5 * base * (math.cos(math.pi * step_in_cycle / cycle_len) + 1.0)


def _sample_steps(cycle_len: int, explore: int, per_cycle: int) -> list[int]:
    """Evenly spaced in-cycle step indices within the sampling phase, ending at the last step."""
    span = cycle_len - explore
    return sorted({explore + max(1, round((j + 1) * span / per_cycle)) - 1 for j in range(per_cycle)})


def csghmc_sample(
    data: Dataset,
    config: MlpConfig,
    prior: PriorSpec,
    sampler: SamplerConfig,
    client_id: int = 0,
    obs_var: float = 1.0,
    init: np.ndarray | None = None,
    inject_noise: bool = True,
) -> PosteriorSampleSet:
    """Cyclical SG-HMC (cosine step size restarted every cycle).

    Each cycle spends its first ``exploration_fraction`` of steps as
    noise-free momentum descent and the rest as SG-HMC with injected noise
    of variance ``2 * (1 - momentum) * lr * T / n``. With the energy from
    ``loss_and_grad`` this targets ``p(theta) * p(D | theta) ** (1 / T)``.
    """
    n = len(data)
    if n == 0:
        raise ValueError("cannot sample from an empty dataset")
    # separate streams so batch order does not depend on whether noise is drawn
    batch_rng, noise_rng = np.random.default_rng(sampler.seed).spawn(2)
    params = mlp_init(config, sampler.seed) if init is None else np.array(init, dtype=np.float64)
    steps_per_epoch = math.ceil(n / sampler.batch_size)
    total = sampler.epochs_total * steps_per_epoch
    cycle_len = total // sampler.cycles
    if cycle_len < 2:
        raise ValueError(f"{total} total steps cannot form {sampler.cycles} cycles")
    explore = int(sampler.exploration_fraction * cycle_len)
    take = set(_sample_steps(cycle_len, explore, sampler.samples_per_cycle))
    temperature = sampler.temperature_for(n)
    friction = 1.0 - sampler.momentum
    velocity = np.zeros_like(params)
    samples: list[np.ndarray] = []
    step = 0
    batches = iter(())
    while len(samples) < sampler.n_samples and step < cycle_len * sampler.cycles:
        idx = next(batches, None)
        if idx is None:
            batches = iterate_minibatches(n, sampler.batch_size, batch_rng)
            idx = next(batches)
        cycle, k = divmod(step, cycle_len)
        lr = cosine_lr(sampler.base_learning_rate, k, cycle_len)
        try:
            _, grad = loss_and_grad(
                params, config, Batch(data.X[idx], data.y[idx]), prior,
                temperature, n, obs_var,
            )
        except NonFiniteError as exc:
            raise NonFiniteError(
                f"sampler diverged at cycle {cycle}, step {k}: {exc}", exc.layer
            ) from exc
        velocity = sampler.momentum * velocity - lr * grad
        if k >= explore and inject_noise:
            scale = math.sqrt(2.0 * friction * lr * temperature / n)
            velocity = velocity + scale * noise_rng.standard_normal(params.size)
        params = params + velocity
        if not np.all(np.isfinite(params)):
            raise NonFiniteError(f"sampler diverged at cycle {cycle}, step {k}")
        if k in take:
            samples.append(params.copy())
        step += 1
    return PosteriorSampleSet(
        samples, client_id, sampler.fingerprint(), sampler.seed,
        {"n_data": n, "steps": step, "cycle_len": cycle_len},
    )
