"""Client partitioning, one-shot orchestration, and the FedAvg baseline."""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .aggregation import (
    AggregationConfig,
    BetaTunerConfig,
    Ensemble,
    GaussianPrediction,
    PriorPredictive,
    fuse,
    size_weights,
    tune_beta,
)
from .data import Dataset, concat
from .distillation import DistillConfig, distill, distillation_loss
from .io import decode_sample_set, encode_sample_set
from .metrics import classification_metrics, regression_metrics
from .nn import MlpConfig, PriorSpec, forward, mlp_init
from .sampling import (
    OptimizerConfig,
    PosteriorSampleSet,
    SamplerConfig,
    csghmc_sample,
    train_point,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int = 5
    h: float = 0.0
    seed: int = 0
    mode: str = "classification-h"
    sort_feature: int | None = None
    server_fraction: float = 0.2
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.n_clients < 2:
            raise ValueError("n_clients must be >= 2")
        if not 0 <= self.h <= 1:
            raise ValueError("h must lie in [0, 1]")
        if self.mode not in ("classification-h", "regression-sorted"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        for name in ("server_fraction", "test_fraction"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")


@dataclass
class FederatedDataset:
    shards: list[Dataset]
    server_set: Dataset
    test_set: Dataset
    shard_indices: list[np.ndarray] = field(default_factory=list)
    server_indices: np.ndarray | None = None
    test_indices: np.ndarray | None = None

    @property
    def shard_sizes(self) -> list[int]:
        return [len(s) for s in self.shards]


def _holdout(n: int, spec: PartitionSpec, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random test split, then the server set carved from what remains."""
    perm = rng.permutation(n)
    n_test = int(round(spec.test_fraction * n))
    test, train = perm[:n_test], perm[n_test:]
    n_server = int(round(spec.server_fraction * len(train)))
    return np.sort(test), np.sort(train[:n_server]), np.sort(train[n_server:])


def _build(dataset, shard_idx, server_idx, test_idx) -> FederatedDataset:
    return FederatedDataset(
        [dataset.subset(i) for i in shard_idx],
        dataset.subset(server_idx),
        dataset.subset(test_idx),
        shard_idx, server_idx, test_idx,
    )


def heterogeneous_shards(labels: np.ndarray, n_clients: int, h: float, rng) -> list[np.ndarray]:
    """Index sets for the h-mixed partition of ``labels`` (positions 0..n-1).

    Homogeneous shards are dealt round-robin from a class-sorted order, so
    every shard carries the global class mix and remainders land on the
    lowest-indexed clients. From each homogeneous shard a random fraction
    ``h`` is pulled out; the pooled rows are sorted by label and handed back
    in contiguous chunks of the same sizes, client 0 first. Nothing is
    duplicated or dropped.
    """
    n = len(labels)
    if n < n_clients:
        raise ValueError(f"{n} examples cannot be split across {n_clients} clients")
    order = rng.permutation(n)
    order = order[np.argsort(labels[order], kind="stable")]
    homog = [order[i::n_clients] for i in range(n_clients)]
    kept, pulled_counts, pool = [], [], []
    for shard in homog:
        shard = rng.permutation(shard)
        r = int(round(h * len(shard)))
        pool.append(shard[:r])
        kept.append(shard[r:])
        pulled_counts.append(r)
    pool = np.concatenate(pool)
    pool = rng.permutation(pool)
    pool = pool[np.argsort(labels[pool], kind="stable")]
    out, start = [], 0
    for shard, r in zip(kept, pulled_counts):
        out.append(np.sort(np.concatenate([shard, pool[start:start + r]])))
        start += r
    return out


def partition_classification(dataset: Dataset, spec: PartitionSpec) -> FederatedDataset:
    if spec.mode != "classification-h":
        raise ValueError("partition_classification needs mode 'classification-h'")
    if not dataset.is_classification:
        raise ValueError("classification partition needs class labels")
    rng = np.random.default_rng(spec.seed)
    test, server, train = _holdout(len(dataset), spec, rng)
    local = heterogeneous_shards(dataset.y[train], spec.n_clients, spec.h, rng)
    return _build(dataset, [train[i] for i in local], server, test)


def partition_regression(dataset: Dataset, spec: PartitionSpec) -> FederatedDataset:
    """Sort the training rows by one feature (stable) and cut contiguous shards."""
    if spec.mode != "regression-sorted":
        raise ValueError("partition_regression needs mode 'regression-sorted'")
    f = 0 if spec.sort_feature is None else spec.sort_feature
    if not 0 <= f < dataset.X.shape[1]:
        raise ValueError(f"sort_feature {f} out of range for {dataset.X.shape[1]} features")
    rng = np.random.default_rng(spec.seed)
    test, server, train = _holdout(len(dataset), spec, rng)
    if len(train) < spec.n_clients:
        raise ValueError(f"{len(train)} examples cannot be split across {spec.n_clients} clients")
    ordered = train[np.argsort(dataset.X[train, f], kind="stable")]
    return _build(dataset, np.array_split(ordered, spec.n_clients), server, test)


def partition(dataset: Dataset, spec: PartitionSpec) -> FederatedDataset:
    if spec.mode == "classification-h":
        return partition_classification(dataset, spec)
    return partition_regression(dataset, spec)


def class_histogram_tv(fed: FederatedDataset, n_classes: int) -> float:
    """Mean total-variation distance of shard label histograms from the pooled one."""
    pooled = concat(fed.shards).y
    glob = np.bincount(pooled, minlength=n_classes) / len(pooled)
    tvs = [0.5 * np.abs(np.bincount(s.y, minlength=n_classes) / len(s) - glob).sum() for s in fed.shards]
    return float(np.mean(tvs))


def fedavg_aggregate(params_list, shard_sizes) -> np.ndarray:
    arr = np.stack([np.asarray(p, dtype=np.float64) for p in params_list])
    sizes = np.asarray(shard_sizes, dtype=np.float64)
    if len(sizes) != len(arr) or np.any(sizes <= 0):
        raise ValueError("need one positive size per parameter vector")
    return (sizes / sizes.sum()) @ arr


class InProcessTransport:
    """Client -> server channel that round-trips sample sets through the FCSS wire format."""

    def __init__(self):
        self._lock = threading.Lock()
        self._inbox: dict[int, bytes] = {}
        self.messages = 0
        self.bytes_sent = 0

    def submit(self, client_id: int, sample_set: PosteriorSampleSet) -> None:
        blob = encode_sample_set(sample_set)
        with self._lock:
            if client_id in self._inbox:
                raise RuntimeError(f"client {client_id} already submitted")
            self._inbox[client_id] = blob
            self.messages += 1
            self.bytes_sent += len(blob)

    def collect(self) -> list[PosteriorSampleSet]:
        with self._lock:
            return [decode_sample_set(self._inbox[k]) for k in sorted(self._inbox)]


@dataclass
class ExperimentResult:
    config: dict
    sample_counts: list[int]
    beta: float | None
    metrics: dict
    seed: int
    beta_trace: list[dict] = field(default_factory=list)
    sample_sets: list[PosteriorSampleSet] = field(default_factory=list)
    student_params: np.ndarray | None = None
    transport_messages: int = 0

    def to_dict(self) -> dict:
        """JSON-ready summary; ``beta`` is omitted when no interpolation was used."""
        out = {
            "config": self.config,
            "sample_counts": self.sample_counts,
            "metrics": self.metrics,
            "seed": self.seed,
        }
        if self.beta is not None:
            out["beta"] = self.beta
        return out


def student_config(model: MlpConfig) -> MlpConfig:
    head = "categorical" if model.head == "categorical" else "gaussian-mean-and-logvar"
    return MlpConfig(model.input_dim, model.hidden_dims, model.output_dim, head)


def evaluate(pred, data: Dataset, n_bins: int = 15) -> dict:
    if isinstance(pred, GaussianPrediction):
        return regression_metrics(pred.mean, pred.variance, data.y)
    return classification_metrics(pred, data.y, n_bins)


def student_predict(params, config: MlpConfig, X):
    out = forward(params, config, X)
    if config.head == "categorical":
        return out
    return GaussianPrediction(out[0], out[1])


def sample_clients(
    fed: FederatedDataset,
    model: MlpConfig,
    prior: PriorSpec,
    sampler: SamplerConfig,
    transport: InProcessTransport,
    obs_var: float = 1.0,
    workers: int = 1,
) -> None:
    """Steps 1-2: sample every client and send its set to the server."""

    def work(i: int):
        cfg = replace(sampler, seed=sampler.seed + i)
        try:
            s = csghmc_sample(fed.shards[i], model, prior, cfg, client_id=i, obs_var=obs_var)
        except Exception as exc:
            raise RuntimeError(f"client {i}: {exc}") from exc
        transport.submit(i, s)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(work, range(len(fed.shards))))
    else:
        for i in range(len(fed.shards)):
            work(i)


def run_fedavg(fed: FederatedDataset, model: MlpConfig, prior: PriorSpec, optimizer: OptimizerConfig,
               epochs: int, batch_size: int, seed: int, obs_var: float = 1.0) -> np.ndarray:
    """One-round FedAvg: shared init, local training, size-weighted parameter mean."""
    init = mlp_init(model, seed)
    params = [
        train_point(shard, model, prior, optimizer, epochs, batch_size, seed + i, init, obs_var)
        for i, shard in enumerate(fed.shards)
    ]
    return fedavg_aggregate(params, fed.shard_sizes)


def run_one_shot(
    fed: FederatedDataset,
    model: MlpConfig,
    sampler: SamplerConfig,
    agg: AggregationConfig,
    distill_config: DistillConfig | None,
    prior: PriorSpec | None = None,
    tuner: BetaTunerConfig | None = None,
    obs_var: float = 1.0,
    fedavg_optimizer: OptimizerConfig | None = None,
    n_bins: int = 15,
    workers: int = 1,
    config_echo: dict | None = None,
) -> ExperimentResult:
    """Sample, communicate once, aggregate, tune beta, distil, and evaluate."""
    prior = prior or PriorSpec()
    transport = InProcessTransport()
    sample_clients(fed, model, prior, sampler, transport, obs_var, workers)
    sets = transport.collect()
    weights = agg.client_weights if agg.client_weights is not None else size_weights(fed.shard_sizes)
    pp = agg.prior if model.head == "categorical" else (
        agg.prior if agg.prior.kind != "uniform" else PriorPredictive("flat"))
    ens = Ensemble(sets, model, weights, agg.mode, agg.beta, pp, obs_var)

    trace: list[dict] = []
    beta = agg.beta if agg.mode == "beta" else None
    if agg.mode == "beta" and agg.tune:
        server_local = ens.local_predictions(fed.server_set.X)
        beta, trace = tune_beta(server_local, weights, fed.server_set.y, tuner, pp)
        ens.beta = beta

    test_local = ens.local_predictions(fed.test_set.X)
    teacher_pred = fuse(test_local, weights, agg.mode, beta if beta is not None else 0.0, pp)
    metrics = {"teacher": evaluate(teacher_pred, fed.test_set, n_bins), "baselines": {}}
    for mode in ("mixture", "product"):
        metrics["baselines"][mode] = evaluate(fuse(test_local, weights, mode, 0.0, pp), fed.test_set, n_bins)

    if fedavg_optimizer is not None:
        avg = run_fedavg(fed, model, prior, fedavg_optimizer, sampler.epochs_total,
                         sampler.batch_size, sampler.seed, obs_var)
        out = forward(avg, model, fed.test_set.X)
        if model.head == "categorical":
            metrics["baselines"]["fedavg"] = evaluate(out, fed.test_set, n_bins)
        else:
            metrics["baselines"]["fedavg"] = evaluate(
                GaussianPrediction(out, np.full(len(out), obs_var)), fed.test_set, n_bins)

    student_params = None
    if distill_config is not None:
        student = student_config(model)
        teacher_u = fuse(ens.local_predictions(fed.server_set.X), weights, agg.mode,
                         beta if beta is not None else 0.0, pp)
        res = distill(teacher_u, student, fed.server_set.X, distill_config)
        student_params = res.params
        metrics["student"] = evaluate(student_predict(res.params, student, fed.test_set.X),
                                      fed.test_set, n_bins)
        server_kl, _ = distillation_loss(res.params, student, fed.server_set.X, teacher_u)
        metrics["distillation"] = {
            "first_epoch_loss": res.epoch_losses[0],
            "final_epoch_loss": res.epoch_losses[-1],
            "server_kl": server_kl,
        }

    return ExperimentResult(
        config=config_echo or {},
        sample_counts=[len(s) for s in sets],
        beta=beta,
        metrics=metrics,
        seed=sampler.seed,
        beta_trace=trace,
        sample_sets=sets,
        student_params=student_params,
        transport_messages=transport.messages,
    )
