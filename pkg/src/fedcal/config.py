"""Experiment configuration: YAML file -> typed config objects."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .aggregation import AggregationConfig, BetaTunerConfig, PriorPredictive
from .data import Dataset, load_csv, make_synthetic
from .distillation import DistillConfig
from .federation import PartitionSpec
from .io import MissingFileError
from .nn import MlpConfig, PriorSpec
from .sampling import OptimizerConfig, SamplerConfig

TASKS = ("classification", "regression", "gp-study", "class-study")
INVERSE_N = ("1/|D|", "1/n", "inverse-n")


class ConfigError(ValueError):
    pass


def _pick(cls, d: dict | None, where: str, **overrides):
    d = dict(d or {})
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    d.update(overrides)
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class ExperimentConfig:
    task: str
    dataset: dict
    model: MlpConfig | None
    partition: PartitionSpec | None
    sampler: SamplerConfig | None
    aggregation: AggregationConfig
    distill: DistillConfig | None
    tuner: BetaTunerConfig
    prior: PriorSpec
    fedavg: OptimizerConfig | None
    n_bins: int = 15
    obs_var: float = 1.0
    seeds: list[int] = field(default_factory=lambda: [0])
    output: str = "runs/experiment"
    gp_study: dict = field(default_factory=dict)
    class_study: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def echo(self) -> dict:
        """The parsed configuration as plain data, for result files."""
        out = copy.deepcopy(self.raw)
        out.pop("output", None)
        out.pop("_base_dir", None)
        return out

    def with_seed(self, seed: int) -> "ExperimentConfig":
        cfg = copy.copy(self)
        if self.sampler is not None:
            cfg.sampler = SamplerConfig(**{**asdict(self.sampler), "seed": seed})
        if self.partition is not None:
            cfg.partition = PartitionSpec(**{**asdict(self.partition), "seed": seed})
        if self.distill is not None:
            cfg.distill = DistillConfig(self.distill.epochs, self.distill.optimizer,
                                        self.distill.batch_size, seed)
        return cfg

    def build_model(self, ds: Dataset) -> MlpConfig:
        """The model config with input/output widths taken from ``ds``."""
        spec = self.raw.get("model", {})
        out_dim = ds.n_classes if ds.is_classification else 1
        for key, actual in (("input_dim", ds.X.shape[1]), ("output_dim", out_dim)):
            if key in spec and int(spec[key]) != actual:
                raise ConfigError(f"model.{key}={spec[key]} but the dataset implies {actual}")
        return MlpConfig(ds.X.shape[1], self.model.hidden_dims, out_dim, self.model.head)

    def load_dataset(self, seed: int) -> Dataset:
        d = dict(self.dataset)
        source = d.pop("source", "synthetic")
        if source == "synthetic":
            kind = d.pop("kind")
            return make_synthetic(kind, seed=int(d.pop("seed", seed)), **d.pop("params", {}))
        if source == "csv":
            path = Path(d["path"])
            if not path.is_absolute() and self.raw.get("_base_dir"):
                path = Path(self.raw["_base_dir"]) / path
            return load_csv(path, d["target"], bool(d.get("classification", False)),
                            bool(d.get("drop_incomplete", False)))
        raise ConfigError(f"unknown dataset source {source!r}")


def _optimizer(d: dict | None, where: str, default: OptimizerConfig | None) -> OptimizerConfig | None:
    if d is None:
        return default
    return _pick(OptimizerConfig, d, where)


def parse_config(raw: dict, base_dir: str | Path | None = None) -> ExperimentConfig:
    raw = copy.deepcopy(raw)
    if base_dir is not None:
        raw["_base_dir"] = str(base_dir)
    task = raw.get("task")
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    seeds = [int(s) for s in raw.get("seeds", [0])]
    if not seeds:
        raise ConfigError("seeds must be non-empty")

    model = partition = sampler = distill = fedavg = None
    dataset = raw.get("dataset", {})
    if task in ("classification", "regression"):
        if not dataset:
            raise ConfigError("dataset section is required")
        m = dict(raw.get("model", {}))
        m.setdefault("head", "categorical" if task == "classification" else "gaussian-mean-only")
        m.setdefault("input_dim", 1)
        m.setdefault("output_dim", 2 if m["head"] == "categorical" else 1)
        if task == "classification" and m["head"] != "categorical":
            raise ConfigError("classification task needs a categorical head")
        if task == "regression" and m["head"] == "categorical":
            raise ConfigError("regression task needs a gaussian head")
        model = _pick(MlpConfig, m, "model")
        p = dict(raw.get("partition", {}))
        p.setdefault("mode", "classification-h" if task == "classification" else "regression-sorted")
        p.pop("seed", None)
        partition = _pick(PartitionSpec, p, "partition", seed=seeds[0])
        s = dict(raw.get("sampler", {}))
        s.pop("seed", None)
        if str(s.get("temperature", "")).strip() in INVERSE_N:
            s["temperature"] = 1.0
            s["temperature_mode"] = "inverse-n"
        sampler = _pick(SamplerConfig, s, "sampler", seed=seeds[0])
        if raw.get("distill", {}) is not None:
            dd = dict(raw.get("distill", {}))
            opt = _optimizer(dd.pop("optimizer", None), "distill.optimizer", OptimizerConfig("adam", 1e-4))
            dd.pop("seed", None)
            distill = _pick(DistillConfig, dd, "distill", optimizer=opt, seed=seeds[0])
        fedavg = _optimizer(raw.get("fedavg"), "fedavg", None)

    a = dict(raw.get("aggregation", {}))
    prior_d = a.pop("prior", None)
    if prior_d is None:
        pp = PriorPredictive("uniform" if task != "regression" else "flat")
    else:
        pp = _pick(PriorPredictive, prior_d, "aggregation.prior")
    if task == "classification" and pp.kind != "uniform":
        raise ConfigError("classification prior predictive must be uniform")
    aggregation = _pick(AggregationConfig, a, "aggregation", prior=pp)

    return ExperimentConfig(
        task=task,
        dataset=dataset,
        model=model,
        partition=partition,
        sampler=sampler,
        aggregation=aggregation,
        distill=distill,
        tuner=_pick(BetaTunerConfig, raw.get("beta_tuner"), "beta_tuner"),
        prior=_pick(PriorSpec, raw.get("prior"), "prior"),
        fedavg=fedavg,
        n_bins=int(raw.get("metrics", {}).get("n_bins", 15)),
        obs_var=float(raw.get("obs_var", 1.0)),
        seeds=seeds,
        output=str(raw.get("output", "runs/experiment")),
        gp_study=dict(raw.get("gp_study", {})),
        class_study=dict(raw.get("class_study", {})),
        raw=raw,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"config file not found: {path}", path)
    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(raw, base_dir=path.parent)
