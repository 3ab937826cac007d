"""Resumable, file-backed stages of the one-shot pipeline.

Each stage reads the artifacts of the previous one from the seed's output
directory and writes its own, so any stage can be rerun in isolation::

    <out>/seed_<s>/partition.json
    <out>/seed_<s>/samples/client_<i>.fcss
    <out>/seed_<s>/aggregate.json, ensemble_test.csv
    <out>/seed_<s>/beta.json
    <out>/seed_<s>/student.fcss, distill.json
    <out>/seed_<s>/result.json, metrics.csv, metadata.json
    <out>/summary.json, metrics.csv          (run, across seeds)
    <out>/gp_<kind>.json/.csv, class_study.json   (gp-verify)
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import logging
import math
from pathlib import Path

import numpy as np

from . import __version__
from .aggregation import Ensemble, GaussianPrediction, fuse, size_weights, tune_beta
from .config import ExperimentConfig
from .data import Dataset, normalize
from .distillation import distill, distillation_loss
from .federation import (
    FederatedDataset,
    InProcessTransport,
    evaluate,
    partition,
    run_fedavg,
    sample_clients,
    student_config,
    student_predict,
)
from .gp import GpHyper, RBFKernel, run_classification_calibration_study, run_regression_calibration_study, simplex_grid
from .io import MissingFileError, read_json, read_sample_set, write_json, write_sample_set
from .nn import forward
from .sampling import PosteriorSampleSet

log = logging.getLogger(__name__)

STAGES = ("partition", "sample", "aggregate", "tune-beta", "distill", "eval")


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingFileError(
            f"stage {stage!r} needs {path}, which does not exist; run the earlier stage first", path)
    return path


def seed_dir(out: Path, seed: int) -> Path:
    return Path(out) / f"seed_{seed}"


def _digest(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.X).tobytes())
    h.update(np.ascontiguousarray(ds.y).tobytes())
    return h.hexdigest()[:16]


# ------------------------------------------------------------- partition


def stage_partition(cfg: ExperimentConfig, seed: int, out: Path) -> Path:
    cfg = cfg.with_seed(seed)
    ds = cfg.load_dataset(seed)
    fed = partition(ds, cfg.partition)
    norm = None
    if cfg.dataset.get("normalize", cfg.dataset.get("source") == "csv"):
        train = np.concatenate([*fed.shard_indices, fed.server_indices])
        x_train = ds.X[train]
        std = x_train.std(axis=0)
        std[std == 0] = 1.0
        norm = {"mean": x_train.mean(axis=0).tolist(), "std": std.tolist()}
    doc = {
        "dataset_digest": _digest(ds),
        "n_rows": len(ds),
        "n_classes": ds.n_classes,
        "shards": [i.tolist() for i in fed.shard_indices],
        "server": fed.server_indices.tolist(),
        "test": fed.test_indices.tolist(),
        "normalization": norm,
    }
    return write_json(seed_dir(out, seed) / "partition.json", doc)


def load_federated(cfg: ExperimentConfig, seed: int, out: Path, stage: str) -> FederatedDataset:
    doc = read_json(_require(seed_dir(out, seed) / "partition.json", stage))
    ds = cfg.load_dataset(seed)
    if _digest(ds) != doc["dataset_digest"]:
        raise ValueError("dataset changed since the partition stage; rerun partition")
    if doc["normalization"] is not None:
        ds = normalize(ds, np.array(doc["normalization"]["mean"]), np.array(doc["normalization"]["std"]))
    shards = [np.array(i, dtype=np.int64) for i in doc["shards"]]
    server = np.array(doc["server"], dtype=np.int64)
    test = np.array(doc["test"], dtype=np.int64)
    return FederatedDataset([ds.subset(i) for i in shards], ds.subset(server), ds.subset(test),
                            shards, server, test)


# ---------------------------------------------------------------- sample


def _sample_path(out: Path, seed: int, client: int) -> Path:
    return seed_dir(out, seed) / "samples" / f"client_{client}.fcss"


def stage_sample(cfg: ExperimentConfig, seed: int, out: Path, workers: int = 1) -> list[Path]:
    cfg = cfg.with_seed(seed)
    fed = load_federated(cfg, seed, out, "sample")
    model = cfg.build_model(fed.shards[0])
    transport = InProcessTransport()
    sample_clients(fed, model, cfg.prior, cfg.sampler, transport, cfg.obs_var, workers)
    return [write_sample_set(_sample_path(out, seed, s.client_id), s) for s in transport.collect()]


def load_samples(cfg: ExperimentConfig, seed: int, out: Path, stage: str) -> list[PosteriorSampleSet]:
    n = cfg.partition.n_clients
    return [read_sample_set(_require(_sample_path(out, seed, i), stage)) for i in range(n)]


def _ensemble(cfg: ExperimentConfig, seed: int, out: Path, stage: str):
    fed = load_federated(cfg, seed, out, stage)
    sets = load_samples(cfg, seed, out, stage)
    model = cfg.build_model(fed.shards[0])
    agg = cfg.aggregation
    weights = agg.client_weights if agg.client_weights is not None else size_weights(fed.shard_sizes)
    ens = Ensemble(sets, model, weights, agg.mode, agg.beta, agg.prior, cfg.obs_var)
    return fed, ens


# ------------------------------------------------------------- aggregate


def export_predictions(preds: dict[tuple[str, float | None], object]) -> str:
    """CSV rows ``input_id, mode, beta, <p_k...> | mean, variance``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header_done = False
    for (mode, beta), pred in preds.items():
        if isinstance(pred, GaussianPrediction):
            cols = [pred.mean, pred.variance]
            names = ["mean", "variance"]
        else:
            cols = list(np.asarray(pred).T)
            names = [f"p_{k}" for k in range(len(cols))]
        if not header_done:
            writer.writerow(["input_id", "mode", "beta", *names])
            header_done = True
        for i in range(len(cols[0])):
            writer.writerow([i, mode, "" if beta is None else repr(beta), *(repr(float(c[i])) for c in cols)])
    return buf.getvalue()


def stage_aggregate(cfg: ExperimentConfig, seed: int, out: Path) -> Path:
    fed, ens = _ensemble(cfg, seed, out, "aggregate")
    local = ens.local_predictions(fed.test_set.X)
    preds = {
        ("mixture", None): fuse(local, ens.weights, "mixture", 0.0, ens.prior),
        ("product", None): fuse(local, ens.weights, "product", 0.0, ens.prior),
        ("beta", ens.beta): fuse(local, ens.weights, "beta", ens.beta, ens.prior),
    }
    d = seed_dir(out, seed)
    (d / "ensemble_test.csv").write_text(export_predictions(preds))
    doc = {
        f"{mode}" if beta is None else f"{mode}@{beta!r}": evaluate(p, fed.test_set, cfg.n_bins)
        for (mode, beta), p in preds.items()
    }
    return write_json(d / "aggregate.json", doc)


# ------------------------------------------------------------- tune-beta


def stage_tune_beta(cfg: ExperimentConfig, seed: int, out: Path) -> Path:
    fed, ens = _ensemble(cfg, seed, out, "tune-beta")
    agg = cfg.aggregation
    if agg.mode != "beta":
        doc = {"beta": None, "tuned": False, "trace": []}
    elif not agg.tune:
        doc = {"beta": agg.beta, "tuned": False, "trace": []}
    else:
        local = ens.local_predictions(fed.server_set.X)
        beta, trace = tune_beta(local, ens.weights, fed.server_set.y, cfg.tuner, ens.prior)
        doc = {"beta": beta, "tuned": True, "trace": trace}
    return write_json(seed_dir(out, seed) / "beta.json", doc)


def _beta(cfg, seed, out, stage) -> float | None:
    return read_json(_require(seed_dir(out, seed) / "beta.json", stage))["beta"]


# --------------------------------------------------------------- distill


def stage_distill(cfg: ExperimentConfig, seed: int, out: Path) -> Path | None:
    if cfg.distill is None:
        return None
    cfg = cfg.with_seed(seed)
    fed, ens = _ensemble(cfg, seed, out, "distill")
    beta = _beta(cfg, seed, out, "distill")
    teacher_u = ens.predict(fed.server_set.X, beta=beta if beta is not None else 0.0)
    student = student_config(ens.model)
    res = distill(teacher_u, student, fed.server_set.X, cfg.distill)
    kl, _ = distillation_loss(res.params, student, fed.server_set.X, teacher_u)
    d = seed_dir(out, seed)
    write_sample_set(d / "student.fcss", PosteriorSampleSet([res.params], -1, "student", seed))
    return write_json(d / "distill.json", {
        "epoch_losses": res.epoch_losses,
        "first_epoch_loss": res.epoch_losses[0],
        "final_epoch_loss": res.epoch_losses[-1],
        "server_kl": kl,
    })


# ------------------------------------------------------------------ eval


def _flatten(prefix: str, d: dict, rows: list):
    for k, v in d.items():
        key = f"{prefix}.{k}" if prefix else k
        if isinstance(v, dict):
            _flatten(key, v, rows)
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            rows.append((key, v))


def metrics_csv(metrics: dict) -> str:
    rows: list = []
    _flatten("", metrics, rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k, v in rows:
        w.writerow([k, repr(float(v))])
    return buf.getvalue()


def stage_eval(cfg: ExperimentConfig, seed: int, out: Path) -> Path:
    cfg = cfg.with_seed(seed)
    fed, ens = _ensemble(cfg, seed, out, "eval")
    beta = _beta(cfg, seed, out, "eval")
    agg = cfg.aggregation
    local = ens.local_predictions(fed.test_set.X)
    teacher = fuse(local, ens.weights, agg.mode, beta if beta is not None else 0.0, ens.prior)
    metrics = {"teacher": evaluate(teacher, fed.test_set, cfg.n_bins), "baselines": {}}
    for mode in ("mixture", "product"):
        metrics["baselines"][mode] = evaluate(fuse(local, ens.weights, mode, 0.0, ens.prior),
                                              fed.test_set, cfg.n_bins)
    if cfg.fedavg is not None:
        avg = run_fedavg(fed, ens.model, cfg.prior, cfg.fedavg, cfg.sampler.epochs_total,
                         cfg.sampler.batch_size, seed, cfg.obs_var)
        pred = forward(avg, ens.model, fed.test_set.X)
        if ens.model.head != "categorical":
            pred = GaussianPrediction(pred, np.full(len(pred), cfg.obs_var))
        metrics["baselines"]["fedavg"] = evaluate(pred, fed.test_set, cfg.n_bins)
    d = seed_dir(out, seed)
    if cfg.distill is not None:
        student = student_config(ens.model)
        params = read_sample_set(_require(d / "student.fcss", "eval")).samples[0]
        metrics["student"] = evaluate(student_predict(params, student, fed.test_set.X),
                                      fed.test_set, cfg.n_bins)
        dj = read_json(d / "distill.json")
        metrics["distillation"] = {k: dj[k] for k in ("first_epoch_loss", "final_epoch_loss", "server_kl")}
    result = {
        "config": cfg.echo(),
        "sample_counts": [len(s) for s in ens.sample_sets],
        "metrics": metrics,
        "seed": seed,
    }
    if beta is not None:
        result["beta"] = beta
    (d / "metrics.csv").write_text(metrics_csv(metrics))
    write_json(d / "metadata.json", {
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "fedcal_version": __version__,
    })
    return write_json(d / "result.json", result)


# --------------------------------------------------------------- summary


def summarize(results: list[dict]) -> dict:
    """Mean and standard error of every numeric metric across seeds."""
    per_key: dict[str, list[float]] = {}
    for r in results:
        rows: list = []
        _flatten("", r["metrics"], rows)
        if r.get("beta") is not None:
            rows.append(("beta", r["beta"]))
        for k, v in rows:
            per_key.setdefault(k, []).append(float(v))
    out = {}
    for k, vals in sorted(per_key.items()):
        a = np.array(vals)
        se = float(a.std(ddof=1) / math.sqrt(len(a))) if len(a) > 1 else 0.0
        out[k] = {"mean": float(a.mean()), "stderr": se, "n": len(a)}
    return out


# ---------------------------------------------------------------- gp lab


def stage_gp_verify(cfg: ExperimentConfig, out: Path, partition_kind: str = "both",
                    seed: int | None = None) -> list[Path]:
    gs = dict(cfg.gp_study)
    hyper = GpHyper(
        RBFKernel(float(gs.get("lengthscale", 1.0)), float(gs.get("signal_variance", 10.0))),
        float(gs.get("obs_var", 0.1)),
    )
    kinds = ["homogeneous", "heterogeneous"] if partition_kind == "both" else [partition_kind]
    seed = cfg.seeds[0] if seed is None else seed
    out = Path(out)
    paths = []
    for kind in kinds:
        rep = run_regression_calibration_study(
            f"idealized-{kind}", int(gs.get("m", 5)), int(gs.get("n_per_client", 200)), hyper,
            seed, int(gs.get("n_test", 20)), str(gs.get("prior", "flat")),
        )
        out.mkdir(parents=True, exist_ok=True)
        (out / f"gp_{kind}.json").write_text(rep.to_json() + "\n")
        (out / f"gp_{kind}.csv").write_text(rep.to_csv())
        paths.append(out / f"gp_{kind}.json")
    cs = dict(cfg.class_study)
    studies = []
    for k in cs.get("n_classes", [2, 5]):
        grid = simplex_grid(int(k), int(cs.get("n_points", 100)), seed)
        for m in cs.get("m", [2, 3, 5]):
            for kind in ("idealized-homogeneous", "idealized-heterogeneous"):
                r = run_classification_calibration_study(grid, int(m), kind)
                studies.append({key: r[key] for key in ("partition_kind", "m", "n_classes", "violations")})
    paths.append(write_json(out / "class_study.json", {
        "studies": studies, "total_violations": sum(s["violations"] for s in studies)}))
    return paths


# ------------------------------------------------------------------- run


def run_stage(cfg: ExperimentConfig, stage: str, seed: int, out: Path, workers: int = 1):
    if stage == "partition":
        return stage_partition(cfg, seed, out)
    if stage == "sample":
        return stage_sample(cfg, seed, out, workers)
    if stage == "aggregate":
        return stage_aggregate(cfg, seed, out)
    if stage == "tune-beta":
        return stage_tune_beta(cfg, seed, out)
    if stage == "distill":
        return stage_distill(cfg, seed, out)
    if stage == "eval":
        return stage_eval(cfg, seed, out)
    raise ValueError(f"unknown stage {stage!r}")


def run(cfg: ExperimentConfig, out: Path | None = None, seeds: list[int] | None = None,
        workers: int = 1) -> Path:
    out = Path(out or cfg.output)
    seeds = seeds or cfg.seeds
    if cfg.task in ("gp-study", "class-study"):
        return stage_gp_verify(cfg, out, seed=seeds[0])[0]
    results = []
    for seed in seeds:
        log.info("seed %d", seed)
        for stage in STAGES:
            run_stage(cfg, stage, seed, out, workers)
        results.append(read_json(seed_dir(out, seed) / "result.json"))
    summary = summarize(results)
    write_json(out / "summary.json", {"seeds": seeds, "metrics": summary})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "mean", "stderr", "n"])
    for k, v in summary.items():
        w.writerow([k, repr(v["mean"]), repr(v["stderr"]), v["n"]])
    (out / "metrics.csv").write_text(buf.getvalue())
    return out / "summary.json"
