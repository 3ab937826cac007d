"""Tabular datasets: CSV ingestion, synthetic generators, normalization."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    """Feature matrix plus targets.

    ``n_classes`` is set for classification data (integer labels in
    ``[0, n_classes)``) and ``None`` for regression.
    """

    X: np.ndarray
    y: np.ndarray
    n_classes: int | None = None
    feature_names: list[str] = field(default_factory=list)
    target_name: str = "y"
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        if self.n_classes is None:
            self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        else:
            self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if len(self.X) != len(self.y):
            raise ValueError(f"{len(self.X)} feature rows but {len(self.y)} targets")
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(self.X.shape[1])]

    def __len__(self):
        return len(self.y)

    @property
    def is_classification(self) -> bool:
        return self.n_classes is not None

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.X[idx], self.y[idx], self.n_classes, list(self.feature_names),
            self.target_name, self.norm_mean, self.norm_std,
        )


def concat(parts: list[Dataset]) -> Dataset:
    first = parts[0]
    return Dataset(
        np.concatenate([p.X for p in parts]), np.concatenate([p.y for p in parts]),
        first.n_classes, list(first.feature_names), first.target_name,
    )


class CsvError(ValueError):
    pass


def load_csv(path, target: str, classification: bool = False, drop_incomplete: bool = False) -> Dataset:
    """Read a headed CSV; every column except ``target`` is a numeric feature.

    Rows with empty cells raise unless ``drop_incomplete`` is set, in which
    case they are skipped and counted in the log. Classification targets may
    be any strings; they are mapped to ``0..K-1`` in sorted order.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvError(f"{path}: empty file") from None
        if target not in header:
            raise CsvError(f"{path}: target column {target!r} not in header {header}")
        t_col = header.index(target)
        feat_cols = [i for i in range(len(header)) if i != t_col]
        rows, targets, dropped = [], [], 0
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CsvError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            if any(not c.strip() for c in row):
                if drop_incomplete:
                    dropped += 1
                    continue
                raise CsvError(f"{path}:{lineno}: empty cell")
            feats = []
            for i in feat_cols:
                try:
                    v = float(row[i])
                except ValueError:
                    raise CsvError(
                        f"{path}:{lineno}: non-numeric value {row[i]!r} in column {header[i]!r}"
                    ) from None
                if not math.isfinite(v):
                    raise CsvError(f"{path}:{lineno}: non-finite value in column {header[i]!r}")
                feats.append(v)
            rows.append(feats)
            targets.append(row[t_col].strip())
    if dropped:
        log.info("%s: dropped %d incomplete rows", path, dropped)
    if not rows:
        raise CsvError(f"{path}: no data rows")
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(feat_cols))
    names = [header[i] for i in feat_cols]
    if classification:
        labels = sorted(set(targets))
        try:
            labels = sorted(labels, key=float)
        except ValueError:
            pass
        lookup = {lab: k for k, lab in enumerate(labels)}
        y = np.array([lookup[t] for t in targets])
        return Dataset(X, y, len(labels), names, target)
    try:
        y = np.array([float(t) for t in targets])
    except ValueError as exc:
        raise CsvError(f"{path}: non-numeric target: {exc}") from None
    return Dataset(X, y, None, names, target)


def fit_normalizer(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    mean = ds.X.mean(axis=0)
    std = ds.X.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


def normalize(ds: Dataset, mean: np.ndarray, std: np.ndarray) -> Dataset:
    """Z-score features with externally supplied (training-split) statistics."""
    out = Dataset((ds.X - mean) / std, ds.y, ds.n_classes, list(ds.feature_names), ds.target_name)
    out.norm_mean, out.norm_std = mean, std
    return out


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def make_blobs(
    n_points: int,
    n_classes: int = 4,
    n_features: int = 2,
    separation: float = 3.0,
    std: float = 1.0,
    seed: int = 0,
) -> Dataset:
    """Balanced isotropic Gaussian blobs.

    Class centres sit on a circle (first two features) of radius chosen so
    neighbouring centres are ``separation`` apart; extra features are noise.
    Labels are assigned round-robin, so class counts differ by at most one.
    """
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    radius = separation / (2 * math.sin(math.pi / n_classes))
    centres = np.zeros((n_classes, n_features))
    centres[:, 0] = radius * np.cos(angles)
    if n_features > 1:
        centres[:, 1] = radius * np.sin(angles)
    y = np.arange(n_points) % n_classes
    X = centres[y] + std * rng.standard_normal((n_points, n_features))
    return Dataset(X, y, n_classes)


def make_sine(
    n_points: int,
    noise_var: float = 0.1,
    low: float = -3.0,
    high: float = 3.0,
    seed: int = 0,
) -> Dataset:
    """y = sin(x) + N(0, noise_var), x uniform on [low, high]."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(low, high, size=n_points)
    y = np.sin(x) + math.sqrt(noise_var) * rng.standard_normal(n_points)
    return Dataset(x[:, None], y, None)


def make_synthetic(kind: str, seed: int = 0, **spec) -> Dataset:
    """Deterministic desk-scale datasets: ``gaussian-blobs`` or ``sine-regression``."""
    if kind in ("gaussian-blobs", "blobs"):
        return make_blobs(seed=seed, **spec)
    if kind in ("sine-regression", "sine"):
        return make_sine(seed=seed, **spec)
    raise ValueError(f"unknown synthetic dataset kind {kind!r}")
