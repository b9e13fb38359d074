"""Synthetic class blobs, CSV ingestion and client partitioning."""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

MAX_REDRAWS = 100


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            self.features = self.features.reshape(len(self.labels), -1)
        if len(self.features) != len(self.labels):
            raise DataError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)

    @classmethod
    def empty(cls, n_classes: int, feature_dim: int) -> Dataset:
        return cls(np.zeros((0, feature_dim)), np.zeros(0, dtype=np.int64), n_classes)


def class_counts(ds: Dataset) -> np.ndarray:
    return np.bincount(ds.labels, minlength=ds.n_classes)[: ds.n_classes]


def concat_datasets(parts: Sequence[Dataset]) -> Dataset:
    return Dataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        parts[0].n_classes,
    )


def gen_synthetic(
    n_classes: int,
    per_class: int,
    feature_dim: int,
    patch_layout: tuple[int, int],
    noise: float,
    seed: int,
    *,
    separation: float = 1.0,
    sample_seed: int | None = None,
) -> Dataset:
    """Isotropic Gaussian blobs around seeded class means.

    Class means depend only on ``seed``; ``sample_seed`` (default: ``seed``)
    drives the noise and ordering, so train/test sets can share means.
    """
    if per_class < 1:
        raise DataError(f"per_class must be >= 1, got {per_class}")
    m, input_dim = patch_layout
    if feature_dim != m * input_dim:
        raise DataError(f"feature_dim {feature_dim} != {m} patches x {input_dim}")
    means = np.random.default_rng(seed).normal(0.0, separation, size=(n_classes, feature_dim))
    rng = np.random.default_rng([seed, 1] if sample_seed is None else [sample_seed, 2])
    labels = np.repeat(np.arange(n_classes), per_class)
    features = means[labels] + noise * rng.normal(size=(labels.size, feature_dim))
    order = rng.permutation(labels.size)
    return Dataset(features[order], labels[order], n_classes)


def load_csv(path, n_classes: int) -> Dataset:
    """Read ``f1,...,fD,label`` rows and standardise each feature column."""
    path = Path(path)
    rows, labels = [], []
    width = None
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise DataError(f"{path}:{lineno}: need at least one feature and a label")
            elif len(row) != width:
                raise DataError(f"{path}:{lineno}: ragged row ({len(row)} cells, expected {width})")
            try:
                values = [float(cell) for cell in row[:-1]]
                label_f = float(row[-1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric cell") from None
            if not label_f.is_integer():
                raise DataError(f"{path}:{lineno}: label {row[-1]!r} is not an integer")
            label = int(label_f)
            if not 0 <= label < n_classes:
                raise DataError(f"{path}:{lineno}: label {label} outside [0, {n_classes})")
            rows.append(values)
            labels.append(label)
    if not rows:
        raise DataError(f"{path}: no data rows")
    x = np.array(rows, dtype=np.float64)
    std = np.maximum(x.std(axis=0), 1e-12)
    x = (x - x.mean(axis=0)) / std
    return Dataset(x, np.array(labels), n_classes)


class Scheme(str, Enum):
    IID = "iid"
    DIR_OVERLAP = "dir"
    NONIID_DISJOINT = "noniid"


@dataclass(frozen=True)
class PartitionSpec:
    scheme: Scheme
    num_clients: int
    alpha: float = 0.5
    min_fraction: float = 0.01
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.num_clients < 1:
            raise DataError("num_clients must be >= 1")
        if not self.alpha > 0:
            raise DataError(f"alpha must be > 0, got {self.alpha}")
        if self.min_fraction < 0:
            raise DataError("min_fraction must be >= 0")
        if self.num_clients * self.min_fraction > 1:
            raise DataError(
                f"min_fraction {self.min_fraction} impossible for {self.num_clients} clients"
            )


def _dirichlet(rng: np.random.Generator, alpha: float, size: int) -> np.ndarray:
    # normalised Gamma draws; guard the all-underflow case at tiny alpha
    g = rng.gamma(alpha, 1.0, size=size)
    total = g.sum()
    if total == 0:
        g = np.zeros(size)
        g[rng.integers(size)] = 1.0
        return g
    return g / total


def _iid(ds: Dataset, spec: PartitionSpec, rng) -> list[np.ndarray]:
    return [np.sort(s) for s in np.array_split(rng.permutation(len(ds)), spec.num_clients)]


def _noniid(ds: Dataset, spec: PartitionSpec, rng) -> list[np.ndarray]:
    shards: list[list[int]] = [[] for _ in range(spec.num_clients)]
    for c in range(ds.n_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        props = _dirichlet(rng, spec.alpha, spec.num_clients)
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(int)
        for k, part in enumerate(np.split(idx, cuts)):
            shards[k].extend(part.tolist())
    return [np.array(sorted(s), dtype=np.int64) for s in shards]


def _dir_overlap(ds: Dataset, spec: PartitionSpec, rng) -> list[np.ndarray]:
    target = len(ds) // spec.num_clients
    by_class = [np.flatnonzero(ds.labels == c) for c in range(ds.n_classes)]
    shards = []
    for _ in range(spec.num_clients):
        q = _dirichlet(rng, spec.alpha, ds.n_classes)
        chosen = []
        for c, pool in enumerate(by_class):
            take = min(int(np.floor(q[c] * target)), pool.size)
            if take:
                chosen.append(rng.choice(pool, size=take, replace=False))
        shards.append(np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64))
    return shards


_SCHEMES = {
    Scheme.IID: _iid,
    Scheme.NONIID_DISJOINT: _noniid,
    Scheme.DIR_OVERLAP: _dir_overlap,
}


def _clamp(shards: list[np.ndarray], need: int, spec: PartitionSpec, n: int, rng) -> list[np.ndarray]:
    """Top up undersized shards; disjoint schemes move samples off the largest shard."""
    shards = [s.copy() for s in shards]
    disjoint = spec.scheme is not Scheme.DIR_OVERLAP
    for k in range(len(shards)):
        while shards[k].size < need:
            if disjoint:
                donor = max(range(len(shards)), key=lambda i: (shards[i].size, -i))
                pick = rng.integers(shards[donor].size)
                moved = shards[donor][pick]
                shards[donor] = np.delete(shards[donor], pick)
                shards[k] = np.sort(np.append(shards[k], moved))
            else:
                spare = np.setdiff1d(np.arange(n), shards[k])
                extra = rng.choice(spare, size=need - shards[k].size, replace=False)
                shards[k] = np.sort(np.concatenate([shards[k], extra]))
    return shards


def partition_indices(ds: Dataset, spec: PartitionSpec) -> list[np.ndarray]:
    if len(ds) == 0:
        raise DataError("cannot partition an empty dataset")
    rng = np.random.default_rng(spec.seed)
    need = int(np.ceil(spec.min_fraction * len(ds)))
    draw = _SCHEMES[spec.scheme]
    for _ in range(MAX_REDRAWS):
        shards = draw(ds, spec, rng)
        if min(s.size for s in shards) >= need:
            return shards
    return _clamp(shards, need, spec, len(ds), rng)


def partition(ds: Dataset, spec: PartitionSpec) -> list[Dataset]:
    return [ds.subset(idx) for idx in partition_indices(ds, spec)]


def write_manifest(shards: Sequence[np.ndarray], path) -> None:
    manifest = {str(k): [int(i) for i in idx] for k, idx in enumerate(shards)}
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(manifest, fh)
    os.replace(tmp, path)


def read_manifest(path) -> list[np.ndarray]:
    raw = json.loads(Path(path).read_text())
    return [np.array(raw[str(k)], dtype=np.int64) for k in range(len(raw))]
