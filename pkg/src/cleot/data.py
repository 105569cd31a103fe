"""Datasets, splits and minibatch sampling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, ParseError
from .noise import apply_noise

SPLITS = ("train", "val", "test")


def one_hot(labels, c):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, c))
    out[np.arange(labels.size), labels] = 1.0
    return out


@dataclass(frozen=True)
class SplitView:
    """Features and the labels a consumer of this split is allowed to see.

    Train and validation views carry noisy labels; only the test view carries
    clean ones.
    """

    name: str
    x: np.ndarray
    y: np.ndarray
    index: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    @property
    def classes(self):
        return self.y.argmax(axis=1)


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    noisy: np.ndarray | None = None
    split: np.ndarray | None = None
    flipped: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ContractError(f"features {x.shape} and labels {y.shape} do not line up")
        if not np.all(np.isfinite(x)):
            raise ContractError("features must be finite")
        if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
            raise ContractError("labels must be one-hot rows")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    @property
    def c(self):
        return self.labels.shape[1]

    @property
    def classes(self):
        return self.labels.argmax(axis=1)

    def indices(self, tag):
        if self.split is None:
            raise ContractError("dataset has not been split")
        return np.flatnonzero(self.split == tag)

    def view(self, tag):
        idx = self.indices(tag)
        if tag == "test":
            return SplitView(tag, self.features[idx], self.labels[idx], idx)
        if self.noisy is None:
            raise ContractError("apply noise (possibly none) before taking training views")
        return SplitView(tag, self.features[idx], self.noisy[idx], idx)

    def with_noise(self, E, rng):
        """Corrupt train and validation labels; test rows keep their clean labels."""
        if self.split is None:
            raise ContractError("split the dataset before applying noise")
        noisy = self.labels.copy()
        flipped = np.zeros(self.n, dtype=bool)
        idx = np.flatnonzero(self.split != "test")
        if E is not None:
            noisy[idx], flipped[idx] = apply_noise(self.labels[idx], E, rng)
        return replace(self, noisy=noisy, flipped=flipped)


def two_moons(n=400, noise_std=0.1, rng=None):
    """Two interleaved half circles; the upper moon is class 0."""
    if n % 2:
        raise ContractError(f"two moons needs an even sample count, got {n}")
    rng = np.random.default_rng(rng)
    t = np.linspace(0.0, np.pi, n // 2)
    upper = np.column_stack([np.cos(t), np.sin(t)])
    lower = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    x = np.vstack([upper, lower])
    if noise_std > 0:
        x = x + rng.normal(scale=noise_std, size=x.shape)
    labels = np.repeat([0, 1], n // 2)
    return LabeledDataset(x, one_hot(labels, 2))


def save_csv(ds, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{k}" for k in range(ds.d)] + ["label"])
        for row, label in zip(ds.features, ds.classes):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: missing header")
    header = [h.strip() for h in rows[0]]
    d = len(header) - 1
    if d < 1 or header[-1] != "label" or header[:-1] != [f"f{k}" for k in range(d)]:
        raise ParseError("header must be f0,...,f{d-1},label", line=1)
    body = [(i + 2, r) for i, r in enumerate(rows[1:]) if r]
    if not body:
        raise ParseError(f"{path}: dataset is empty")
    x = np.empty((len(body), d))
    labels = np.empty(len(body), dtype=np.int64)
    for k, (line, row) in enumerate(body):
        if len(row) != d + 1:
            raise ParseError(f"expected {d + 1} fields, found {len(row)}", line=line)
        try:
            x[k] = [float(v) for v in row[:-1]]
            labels[k] = int(row[-1])
        except ValueError:
            raise ParseError("non-numeric cell", line=line) from None
        if labels[k] < 0:
            raise ParseError(f"negative label {labels[k]}", line=line)
        if not np.all(np.isfinite(x[k])):
            raise ParseError("non-finite feature", line=line)
    return LabeledDataset(x, one_hot(labels, int(labels.max()) + 1))


def split(ds, fractions=(0.8, 0.1, 0.1), rng=None):
    """Stratified train/val/test tags; per-class remainders go to train."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(rng)
    tags = np.empty(ds.n, dtype=object)
    classes = ds.classes
    for k in range(ds.c):
        idx = np.flatnonzero(classes == k)
        if idx.size < 3:
            raise ContractError(f"class {k} has {idx.size} samples; at least 3 are needed to split")
        idx = rng.permutation(idx)
        n_val = math.floor(fractions[1] * idx.size + 1e-9)
        n_test = math.floor(fractions[2] * idx.size + 1e-9)
        n_train = idx.size - n_val - n_test
        tags[idx[:n_train]] = "train"
        tags[idx[n_train:n_train + n_val]] = "val"
        tags[idx[n_train + n_val:]] = "test"
    return replace(ds, split=tags.astype(str))


def write_split_csv(ds, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split"])
        for tag in ds.split:
            w.writerow([tag])


@dataclass
class BatchSampler:
    """Plain shuffled batches or fixed per-class counts.

    ``mode="plain"`` uses ``batch_size``; ``mode="stratified"`` draws
    ``per_class`` rows of every class per batch.
    """

    mode: str = "plain"
    batch_size: int = 128
    per_class: int = 50

    def __post_init__(self):
        if self.mode not in ("plain", "stratified"):
            raise ValueError(f"sampler mode must be 'plain' or 'stratified', got {self.mode!r}")
        if self.batch_size < 1 or self.per_class < 1:
            raise ValueError("batch sizes must be >= 1")
        self._queue = []

    def epoch(self, view, rng):
        """Index arrays (into ``view``) for one pass over the data."""
        n = len(view)
        if n == 0:
            raise ContractError("training split is empty")
        if self.mode == "plain":
            order = rng.permutation(n)
            return [order[i:i + self.batch_size] for i in range(0, n, self.batch_size)]
        classes = view.classes
        groups = [np.flatnonzero(classes == k) for k in range(view.y.shape[1])]
        if any(g.size == 0 for g in groups):
            raise ContractError("stratified sampling needs every class in the training split")
        n_batches = math.ceil(max(g.size for g in groups) / self.per_class)
        perms = [rng.permutation(g) for g in groups]
        batches = []
        for b in range(n_batches):
            parts = []
            for g, perm in zip(groups, perms):
                take = perm[b * self.per_class:(b + 1) * self.per_class]
                short = self.per_class - take.size
                if short:
                    take = np.concatenate([take, rng.choice(g, size=short, replace=True)])
                parts.append(take)
            batches.append(np.concatenate(parts))
        return batches

    def next_batch(self, view, rng):
        """``(features, labels, indices)`` of the next batch, starting a new epoch as needed."""
        if not self._queue:
            self._queue = list(self.epoch(view, rng))
        idx = self._queue.pop(0)
        return view.x[idx], view.y[idx], idx
