"""Datasets with stable sample ids, loaders, generators and batch iteration."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SYNTHETIC_KINDS = ("gaussian-blobs", "two-moons", "linear-teacher")


class DataError(ValueError):
    pass


class Sample(NamedTuple):
    id: int
    features: np.ndarray
    label: float | int


def retained_count(keep_ratio: float, n: int) -> int:
    """``max(1, round(r*n))`` with halves rounded up."""
    return max(1, int(math.floor(keep_ratio * n + 0.5)))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable table of samples; ``num_classes == 0`` means real-valued targets."""

    ids: np.ndarray
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    _pos: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise DataError("features must be a 2-D array")
        y = np.asarray(self.y)
        y = y.astype(np.int64) if self.num_classes > 0 else y.astype(np.float64)
        if not (ids.shape[0] == X.shape[0] == y.shape[0]):
            raise DataError("ids, features and labels disagree on n")
        if np.unique(ids).size != ids.size or (ids.size and ids.min() < 0):
            raise DataError("sample ids must be unique non-negative integers")
        if self.num_classes > 0 and y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise DataError("label outside [0, num_classes)")
        for arr in (ids, X, y):
            arr.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "_pos", {int(i): k for k, i in enumerate(ids)})

    @property
    def n(self) -> int:
        return int(self.ids.size)

    @property
    def feature_dim(self) -> int:
        return int(self.X.shape[1])

    def __len__(self) -> int:
        return self.n

    def __iter__(self):
        for i, x, lab in zip(self.ids, self.X, self.y):
            yield Sample(int(i), x, lab.item())

    def positions(self, ids) -> np.ndarray:
        try:
            return np.fromiter((self._pos[int(i)] for i in ids), dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"unknown sample id {exc.args[0]}") from None

    def subset(self, ids) -> "Dataset":
        pos = self.positions(ids)
        return Dataset(self.ids[pos], self.X[pos], self.y[pos], self.num_classes)

    def without(self, ids) -> "Dataset":
        drop = set(int(i) for i in ids)
        keep = [int(i) for i in self.ids if int(i) not in drop]
        return self.subset(keep)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


@dataclass(frozen=True, eq=False)
class PruneState:
    """Partition of a dataset's ids into retained and pruned (both sorted)."""

    retained: np.ndarray
    pruned: np.ndarray
    keep_ratio: float

    @classmethod
    def from_retained(cls, all_ids, retained, keep_ratio: float) -> "PruneState":
        if not 0.0 < keep_ratio <= 1.0:
            raise DataError("keep ratio must lie in (0, 1]")
        all_ids = np.asarray(all_ids, dtype=np.int64)
        retained = np.unique(np.asarray(retained, dtype=np.int64))
        if retained.size == 0:
            raise DataError("retained set is empty")
        if not np.isin(retained, all_ids).all():
            raise DataError("retained ids are not all in the dataset")
        pruned = np.setdiff1d(all_ids, retained)
        return cls(retained, pruned, float(keep_ratio))

    @classmethod
    def full(cls, dataset: Dataset) -> "PruneState":
        return cls.from_retained(dataset.ids, dataset.ids, 1.0)

    def check(self, all_ids) -> None:
        all_ids = np.sort(np.asarray(all_ids, dtype=np.int64))
        if np.intersect1d(self.retained, self.pruned).size:
            raise DataError("retained and pruned overlap")
        if not np.array_equal(np.union1d(self.retained, self.pruned), all_ids):
            raise DataError("retained and pruned do not cover the dataset")
        if self.retained.size != retained_count(self.keep_ratio, all_ids.size):
            raise DataError("retained size disagrees with keep ratio")


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair (MNIST layout); pixels scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    raw = images_path.read_bytes()
    if len(raw) < 16:
        raise DataError(f"{images_path}: truncated header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"{images_path}: bad magic 0x{magic:08x}")
    need = count * rows * cols
    if len(raw) - 16 < need:
        raise DataError(f"{images_path}: truncated, expected {need} pixel bytes")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=need, offset=16)

    lab_raw = labels_path.read_bytes()
    if len(lab_raw) < 8:
        raise DataError(f"{labels_path}: truncated header")
    lmagic, lcount = struct.unpack(">II", lab_raw[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise DataError(f"{labels_path}: bad magic 0x{lmagic:08x}")
    if len(lab_raw) - 8 < lcount:
        raise DataError(f"{labels_path}: truncated, expected {lcount} labels")
    if lcount != count:
        raise DataError(f"count mismatch: {count} images vs {lcount} labels")
    labels = np.frombuffer(lab_raw, dtype=np.uint8, count=lcount, offset=8).astype(np.int64)

    X = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    num_classes = int(labels.max()) + 1 if count else 1
    return Dataset(np.arange(count), X, labels, num_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels) -> None:
    """Inverse of :func:`load_idx` for uint8 image stacks shaped (n, rows, cols)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


def _balanced_counts(n: int, k: int) -> list[int]:
    return [n // k + (1 if c < n % k else 0) for c in range(k)]


def gen_synthetic(kind: str, n: int, noise: float = 0.1, seed: int = 0,
                  num_classes: int = 2, dim: int = 2) -> Dataset:
    """Seeded toy classification sets; class sizes differ by at most one.

    gaussian-blobs
        ``num_classes`` isotropic clusters with centres on a unit-spaced
        circle; ``noise`` is the per-coordinate standard deviation.
    two-moons
        the interleaved half circles; ``noise`` is Gaussian jitter.
    linear-teacher
        ``x ~ N(0, I_dim)`` labelled by thresholding a random teacher
        projection (plus ``noise``) at its median.
    """
    if kind not in SYNTHETIC_KINDS:
        raise DataError(f"unknown synthetic kind {kind!r}")
    if kind != "gaussian-blobs":
        num_classes = 2
    if n < 2 or n < num_classes:
        raise DataError(f"n={n} too small for {num_classes} classes")
    if noise < 0:
        raise DataError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    counts = _balanced_counts(n, num_classes)

    if kind == "gaussian-blobs":
        angles = 2 * np.pi * np.arange(num_classes) / num_classes
        centres = np.zeros((num_classes, dim))
        centres[:, 0] = np.cos(angles)
        if dim > 1:
            centres[:, 1] = np.sin(angles)
        y = np.repeat(np.arange(num_classes), counts)
        X = centres[y] + noise * rng.standard_normal((n, dim))
    elif kind == "two-moons":
        n0, n1 = counts
        t0 = np.linspace(0, np.pi, n0)
        t1 = np.linspace(0, np.pi, n1)
        X = np.concatenate([
            np.stack([np.cos(t0), np.sin(t0)], axis=1),
            np.stack([1 - np.cos(t1), 0.5 - np.sin(t1)], axis=1),
        ])
        X = X + noise * rng.standard_normal(X.shape)
        y = np.repeat([0, 1], counts)
    else:
        X = rng.standard_normal((n, dim))
        teacher = rng.standard_normal(dim)
        s = X @ teacher + noise * rng.standard_normal(n)
        order = np.argsort(s, kind="stable")
        y = np.zeros(n, dtype=np.int64)
        y[order[counts[0]:]] = 1

    perm = rng.permutation(n)
    return Dataset(np.arange(n), X[perm], np.asarray(y)[perm], num_classes)


def split(dataset: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise DataError("test fraction must lie in (0, 1)")
    n_test = int(math.floor(dataset.n * test_fraction + 0.5))
    if n_test == 0 or n_test == dataset.n:
        raise DataError(f"split of n={dataset.n} at {test_fraction} leaves an empty side")
    perm = np.random.default_rng(seed).permutation(dataset.n)
    test_ids = np.sort(dataset.ids[perm[:n_test]])
    train_ids = np.sort(dataset.ids[perm[n_test:]])
    return dataset.subset(train_ids), dataset.subset(test_ids)


def epoch_batches(dataset: Dataset, state: PruneState, batch_size: int, epoch_seed) -> list[np.ndarray]:
    """Seeded permutation of the retained ids cut into batches; the last may be short."""
    if batch_size < 1:
        raise DataError("batch size must be at least 1")
    if state.retained.size == 0:
        raise DataError("retained set is empty")
    rng = np.random.default_rng(epoch_seed)
    order = state.retained[rng.permutation(state.retained.size)]
    return [order[i:i + batch_size] for i in range(0, order.size, batch_size)]


def save_csv(dataset: Dataset, path) -> None:
    header = ["id", "label"] + [f"f{j}" for j in range(dataset.feature_dim)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, x, lab in zip(dataset.ids, dataset.X, dataset.y):
            label = str(int(lab)) if dataset.num_classes else repr(float(lab))
            w.writerow([int(i), label] + [repr(float(v)) for v in x])


def load_csv(path, num_classes: int | None = None) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["id", "label"]:
        raise DataError(f"{path}: expected header starting with id,label")
    body = rows[1:]
    ids = np.array([int(r[0]) for r in body], dtype=np.int64)
    raw_labels = [r[1] for r in body]
    X = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64).reshape(len(body), len(rows[0]) - 2)
    if num_classes is None:
        integral = all(lab.lstrip("-").isdigit() for lab in raw_labels)
        num_classes = (max(int(lab) for lab in raw_labels) + 1) if integral and raw_labels else 0
    y = np.array([float(lab) for lab in raw_labels])
    return Dataset(ids, X, y, num_classes)
