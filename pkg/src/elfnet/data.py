"""Long-tailed dataset construction, class statistics, and the ELFD file format.

Class 0 is always the largest class; the exponential subsampling keeps
round(n * mu^j) examples of class j for j = 0..c-1, so the head class stays
at full size n.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, FormatError

DATASET_MAGIC = b"ELFD"
DATASET_VERSION = 1

MANY_MIN = 100  # Many: strictly more than this many training examples
FEW_MAX = 20  # Few: strictly fewer than this many


@dataclass(frozen=True)
class LongTailedDataset:
    """Examples plus per-class counts, immutable after construction.

    x has shape (n, C, H, W) float32; y has shape (n,) int64 with labels in
    0..c-1. class_counts[j] is the number of examples of class j.
    """

    x: np.ndarray
    y: np.ndarray
    class_counts: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ConfigurationError(
                f"{len(self.x)} examples but {len(self.y)} labels"
            )
        object.__setattr__(self, "x", np.ascontiguousarray(self.x, dtype=np.float32))
        object.__setattr__(self, "y", np.ascontiguousarray(self.y, dtype=np.int64))
        object.__setattr__(
            self, "class_counts", np.asarray(self.class_counts, dtype=np.int64)
        )
        self.x.setflags(write=False)
        self.y.setflags(write=False)
        self.class_counts.setflags(write=False)

    @property
    def num_classes(self) -> int:
        return len(self.class_counts)

    @property
    def total(self) -> int:
        return len(self.y)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.x.shape[1:])

    @property
    def class_order(self) -> np.ndarray:
        """Class indices sorted by descending count (stable)."""
        return np.argsort(-self.class_counts, kind="stable")

    def imbalance_ratio(self) -> float:
        counts = self.class_counts[self.class_counts > 0]
        return float(counts.max() / counts.min())


def longtail_counts(n: int, c: int, imbalance_ratio: float) -> np.ndarray:
    """Per-class counts floor(n * mu^j) with mu = ratio^(-1/(c-1)).

    Truncation matches the published per-class counts for the standard
    long-tailed benchmarks (head class 5000, tail class exactly n/ratio).
    """
    if imbalance_ratio < 1:
        raise ConfigurationError(f"imbalance ratio must be >= 1, got {imbalance_ratio}")
    if c < 1:
        raise ConfigurationError(f"need at least one class, got {c}")
    if c == 1 or imbalance_ratio == 1:
        counts = np.full(c, n, dtype=np.int64)
    else:
        mu = imbalance_ratio ** (-1.0 / (c - 1))
        raw = n * mu ** np.arange(c)
        # nudge past float error so exact integers (e.g. n/ratio) survive floor
        counts = np.floor(raw * (1 + 1e-9) + 1e-9).astype(np.int64)
    if (counts < 1).any():
        bad = int(np.argmax(counts < 1))
        raise ConfigurationError(
            f"class {bad} would keep 0 examples; increase n (={n}) or "
            f"reduce the imbalance ratio (={imbalance_ratio})"
        )
    return counts


def make_longtail(source: LongTailedDataset, imbalance_ratio: float, seed: int) -> LongTailedDataset:
    """Exponentially subsample a balanced dataset into a long tail.

    Class j keeps round(n * mu^j) examples, drawn uniformly without
    replacement under the seed.
    """
    counts = source.class_counts
    if counts.min() != counts.max():
        raise ConfigurationError("make_longtail requires a class-balanced source")
    n = int(counts[0])
    target = longtail_counts(n, source.num_classes, imbalance_ratio)
    rng = np.random.default_rng(seed)
    keep: list[np.ndarray] = []
    for j in range(source.num_classes):
        idx = np.flatnonzero(source.y == j)
        keep.append(rng.choice(idx, size=int(target[j]), replace=False))
    sel = np.concatenate(keep)
    return LongTailedDataset(source.x[sel], source.y[sel], target)


def synth_gaussian(
    c: int,
    dims: tuple[int, int, int],
    counts: np.ndarray | list[int],
    noise_sigma: float,
    seed: int,
    mean_scale: float = 1.0,
    max_retries: int = 1000,
    sample_seed: int | None = None,
) -> LongTailedDataset:
    """Gaussian-blob classification data: mean_j + N(0, sigma^2) per element.

    Class means are drawn once per seed from N(0, mean_scale^2) and redrawn
    (up to max_retries) until every pair is at least 4*sigma apart in L2.
    sample_seed decouples the noise stream from the means, so a train and
    an eval set can share means without sharing noise; it defaults to seed.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if len(counts) != c:
        raise ConfigurationError(f"counts has {len(counts)} entries for {c} classes")
    d = int(np.prod(dims))
    # distinct deterministic streams for means vs. example noise
    mean_rng = np.random.default_rng([seed, 0])
    rng = np.random.default_rng([seed if sample_seed is None else sample_seed, 1])
    means = None
    for _ in range(max_retries):
        cand = mean_rng.normal(0.0, mean_scale, size=(c, d))
        dist = np.linalg.norm(cand[:, None, :] - cand[None, :, :], axis=-1)
        dist[np.diag_indices(c)] = np.inf
        if dist.min() >= 4.0 * noise_sigma:
            means = cand
            break
    if means is None:
        raise ConfigurationError(
            f"could not separate {c} class means by {4 * noise_sigma:g} in "
            f"{max_retries} draws; lower noise_sigma or use fewer classes"
        )
    xs, ys = [], []
    for j in range(c):
        noise = rng.normal(0.0, noise_sigma, size=(int(counts[j]), d)) if noise_sigma else 0.0
        xs.append(means[j] + noise if noise_sigma else np.tile(means[j], (int(counts[j]), 1)))
        ys.append(np.full(int(counts[j]), j, dtype=np.int64))
    x = np.concatenate(xs).reshape(-1, *dims).astype(np.float32)
    return LongTailedDataset(x, np.concatenate(ys), counts)


@dataclass(frozen=True)
class SplitAssignment:
    """Many/Medium/Few tags per class, from the training-set class counts."""

    tags: tuple[str, ...]
    many_min: int = MANY_MIN
    few_max: int = FEW_MAX

    def classes(self, tag: str) -> list[int]:
        return [j for j, t in enumerate(self.tags) if t == tag]


def split_classes(counts: np.ndarray | list[int], many_min: int = MANY_MIN, few_max: int = FEW_MAX) -> SplitAssignment:
    """Tag each class Many (> many_min), Few (< few_max), else Medium.

    Boundary counts (exactly many_min or few_max) fall to Medium.
    """
    tags = []
    for n_j in np.asarray(counts):
        if n_j > many_min:
            tags.append("Many")
        elif n_j < few_max:
            tags.append("Few")
        else:
            tags.append("Medium")
    return SplitAssignment(tuple(tags), many_min, few_max)


def save_dataset(ds: LongTailedDataset, path: str | Path) -> None:
    """Write the ELFD binary format (see the README for the layout)."""
    c, h, w = ds.dims if ds.x.ndim == 4 else (0, 0, 0)
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<6I", DATASET_VERSION, ds.num_classes, c, h, w, ds.total))
        payload = ds.x.astype("<f4").reshape(ds.total, c * h * w)
        for i in range(ds.total):
            f.write(struct.pack("<I", int(ds.y[i])))
            f.write(payload[i].tobytes())


def load_dataset(path: str | Path) -> LongTailedDataset:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DATASET_MAGIC:
            raise FormatError(f"bad dataset magic {magic!r}", offset=0)
        header = f.read(24)
        if len(header) != 24:
            raise FormatError("truncated dataset header", offset=4 + len(header))
        version, num_classes, c, h, w, n = struct.unpack("<6I", header)
        if version != DATASET_VERSION:
            raise FormatError(f"unsupported dataset version {version}", offset=4)
        d = c * h * w
        record = 4 + 4 * d
        labels = np.empty(n, dtype=np.int64)
        x = np.empty((n, d), dtype=np.float32)
        for i in range(n):
            start = f.tell()
            buf = f.read(record)
            if len(buf) != record:
                raise FormatError(f"truncated record {i}", offset=start + len(buf))
            labels[i] = struct.unpack_from("<I", buf)[0]
            x[i] = np.frombuffer(buf, dtype="<f4", count=d, offset=4)
        if n and labels.max() >= num_classes:
            raise FormatError(
                f"label {labels.max()} out of range for {num_classes} classes", offset=28
            )
    counts = np.bincount(labels, minlength=num_classes) if n else np.zeros(num_classes, dtype=np.int64)
    return LongTailedDataset(x.reshape(n, c, h, w), labels, counts)
