"""Frame-labelled sequence data: a synthetic Markov generator and CSV I/O."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .errors import EmptyDatasetError, FormatError, ShapeError
from .numerics import Pcg32, rng_for

log = logging.getLogger(__name__)

SPLITS = ("train", "cv", "test")


@dataclass
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray
    warnings: list = field(default_factory=list)


@dataclass(eq=False)
class SequenceDataset:
    """A list of sequences, each a ``(T, D)`` frame matrix plus ``T`` labels.

    Flattened views (``all_frames``, ``all_labels``) order frames sequence by
    sequence; soft-target rows follow the same order.
    """

    frames: list
    labels: list
    num_classes: int
    split: str = "train"
    stats: StandardizationStats | None = None

    def __post_init__(self):
        if len(self.frames) != len(self.labels):
            raise ShapeError(f"{len(self.frames)} frame blocks but {len(self.labels)} label blocks")
        if not self.frames:
            raise EmptyDatasetError(f"{self.split} split has no sequences")
        self.frames = [np.ascontiguousarray(f, dtype=np.float64) for f in self.frames]
        self.labels = [np.asarray(y, dtype=np.int64).reshape(-1) for y in self.labels]
        dim = self.frames[0].shape[1] if self.frames[0].ndim == 2 else -1
        for f, y in zip(self.frames, self.labels):
            if f.ndim != 2 or f.shape[1] != dim or len(f) == 0 or len(f) != len(y):
                raise ShapeError(f"inconsistent sequence: frames {f.shape}, labels {y.shape}")
            if not np.all(np.isfinite(f)):
                raise ValueError("frames must be finite")
            if y.min() < 0 or y.max() >= self.num_classes:
                raise ValueError(f"labels must lie in [0, {self.num_classes})")

    @property
    def feature_dim(self):
        return self.frames[0].shape[1]

    @property
    def num_sequences(self):
        return len(self.frames)

    @cached_property
    def offsets(self):
        """Start index of each sequence in the flattened frame order, plus the total."""
        return np.concatenate([[0], np.cumsum([len(y) for y in self.labels])])

    @property
    def num_frames(self):
        return int(self.offsets[-1])

    @cached_property
    def all_frames(self):
        return np.concatenate(self.frames, axis=0)

    @cached_property
    def all_labels(self):
        return np.concatenate(self.labels)


class DataSplits(NamedTuple):
    train: SequenceDataset
    cv: SequenceDataset
    test: SequenceDataset


@dataclass
class GeneratorConfig:
    num_classes: int = 10
    feature_dim: int = 8
    min_length: int = 30
    max_length: int = 60
    n_train: int = 800
    n_cv: int = 150
    n_test: int = 150
    self_loop: float = 0.9
    separation: float = 2.0
    noise: float = 0.75
    seed: int = 0

    def validate(self):
        if self.num_classes < 2 or self.feature_dim < 1:
            raise ValueError("need at least 2 classes and 1 feature dimension")
        if not 0.0 <= self.self_loop <= 1.0:
            raise ValueError(f"self_loop must be a probability, got {self.self_loop}")
        if min(self.n_train, self.n_cv, self.n_test) < 1:
            raise ValueError("split counts must be positive")
        if not 1 <= self.min_length <= self.max_length:
            raise ValueError("need 1 <= min_length <= max_length")
        if self.noise < 0 or self.separation <= 0:
            raise ValueError("noise must be >= 0 and separation > 0")

    def to_dict(self):
        return asdict(self)


def class_means(config: GeneratorConfig) -> np.ndarray:
    """Vertices of the centred K-simplex under a random linear map to D dims."""
    k, d = config.num_classes, config.feature_dim
    rng = rng_for(config.seed, "class-means")
    proj = rng.normal(0.0, 1.0 / np.sqrt(d), size=(k, d))
    vertices = np.eye(k) - 1.0 / k
    return config.separation * (vertices @ proj)


def _sample_split(config, means, count, rng: Pcg32, split):
    k = config.num_classes
    span = config.max_length - config.min_length + 1
    frames, labels = [], []
    for _ in range(count):
        length = config.min_length + rng.bounded(span)
        states = np.empty(length, dtype=np.int64)
        cur = rng.bounded(k)
        states[0] = cur
        for t in range(1, length):
            if rng.uniform() >= config.self_loop:
                j = rng.bounded(k - 1)
                cur = j + 1 if j >= cur else j
            states[t] = cur
        noise = rng.normal(0.0, 1.0, size=(length, config.feature_dim))
        frames.append(means[states] + config.noise * noise)
        labels.append(states)
    return SequenceDataset(frames, labels, k, split)


def generate_synthetic(config: GeneratorConfig | None = None) -> DataSplits:
    """Sample train/cv/test splits from a Markov chain with Gaussian emissions.

    Each split draws from its own PCG32 stream, so any split can be
    regenerated alone.
    """
    config = config or GeneratorConfig()
    config.validate()
    means = class_means(config)
    counts = {"train": config.n_train, "cv": config.n_cv, "test": config.n_test}
    out = [
        _sample_split(config, means, counts[name], rng_for(config.seed, f"split-{name}"), name)
        for name in SPLITS
    ]
    return DataSplits(*out)


def stationary_distribution(config: GeneratorConfig) -> np.ndarray:
    # the chain is symmetric, so it is doubly stochastic
    return np.full(config.num_classes, 1.0 / config.num_classes)


def nearest_mean_accuracy(dataset: SequenceDataset, means: np.ndarray) -> float:
    x = dataset.all_frames
    d2 = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d2, axis=1) == dataset.all_labels))


def compute_stats(train: SequenceDataset) -> StandardizationStats:
    x = train.all_frames
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    warnings = []
    for j in np.flatnonzero(std == 0):
        msg = f"feature {j} has zero variance on train; left unscaled"
        log.warning(msg)
        warnings.append(msg)
    std = np.where(std == 0, 1.0, std)
    return StandardizationStats(mean, std, warnings)


def apply_stats(ds: SequenceDataset, stats: StandardizationStats) -> SequenceDataset:
    frames = [(f - stats.mean) / stats.std for f in ds.frames]
    return SequenceDataset(frames, ds.labels, ds.num_classes, ds.split, stats)


def standardize(train, cv=None, test=None):
    """Zero-mean / unit-variance per feature using train statistics only.

    Returns ``(train, cv, test, stats)``; absent splits come back as ``None``.
    """
    stats = compute_stats(train)
    out = [None if ds is None else apply_stats(ds, stats) for ds in (train, cv, test)]
    return (*out, stats)


def standardize_splits(splits: DataSplits) -> DataSplits:
    train, cv, test, _ = standardize(*splits)
    return DataSplits(train, cv, test)


@dataclass
class CsvSchema:
    num_classes: int
    feature_dim: int | None = None
    split: str = "train"


def save_csv(dataset: SequenceDataset, path):
    d = dataset.feature_dim
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seq_id", "frame_idx", "label", *[f"f{j}" for j in range(d)]])
        for s, (frames, labels) in enumerate(zip(dataset.frames, dataset.labels)):
            for t in range(len(labels)):
                w.writerow([s, t, int(labels[t]), *[repr(float(v)) for v in frames[t]]])


def load_csv(path, schema: CsvSchema) -> SequenceDataset:
    """Read a frame-per-row CSV; sequences appear in order of first ``seq_id``."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None:
            raise EmptyDatasetError(f"{path}: empty file", line=1)
        if header[:3] != ["seq_id", "frame_idx", "label"] or len(header) < 4:
            raise FormatError(f"{path}: bad header {header[:4]}", line=1)
        d = len(header) - 3
        if schema.feature_dim is not None and d != schema.feature_dim:
            raise FormatError(f"{path}: {d} feature columns, expected {schema.feature_dim}", line=1)
        seqs: dict[int, tuple[list, list]] = {}
        for lineno, row in enumerate(rows, start=2):
            if len(row) != d + 3:
                raise FormatError(f"{path}: expected {d + 3} fields, got {len(row)}", line=lineno)
            try:
                sid, fidx, label = int(row[0]), int(row[1]), int(row[2])
                feats = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise FormatError(f"{path}: non-numeric field ({exc})", line=lineno) from None
            if not 0 <= label < schema.num_classes:
                raise FormatError(f"{path}: label {label} outside [0, {schema.num_classes})",
                                  line=lineno)
            if not all(np.isfinite(feats)):
                raise FormatError(f"{path}: non-finite feature value", line=lineno)
            frames, labels = seqs.setdefault(sid, ([], []))
            if fidx != len(labels):
                raise FormatError(f"{path}: sequence {sid} expects frame_idx {len(labels)}, "
                                  f"got {fidx}", line=lineno)
            frames.append(feats)
            labels.append(label)
    if not seqs:
        raise EmptyDatasetError(f"{path}: no data rows")
    return SequenceDataset([np.array(f) for f, _ in seqs.values()],
                           [np.array(y) for _, y in seqs.values()],
                           schema.num_classes, schema.split)
