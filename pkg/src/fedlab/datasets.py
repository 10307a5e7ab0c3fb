"""Synthetic tabular classification tasks and the dataset file formats.

The benchmark is a Gaussian-blob task: each class has a mean vector and
samples are mean plus isotropic noise. The pretraining ("source") split uses
per-class means shifted away from the federated ("target") task, so a model
pretrained on the source is decent but not optimal on the target and
fine-tuning has headroom.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError
from .linalg import as_matrix, load_matrix, save_matrix

__all__ = [
    "LabeledData",
    "SyntheticSpec",
    "sample_blobs",
    "make_benchmark",
    "save_dataset",
    "load_dataset",
    "save_partition",
    "load_partition",
]


@dataclass(frozen=True)
class LabeledData:
    """Feature columns (d x n) with one integer label per column."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "features", as_matrix(self.features, "features"))
        labels = np.asarray(self.labels)
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
        object.__setattr__(self, "labels", labels.astype(np.int64))
        if self.labels.shape != (self.features.shape[1],):
            raise ValueError(
                f"{self.features.shape[1]} feature columns but {self.labels.shape} labels"
            )

    @property
    def num_examples(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledData":
        indices = np.asarray(indices)
        return LabeledData(self.features[:, indices], self.labels[indices])


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the seeded blob benchmark.

    ``shift`` scales the per-class offset between source and target means;
    ``noise`` is the within-class standard deviation. The defaults are the
    standard fixture used throughout the test suite: an 8-class task in 16
    dimensions.
    """

    num_classes: int = 8
    input_dim: int = 16
    train_per_class: int = 400
    test_per_class: int = 125
    source_per_class: int = 250
    noise: float = 0.55
    shift: float = 1.1
    mean_scale: float = 2.0

    def __post_init__(self):
        if self.num_classes < 2 or self.input_dim < 1:
            raise ValueError("need num_classes >= 2 and input_dim >= 1")
        for name in ("train_per_class", "test_per_class", "source_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.noise <= 0 or self.mean_scale <= 0:
            raise ValueError("noise and mean_scale must be positive")
        if self.shift < 0:
            raise ValueError("shift must be nonnegative")


def sample_blobs(means: np.ndarray, per_class: int, noise: float, rng) -> LabeledData:
    """Draw ``per_class`` points around every column of *means*, shuffled."""
    means = as_matrix(means, "means")
    d, c = means.shape
    n = per_class * c
    features = np.empty((d, n))
    labels = np.empty(n, dtype=np.int64)
    for k in range(c):
        block = slice(k * per_class, (k + 1) * per_class)
        features[:, block] = means[:, [k]] + noise * rng.standard_normal((d, per_class))
        labels[block] = k
    order = rng.permutation(n)
    return LabeledData(features[:, order], labels[order])


def make_benchmark(spec: SyntheticSpec, seed: int) -> tuple[LabeledData, LabeledData, LabeledData]:
    """Seeded (source, train, test) triple.

    The source split drives pretraining; train/test are drawn from the
    shifted target distribution. The test split is IID (created before any
    client partitioning).
    """
    rng = np.random.default_rng([seed, 10])
    target_means = spec.mean_scale * rng.standard_normal((spec.input_dim, spec.num_classes))
    source_means = target_means + spec.shift * rng.standard_normal(target_means.shape)
    source = sample_blobs(source_means, spec.source_per_class, spec.noise, rng)
    train = sample_blobs(target_means, spec.train_per_class, spec.noise, rng)
    test = sample_blobs(target_means, spec.test_per_class, spec.noise, rng)
    return source, train, test


def save_dataset(data: LabeledData, features_path, labels_path) -> None:
    """Features as a matrix text file, labels as one integer per line."""
    save_matrix(features_path, data.features)
    Path(labels_path).write_text("".join(f"{y}\n" for y in data.labels))


def load_dataset(features_path, labels_path) -> LabeledData:
    features = load_matrix(features_path)
    labels_path = Path(labels_path)
    labels = []
    with labels_path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                labels.append(int(line))
            except ValueError:
                raise ParseError(f"expected an integer label, got {line!r}",
                                 path=labels_path, line=lineno) from None
    return LabeledData(features, np.asarray(labels, dtype=np.int64))


def save_partition(path, shards: list[np.ndarray]) -> None:
    """Manifest mapping client_id to its example indices, one line per client."""
    lines = [f"{cid}: " + " ".join(str(int(i)) for i in idx) for cid, idx in enumerate(shards)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_partition(path) -> list[np.ndarray]:
    path = Path(path)
    shards = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            head, _, tail = line.partition(":")
            try:
                cid = int(head)
                idx = np.asarray([int(tok) for tok in tail.split()], dtype=np.int64)
            except ValueError:
                raise ParseError("malformed partition line", path=path, line=lineno) from None
            if cid != len(shards):
                raise ParseError(f"client ids must be consecutive, got {cid}",
                                 path=path, line=lineno)
            shards.append(idx)
    return shards
