"""Datasets and samplers: synthetic domain-shift generator, IDX parser,
stochastic two-view augmentation, and the class-balanced batch stream."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import FormatError, InvalidInputError, UnsupportedError

IDX_TYPE_UBYTE = 0x08


@dataclass(frozen=True)
class ShiftSpec:
    """Synthetic benchmark: Gaussian blobs on a circle, with the target
    domain produced by a rigid rotation + translation of fresh draws."""

    num_classes: int
    samples_per_class_source: int
    samples_per_class_target: int
    class_center_radius: float
    within_class_stddev: float
    shift_translation: tuple[float, float]
    shift_rotation_angle: float
    seed: int

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise InvalidInputError("num_classes must be >= 1")
        if self.samples_per_class_source < 1 or self.samples_per_class_target < 1:
            raise InvalidInputError("samples per class must be >= 1")
        if self.within_class_stddev <= 0:
            raise InvalidInputError("within_class_stddev must be positive")
        if len(self.shift_translation) != 2:
            raise InvalidInputError("shift_translation must be 2-D")


@dataclass(frozen=True)
class AugmentSpec:
    """Three vector-data augmentation primitives, applied in order:
    additive Gaussian jitter, per-sample multiplicative scaling, and
    independent feature dropout."""

    jitter_stddev: float = 0.1
    scale_range: tuple[float, float] = (0.9, 1.1)
    dropout_fraction: float = 0.05

    def __post_init__(self) -> None:
        if self.jitter_stddev < 0:
            raise InvalidInputError("jitter_stddev must be >= 0")
        lo, hi = self.scale_range
        if not (0 < lo <= 1 <= hi):
            raise InvalidInputError("scale_range must satisfy 0 < lo <= 1 <= hi")
        if not 0 <= self.dropout_fraction < 1:
            raise InvalidInputError("dropout_fraction must lie in [0, 1)")

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls(0.0, (1.0, 1.0), 0.0)

    @property
    def is_identity(self) -> bool:
        return self.jitter_stddev == 0 and self.scale_range == (1.0, 1.0) and self.dropout_fraction == 0


@dataclass
class LabeledDataset:
    """Feature rows plus integer labels; label -1 means unlabeled."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise InvalidInputError(f"features must be a non-empty 2-D array, got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise InvalidInputError("labels length must match feature rows")
        if not np.isfinite(self.features).all():
            raise InvalidInputError("features contain non-finite values")
        if self.num_classes < 1:
            raise InvalidInputError("num_classes must be >= 1")
        if (self.labels >= self.num_classes).any() or (self.labels < -1).any():
            raise InvalidInputError("labels must lie in [-1, num_classes)")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_indices(self, labels: np.ndarray | None = None) -> list[np.ndarray]:
        """Indices per class under the given labeling (default: own labels);
        unlabeled (-1) rows appear in no class."""
        lab = self.labels if labels is None else np.asarray(labels)
        return [np.flatnonzero(lab == c) for c in range(self.num_classes)]


def _rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def class_centers(spec: ShiftSpec) -> np.ndarray:
    """Source-domain class centers, evenly spaced on the circle."""
    angles = 2.0 * np.pi * np.arange(spec.num_classes) / spec.num_classes
    return spec.class_center_radius * np.column_stack([np.cos(angles), np.sin(angles)])


def generate_shifted_gaussians(spec: ShiftSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic (seeded) source/target pair; target draws are rotated
    about the origin and translated after sampling. Ground-truth target
    labels are carried for evaluation only."""
    rng = np.random.default_rng(spec.seed)
    centers = class_centers(spec)
    rot = _rotation(spec.shift_rotation_angle)
    shift = np.asarray(spec.shift_translation, dtype=np.float64)

    def draw(samples_per_class: int, shifted: bool) -> tuple[np.ndarray, np.ndarray]:
        rows, labels = [], []
        for c in range(spec.num_classes):
            pts = rng.normal(centers[c], spec.within_class_stddev, size=(samples_per_class, 2))
            if shifted:
                pts = pts @ rot.T + shift
            rows.append(pts)
            labels.append(np.full(samples_per_class, c))
        return np.vstack(rows), np.concatenate(labels)

    xs, ys = draw(spec.samples_per_class_source, shifted=False)
    xt, yt = draw(spec.samples_per_class_target, shifted=True)
    return (
        LabeledDataset(xs, ys, spec.num_classes),
        LabeledDataset(xt, yt, spec.num_classes),
    )


def parse_idx(data: bytes) -> tuple[tuple[int, ...], np.ndarray]:
    """Decode an IDX byte stream (magic 00 00 TT DD, big-endian dims).

    Only the unsigned-byte type code 0x08 is supported; values are scaled to
    [0, 1]. The first dimension indexes rows; remaining dimensions are
    flattened into columns, so 1-D files come back as an N x 1 matrix.
    """
    if len(data) < 4:
        raise FormatError("IDX stream shorter than its magic")
    if data[0] != 0 or data[1] != 0:
        raise FormatError(f"bad IDX magic bytes {data[0]:#04x} {data[1]:#04x}")
    type_code, ndim = data[2], data[3]
    if type_code != IDX_TYPE_UBYTE:
        raise UnsupportedError(f"IDX type code {type_code:#04x} not supported")
    if ndim == 0:
        raise FormatError("IDX stream declares zero dimensions")
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise FormatError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", data[4:header_len])
    count = 1
    for d in dims:
        count *= d
    if len(data) - header_len != count:
        raise FormatError(f"IDX payload has {len(data) - header_len} bytes, expected {count}")
    rows = dims[0]
    cols = count // rows if rows else 1
    values = np.frombuffer(data, dtype=np.uint8, count=count, offset=header_len)
    matrix = (values.astype(np.float64) / 255.0).reshape(rows, cols)
    return dims, matrix


def standardize_features(x: np.ndarray) -> np.ndarray:
    """Whole-matrix zero mean / unit variance, with a std floor."""
    x = np.asarray(x, dtype=np.float64)
    return (x - x.mean()) / max(x.std(), 1e-8)


def load_idx_dataset(
    images_path,
    labels_path,
    num_classes: int = 10,
    subsample: int | None = None,
    standardize: bool = True,
    seed: int = 0,
) -> LabeledDataset:
    """Load an IDX image/label file pair into a LabeledDataset.

    Features are standardized with the dataset's own statistics, so source
    and target never share normalization state.
    """
    with open(images_path, "rb") as f:
        _, images = parse_idx(f.read())
    with open(labels_path, "rb") as f:
        label_dims, label_mat = parse_idx(f.read())
    if len(label_dims) != 1:
        raise FormatError(f"label file must be 1-D, got {len(label_dims)} dims")
    labels = np.rint(label_mat[:, 0] * 255.0).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise InvalidInputError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    if subsample is not None and subsample < images.shape[0]:
        keep = np.random.default_rng(seed).choice(images.shape[0], size=subsample, replace=False)
        keep.sort()
        images, labels = images[keep], labels[keep]
    if standardize:
        images = standardize_features(images)
    return LabeledDataset(images, labels, num_classes)


def augment(sample: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """One stochastic view of a feature row: jitter, then scaling, then
    dropout. The all-identity spec returns the row bit-exactly."""
    x = np.asarray(sample, dtype=np.float64).copy()
    if spec.jitter_stddev > 0:
        x += rng.normal(0.0, spec.jitter_stddev, size=x.shape)
    lo, hi = spec.scale_range
    if (lo, hi) != (1.0, 1.0):
        x *= rng.uniform(lo, hi)
    if spec.dropout_fraction > 0:
        x[rng.random(x.shape) < spec.dropout_fraction] = 0.0
    return x


def augment_batch(batch: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Row-wise augmentation with one scale factor per sample."""
    x = np.asarray(batch, dtype=np.float64).copy()
    if spec.jitter_stddev > 0:
        x += rng.normal(0.0, spec.jitter_stddev, size=x.shape)
    lo, hi = spec.scale_range
    if (lo, hi) != (1.0, 1.0):
        x *= rng.uniform(lo, hi, size=(x.shape[0], 1))
    if spec.dropout_fraction > 0:
        x[rng.random(x.shape) < spec.dropout_fraction] = 0.0
    return x


def balanced_batches(
    indices_by_class: Sequence[np.ndarray | Sequence[int]],
    batch_quota: int,
    rng: np.random.Generator,
) -> Iterator[np.ndarray]:
    """Endless stream of index batches drawing classes round-robin.

    Non-empty classes are visited in a freshly shuffled order each cycle;
    within a class, draws walk a shuffled permutation that is reshuffled on
    exhaustion, so every index of a class reappears before any repeats.
    """
    if batch_quota < 1:
        raise InvalidInputError("batch_quota must be >= 1")
    pools = {c: np.asarray(ix, dtype=np.int64) for c, ix in enumerate(indices_by_class)}
    nonempty = [c for c, ix in pools.items() if ix.size > 0]
    if not nonempty:
        raise InvalidInputError("all classes are empty")

    perms = {c: rng.permutation(pools[c]) for c in nonempty}
    cursor = {c: 0 for c in nonempty}
    class_order: list[int] = []

    def draw(c: int) -> int:
        if cursor[c] >= perms[c].size:
            perms[c] = rng.permutation(pools[c])
            cursor[c] = 0
        value = perms[c][cursor[c]]
        cursor[c] += 1
        return int(value)

    while True:
        batch = np.empty(batch_quota, dtype=np.int64)
        for j in range(batch_quota):
            if not class_order:
                class_order = [nonempty[i] for i in rng.permutation(len(nonempty))]
            batch[j] = draw(class_order.pop())
        yield batch


def export_dataset_csv(dataset: LabeledDataset, path) -> None:
    """One row per sample: feature_0..feature_{d-1},label."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"feature_{j}" for j in range(dataset.dim)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
