"""Label-denoising preprocessing: batch-norm statistic re-estimation on the
target domain, pseudo-label pre-generation, over-clustered k-means on
penultimate features, and within-cluster probability aggregation."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import InvalidInputError
from .nn import BatchNorm, Classifier, forward

KMEANS_MAX_ITERS = 100
KMEANS_TOL = 1e-6
OVERCLUSTER_FACTOR = 10


@dataclass
class ClusterModel:
    """Fitted k-means state: one centroid row per cluster, per-sample
    assignments, and the summed squared distance (inertia)."""

    centroids: np.ndarray  # (k, d)
    assignments: np.ndarray  # (N,)
    k: int
    inertia: float
    inertia_trace: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        if self.assignments.size and (
            (self.assignments < 0).any() or (self.assignments >= self.k).any()
        ):
            raise InvalidInputError("cluster assignment out of range")
        if self.inertia < 0:
            raise InvalidInputError("inertia must be >= 0")


@dataclass
class PseudoLabelSet:
    """Per-sample class probabilities with their argmax labels."""

    labels: np.ndarray
    probs: np.ndarray

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or self.labels.shape != (self.probs.shape[0],):
            raise InvalidInputError("labels must have one entry per probability row")
        if not np.allclose(self.probs.sum(axis=1), 1.0, atol=1e-9):
            raise InvalidInputError("probability rows must sum to 1")
        if (self.labels != self.probs.argmax(axis=1)).any():
            raise InvalidInputError("labels must be the row-wise argmax of probs")

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]


def adabn_update(
    model: Classifier,
    target: LabeledDataset,
    lambda_adabn: float = 0.9,
    batch_size: int = 128,
    rng: np.random.Generator | None = None,
) -> Classifier:
    """Re-estimate BatchNorm population statistics on the target domain.

    One full shuffled pass; each batch folds its statistics into the running
    values as stats <- lambda * stats + (1 - lambda) * batch. Trainable
    parameters are untouched.
    """
    if not 0 <= lambda_adabn < 1:
        raise InvalidInputError("lambda_adabn must lie in [0, 1)")
    if batch_size < 1:
        raise InvalidInputError("batch_size must be >= 1")
    if not any(isinstance(l, BatchNorm) for l in model.layers):
        warnings.warn("adabn_update: model has no BatchNorm layer; nothing to adapt")
        return model
    rng = rng if rng is not None else np.random.default_rng(0)
    n = target.n
    batch_size = min(batch_size, n)
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        batch = target.features[order[start : start + batch_size]]
        # train-mode forward computes each BN layer's input batch statistics;
        # the momentum override implements the lambda-weighted moving average
        forward(model, batch, mode="train", bn_momentum=1.0 - lambda_adabn)
    model.bump_version()
    return model


def pregenerate_labels(model: Classifier, target: LabeledDataset) -> PseudoLabelSet:
    """Eval-mode inference over the whole target set; argmax ties resolve to
    the smaller class index."""
    probs, _, _ = forward(model, target.features, mode="eval")
    return PseudoLabelSet(probs.argmax(axis=1), probs)


def extract_features(model: Classifier, data: LabeledDataset) -> np.ndarray:
    """Eval-mode activations at the model's feature tap, one row per sample."""
    _, features, _ = forward(model, data.features, mode="eval")
    return features


def _pairwise_sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = (
        (x * x).sum(axis=1)[:, None]
        - 2.0 * x @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))  # all remaining points coincide with a centroid
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[j] = x[idx]
        closest = np.minimum(closest, ((x - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _repair_empty(
    x: np.ndarray, centroids: np.ndarray, assign: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    # reseed each empty cluster onto the sample farthest from its own
    # centroid, stealing that sample; cost never increases
    counts = np.bincount(assign, minlength=centroids.shape[0])
    empties = np.flatnonzero(counts == 0)
    if empties.size:
        own_d2 = ((x - centroids[assign]) ** 2).sum(axis=1)
        for j in empties:
            i = int(own_d2.argmax())
            centroids[j] = x[i]
            assign[i] = j
            own_d2[i] = 0.0
    return centroids, assign


def kmeans(
    features: np.ndarray,
    k: int,
    seed: int = 0,
    max_iters: int = KMEANS_MAX_ITERS,
    tol: float = KMEANS_TOL,
) -> ClusterModel:
    """Lloyd iterations from seeded k-means++ starts.

    Stops when the largest centroid movement drops below ``tol`` or after
    ``max_iters`` rounds; the recorded inertia trace is non-increasing.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInputError("features must be 2-D")
    n = x.shape[0]
    if k < 1 or k > n:
        raise InvalidInputError(f"k must lie in [1, {n}], got {k}")
    if max_iters < 1:
        raise InvalidInputError("max_iters must be >= 1")

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(x, k, rng)
    trace: list[float] = []
    for _ in range(max_iters):
        assign = _pairwise_sq_dists(x, centroids).argmin(axis=1)
        centroids, assign = _repair_empty(x, centroids, assign)
        trace.append(float(((x - centroids[assign]) ** 2).sum()))
        new_centroids = np.empty_like(centroids)
        for j in range(k):
            new_centroids[j] = x[assign == j].mean(axis=0)
        movement = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
        centroids = new_centroids
        if movement < tol:
            break
    assign = _pairwise_sq_dists(x, centroids).argmin(axis=1)
    centroids, assign = _repair_empty(x, centroids, assign)
    inertia = float(((x - centroids[assign]) ** 2).sum())
    trace.append(inertia)
    return ClusterModel(centroids, assign, k, inertia, trace)


def overcluster_count(num_classes: int, n: int) -> int:
    """10x the class count, clamped to n/2 when the dataset is too small."""
    k = OVERCLUSTER_FACTOR * num_classes
    if k > n:
        k = max(1, min(k, n // 2))
    return k


def dtc_refine(pseudo: PseudoLabelSet, clusters: ClusterModel) -> PseudoLabelSet:
    """Average the probability rows within each cluster and relabel by the
    aggregated argmax, so all members of a cluster share one distribution."""
    if pseudo.n != clusters.assignments.shape[0]:
        raise InvalidInputError(
            f"pseudo labels cover {pseudo.n} samples, clusters cover {clusters.assignments.shape[0]}"
        )
    sums = np.zeros((clusters.k, pseudo.num_classes))
    np.add.at(sums, clusters.assignments, pseudo.probs)
    counts = np.bincount(clusters.assignments, minlength=clusters.k)
    means = sums / np.maximum(counts, 1)[:, None]
    refined = means[clusters.assignments]
    return PseudoLabelSet(refined.argmax(axis=1), refined)


def export_pseudo_csv(pseudo: PseudoLabelSet, clusters: ClusterModel, path) -> None:
    """One row per sample: index,cluster,label,prob_0..prob_{K-1}."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["index", "cluster", "label"] + [f"prob_{c}" for c in range(pseudo.num_classes)]
        )
        for i in range(pseudo.n):
            writer.writerow(
                [i, int(clusters.assignments[i]), int(pseudo.labels[i])]
                + [repr(float(v)) for v in pseudo.probs[i]]
            )
