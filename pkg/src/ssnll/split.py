"""Small-loss sample selection, applied independently within each
pseudo-label class so the cleaner subset never misses a class."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .adapt import PseudoLabelSet
from .data import LabeledDataset
from .errors import InvalidInputError
from .nn import Classifier, cross_entropy, forward

DEFAULT_SPLIT_RATIO = 0.2


@dataclass
class SplitAssignment:
    """Disjoint index partition of the target set into a cleaner part
    (trained with its pseudo labels) and a noisier part (self-labeled)."""

    cleaner: np.ndarray
    noisier: np.ndarray
    per_class_cleaner_counts: np.ndarray
    split_ratio: float

    def __post_init__(self) -> None:
        self.cleaner = np.asarray(self.cleaner, dtype=np.int64)
        self.noisier = np.asarray(self.noisier, dtype=np.int64)
        self.per_class_cleaner_counts = np.asarray(self.per_class_cleaner_counts, dtype=np.int64)


def per_sample_loss(
    model: Classifier, target: LabeledDataset, pseudo: PseudoLabelSet
) -> np.ndarray:
    """Eval-mode cross-entropy of each target sample against its pseudo
    label; the model is not mutated."""
    if target.n != pseudo.n:
        raise InvalidInputError("target and pseudo label sizes differ")
    probs, _, _ = forward(model, target.features, mode="eval")
    _, losses = cross_entropy(probs, pseudo.labels)
    return losses


def _cleaner_count(r: float, group_size: int) -> int:
    # ceil(r * n) with a tolerance so exact products like 0.2 * 5 do not get
    # bumped up by float rounding; ceil keeps every non-empty class represented
    count = math.ceil(r * group_size - 1e-9)
    return min(group_size, max(1, count))


def labelwise_split(
    losses: np.ndarray,
    pseudo_labels: np.ndarray,
    num_classes: int,
    r: float,
) -> SplitAssignment:
    """Per class: the ceil(r * n_c) smallest-loss samples go to the cleaner
    subset (ties favor the smaller sample index), the rest to the noisier."""
    if not 0 < r <= 1:
        raise InvalidInputError(f"split ratio must lie in (0, 1], got {r}")
    losses = np.asarray(losses, dtype=np.float64)
    labels = np.asarray(pseudo_labels, dtype=np.int64)
    if losses.ndim != 1 or losses.shape != labels.shape:
        raise InvalidInputError("losses and labels must be 1-D and equally long")
    if losses.size and ((labels < 0).any() or (labels >= num_classes).any()):
        raise InvalidInputError("pseudo label out of range")

    cleaner_parts: list[np.ndarray] = []
    noisier_parts: list[np.ndarray] = []
    counts = np.zeros(num_classes, dtype=np.int64)
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)  # increasing index order
        if members.size == 0:
            continue
        keep = _cleaner_count(r, members.size)
        order = np.argsort(losses[members], kind="stable")  # stable: ties by index
        cleaner_parts.append(members[order[:keep]])
        noisier_parts.append(members[order[keep:]])
        counts[c] = keep
    cleaner = np.sort(np.concatenate(cleaner_parts)) if cleaner_parts else np.empty(0, np.int64)
    noisier = np.sort(np.concatenate(noisier_parts)) if noisier_parts else np.empty(0, np.int64)
    return SplitAssignment(cleaner, noisier, counts, r)


def export_split_csv(
    assign: SplitAssignment,
    pseudo_labels: np.ndarray,
    losses: np.ndarray,
    path,
) -> None:
    """One row per sample: index,pseudo_label,loss,subset."""
    subset = {}
    for i in assign.cleaner:
        subset[int(i)] = "cleaner"
    for i in assign.noisier:
        subset[int(i)] = "noisier"
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "pseudo_label", "loss", "subset"])
        for i in sorted(subset):
            writer.writerow([i, int(pseudo_labels[i]), repr(float(losses[i])), subset[i]])
