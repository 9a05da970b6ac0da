"""Segmentation metrics from a per-pixel confusion matrix.

Entry (i, j) counts pixels of ground-truth class i predicted as class j.
From that tally: mIoU averages intersection over union per class, mAcc
averages per-class recall, and pixel accuracy is the fraction of
correctly classified pixels. Classes absent from both the ground truth
and the prediction are excluded from the mIoU average; classes without
ground-truth pixels are excluded from mAcc (their recall is undefined).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, DomainError
from .tensor import Tensor, load_dptf, save_dptf


class SegmentationMap:
    """Integer label grid; values must lie in [0, num_classes) when tallied."""

    __slots__ = ("labels",)

    def __init__(self, labels):
        arr = np.asarray(labels)
        if arr.ndim != 2:
            raise DimensionError(f"label map must be 2-D, got shape {arr.shape}")
        if arr.dtype.kind not in "iu":
            raise DomainError(f"label map must be integer, got dtype {arr.dtype}")
        if arr.size and arr.min() < 0:
            raise DomainError("label map contains negative labels")
        self.labels = np.ascontiguousarray(arr, dtype=np.int32)

    @property
    def shape(self):
        return self.labels.shape

    def save(self, path: str | Path) -> None:
        save_dptf(path, Tensor(self.labels, "int32"))

    @staticmethod
    def load(path: str | Path) -> "SegmentationMap":
        t = load_dptf(path)
        if t.precision != "int32":
            raise DomainError(f"{path}: expected int32 label payload, got {t.precision}")
        return SegmentationMap(t.data)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [K, K] int64

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise DimensionError(f"confusion matrix must be square, got {self.counts.shape}")
        if self.counts.size and self.counts.min() < 0:
            raise DomainError("confusion matrix has negative entries")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.counts.shape != other.counts.shape:
            raise DimensionError(
                f"confusion matrices differ: {self.counts.shape} vs {other.counts.shape}"
            )
        return ConfusionMatrix(self.counts + other.counts)


def confusion(gt: SegmentationMap, pred: SegmentationMap, num_classes: int) -> ConfusionMatrix:
    if gt.shape != pred.shape:
        raise DimensionError(f"label maps differ: {gt.shape} vs {pred.shape}")
    g = gt.labels.reshape(-1).astype(np.int64)
    p = pred.labels.reshape(-1).astype(np.int64)
    if g.size and (g.max() >= num_classes or p.max() >= num_classes):
        raise DomainError(
            f"labels exceed num_classes={num_classes} "
            f"(max gt {g.max()}, max pred {p.max()})"
        )
    counts = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def _check_nonempty(cm: ConfusionMatrix) -> None:
    if cm.total == 0:
        raise DomainError("metrics undefined for an all-zero confusion matrix")


def miou(cm: ConfusionMatrix) -> float:
    _check_nonempty(cm)
    diag = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - np.diag(cm.counts)
    present = union > 0
    return float(np.mean(diag[present] / union[present]))


def macc(cm: ConfusionMatrix) -> float:
    _check_nonempty(cm)
    diag = np.diag(cm.counts).astype(np.float64)
    gt_count = cm.counts.sum(axis=1)
    present = gt_count > 0
    return float(np.mean(diag[present] / gt_count[present]))


def pixel_acc(cm: ConfusionMatrix) -> float:
    _check_nonempty(cm)
    return float(np.trace(cm.counts) / cm.total)
