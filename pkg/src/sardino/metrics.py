"""Segmentation metrics.

Everything here is plain numpy over integer class maps; the model only
enters through a `predict_fn` callable, so the metrics are reusable for
any predictor and trivially testable against brute-force pixel sets.

Aggregation is global: one confusion matrix accumulated over all
evaluated tiles, intersections and unions summed before the division.
Classes whose union is empty (never in truth nor predictions) are
excluded from the mean rather than counted as zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DataError
from .geodata import NUM_CLASSES, RasterTile


@dataclass
class ConfusionMatrix:
    """Square count matrix; rows are ground truth, columns are predictions."""

    num_classes: int = NUM_CLASSES
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes),
                                   dtype=np.uint64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.uint64)
            if self.counts.shape != (self.num_classes, self.num_classes):
                raise DataError(f"confusion matrix shape {self.counts.shape} "
                                f"does not match {self.num_classes} classes")

    def update(self, truth: np.ndarray, pred: np.ndarray):
        truth = np.asarray(truth)
        pred = np.asarray(pred)
        if truth.shape != pred.shape:
            raise DataError(f"truth shape {truth.shape} != prediction shape "
                            f"{pred.shape}")
        t = truth.reshape(-1).astype(np.int64)
        p = pred.reshape(-1).astype(np.int64)
        k = self.num_classes
        if t.size and (t.min() < 0 or t.max() >= k or p.min() < 0 or p.max() >= k):
            raise DataError(f"class ids out of range [0, {k})")
        flat = np.bincount(t * k + p, minlength=k * k)
        self.counts += flat.reshape(k, k).astype(np.uint64)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DataError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """IoU_k = TP / (TP + FP + FN); NaN where the union is empty."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    union = tp + fp + fn
    out = np.full(cm.num_classes, np.nan)
    present = union > 0
    out[present] = tp[present] / union[present]
    return out


def miou(cm: ConfusionMatrix) -> float:
    """Mean IoU over classes that appear in truth or predictions."""
    per_class = iou_per_class(cm)
    valid = ~np.isnan(per_class)
    if not valid.any():
        raise DataError("no class has a nonzero union; nothing to average")
    return float(per_class[valid].mean())


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    if total == 0:
        raise DataError("empty confusion matrix")
    return float(np.diag(cm.counts).sum() / total)


@dataclass
class IoUReport:
    miou: float
    pixel_accuracy: float
    per_class: np.ndarray          # [K], NaN marks classes with no union
    confusion: ConfusionMatrix
    tiles_evaluated: int = 0

    def class_line(self) -> str:
        cells = ["  -  " if np.isnan(v) else f"{v:.3f}" for v in self.per_class]
        return " ".join(cells)


def evaluate_predictions(pairs: Sequence[tuple[np.ndarray, np.ndarray]],
                         num_classes: int = NUM_CLASSES) -> IoUReport:
    cm = ConfusionMatrix(num_classes)
    for truth, pred in pairs:
        cm.update(truth, pred)
    return IoUReport(miou=miou(cm), pixel_accuracy=pixel_accuracy(cm),
                     per_class=iou_per_class(cm), confusion=cm,
                     tiles_evaluated=len(pairs))


def evaluate_model(predict_fn: Callable[[np.ndarray], np.ndarray],
                   tiles: Sequence[RasterTile],
                   num_classes: int = NUM_CLASSES,
                   transform: Optional[Callable[[np.ndarray], np.ndarray]] = None
                   ) -> IoUReport:
    """Run `predict_fn` over labelled tiles and aggregate one global
    confusion matrix. `transform` is applied to the channels first
    (normalization, typically)."""
    if not tiles:
        raise DataError("cannot evaluate on zero tiles")
    cm = ConfusionMatrix(num_classes)
    for i, tile in enumerate(tiles):
        if tile.labels is None:
            raise DataError(f"tile {i} has no labels")
        channels = tile.channels if transform is None else transform(tile.channels)
        pred = predict_fn(channels)
        if pred.shape != tile.labels.shape:
            raise DataError(f"prediction shape {pred.shape} does not match "
                            f"labels {tile.labels.shape} on tile {i}")
        cm.update(tile.labels, pred)
    return IoUReport(miou=miou(cm), pixel_accuracy=pixel_accuracy(cm),
                     per_class=iou_per_class(cm), confusion=cm,
                     tiles_evaluated=len(tiles))
