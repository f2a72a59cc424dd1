"""Confusion-matrix accumulation and IoU / mIoU evaluation."""

from __future__ import annotations

import numpy as np

from .core import IGNORE


class OutOfRangeClass(Exception):
    def __init__(self, kind, value, num_classes):
        super().__init__(f"{kind} value {value} outside [0, {num_classes})")


class ConfusionMatrix:
    """Exact integer confusion counts; rows are ground truth, columns predictions."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.num_classes = int(num_classes)
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices of different class counts")
        self.counts += other.counts
        return self


def accumulate(cm: ConfusionMatrix, labels, predictions) -> ConfusionMatrix:
    """Tally (label, prediction) pairs, skipping IGNORE ground truth."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
    if labels.shape != predictions.shape:
        raise ValueError(f"length mismatch: {labels.shape[0]} labels vs {predictions.shape[0]} predictions")
    keep = labels != IGNORE
    labels = labels[keep]
    predictions = predictions[keep]
    c = cm.num_classes
    if labels.size:
        if labels.min() < 0 or labels.max() >= c:
            bad = labels[(labels < 0) | (labels >= c)][0]
            raise OutOfRangeClass("label", int(bad), c)
        if predictions.min() < 0 or predictions.max() >= c:
            bad = predictions[(predictions < 0) | (predictions >= c)][0]
            raise OutOfRangeClass("prediction", int(bad), c)
        np.add.at(cm.counts, (labels, predictions), 1)
    return cm


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """IoU = TP / (TP + FP + FN) per class; NaN where the union is empty."""
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - np.diag(cm.counts)
    fn = cm.counts.sum(axis=1) - np.diag(cm.counts)
    union = tp + fp + fn
    out = np.full(cm.num_classes, np.nan)
    defined = union > 0
    out[defined] = tp[defined] / union[defined]
    return out


def miou(cm: ConfusionMatrix) -> float:
    """Mean IoU over classes with a nonempty union; 0.0 if none are defined."""
    ious = iou_per_class(cm)
    defined = ~np.isnan(ious)
    if not np.any(defined):
        return 0.0
    return float(np.mean(ious[defined]))


def report(cm: ConfusionMatrix) -> str:
    """Evaluation report: one `class_id iou count` line per class, then `miou`.

    count is the number of scored ground-truth points of the class; classes
    with an empty union print `nan` for their IoU.
    """
    ious = iou_per_class(cm)
    gt_counts = cm.counts.sum(axis=1)
    lines = []
    for cid in range(cm.num_classes):
        iou = "nan" if np.isnan(ious[cid]) else f"{ious[cid]:.6f}"
        lines.append(f"{cid} {iou} {int(gt_counts[cid])}")
    lines.append(f"miou {miou(cm):.6f}")
    return "\n".join(lines) + "\n"
