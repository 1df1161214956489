"""Confusion-matrix accumulation and mean intersection-over-union."""

import numpy as np

from .exceptions import ShapeError
from .validation import IGNORE_LABEL


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions.

    Pixels whose ground truth equals ``ignore_label`` are not scored.
    """

    def __init__(self, num_classes, ignore_label=IGNORE_LABEL):
        if num_classes < 1:
            raise ValueError("num_classes must be positive")
        self.num_classes = int(num_classes)
        self.ignore_label = ignore_label
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, gt):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        keep = gt != self.ignore_label
        p = pred[keep].astype(np.int64)
        t = gt[keep].astype(np.int64)
        C = self.num_classes
        if p.size and (t.min() < 0 or t.max() >= C or p.min() < 0 or p.max() >= C):
            raise ShapeError(f"class ids outside [0, {C})")
        self.counts += np.bincount(t * C + p, minlength=C * C).reshape(C, C)
        return self

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def tp(self):
        return np.diag(self.counts).copy()

    @property
    def fp(self):
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self):
        return self.counts.sum(axis=1) - self.tp

    def iou(self):
        """Per-class IoU; NaN for classes absent from both truth and prediction."""
        union = self.tp + self.fp + self.fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, self.tp / np.maximum(union, 1), np.nan)

    def miou(self):
        """``(mean IoU over classes that occur, per-class IoU)``."""
        if self.total == 0:
            raise ValueError("mIOU of an empty confusion matrix")
        per_class = self.iou()
        return float(np.nanmean(per_class)), per_class

    def pixel_accuracy(self):
        return self.tp.sum() / self.total

    def __iadd__(self, other):
        self.counts += other.counts
        return self


def accumulate(conf, pred, gt):
    return conf.accumulate(pred, gt)


def miou(conf):
    return conf.miou()
