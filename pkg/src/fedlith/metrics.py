"""Confusion-matrix accounting and the three evaluation metrics."""

from dataclasses import dataclass

import numpy as np

from fedlith.errors import UndefinedMetricError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def tpr(c: ConfusionCounts) -> float:
    """Fraction of true hotspots identified (recall)."""
    if c.tp + c.fn == 0:
        raise UndefinedMetricError("no hotspots in the evaluation set")
    return c.tp / (c.tp + c.fn)


def fpr(c: ConfusionCounts) -> float:
    """Fraction of non-hotspots flagged as hotspots (false alarms)."""
    if c.fp + c.tn == 0:
        raise UndefinedMetricError("no non-hotspots in the evaluation set")
    return c.fp / (c.fp + c.tn)


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise UndefinedMetricError("empty evaluation set")
    return (c.tp + c.tn) / c.total


def predictions_from_logits(logits: np.ndarray) -> np.ndarray:
    """Argmax over the 2 logits; exact ties go to non-hotspot."""
    logits = np.asarray(logits)
    return (logits[:, 1] > logits[:, 0]).astype(np.int64)


def confusion_from_logits(logits: np.ndarray, labels: np.ndarray) -> ConfusionCounts:
    pred = predictions_from_logits(logits)
    labels = np.asarray(labels)
    tp = int(((pred == 1) & (labels == 1)).sum())
    fp = int(((pred == 1) & (labels == 0)).sum())
    tn = int(((pred == 0) & (labels == 0)).sum())
    fn = int(((pred == 0) & (labels == 1)).sum())
    return ConfusionCounts(tp, fp, tn, fn)
