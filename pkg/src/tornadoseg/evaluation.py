"""Confusion-matrix accumulation and intersection-over-union scores."""
from __future__ import annotations

import numpy as np

from .exceptions import ContractError
from .pointcloud import IGNORE_ID


class ConfusionMatrix:
    """``C x C`` counts with rows = ground truth and columns = prediction.

    Matrices built from disjoint streams can be merged with ``+``.
    """

    def __init__(self, num_classes: int, counts=None):
        self.num_classes = int(num_classes)
        if counts is None:
            counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (self.num_classes, self.num_classes) or np.any(counts < 0):
            raise ContractError("counts must be a non-negative C x C matrix")
        self.counts = counts.copy()

    def accumulate(self, predictions, truth, ignore_id: int = IGNORE_ID) -> "ConfusionMatrix":
        pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
        true = np.asarray(truth, dtype=np.int64).reshape(-1)
        if pred.shape != true.shape:
            raise ContractError(f"{pred.size} predictions for {true.size} labels")
        c = self.num_classes
        keep = true != ignore_id
        for name, ids in (("truth", true[keep]), ("prediction", pred[keep])):
            if ids.size and (ids.min() < 0 or ids.max() >= c):
                raise ContractError(f"{name} id outside [0, {c})")
        flat = true[keep] * c + pred[keep]
        self.counts += np.bincount(flat, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ContractError("cannot merge matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def true_positives(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    def false_positives(self) -> np.ndarray:
        return self.counts.sum(axis=0) - np.diag(self.counts)

    def false_negatives(self) -> np.ndarray:
        return self.counts.sum(axis=1) - np.diag(self.counts)

    def present(self) -> np.ndarray:
        """Classes occurring in ground truth or predictions."""
        return (self.counts.sum(axis=0) + self.counts.sum(axis=1)) > 0

    def accuracy(self) -> float:
        return float(np.diag(self.counts).sum() / max(self.total, 1))


def accumulate(cm: ConfusionMatrix, predictions, truth, ignore_id: int = IGNORE_ID) -> ConfusionMatrix:
    return cm.accumulate(predictions, truth, ignore_id)


def iou_per_class(cm: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray]:
    """IoU per class and the mask of present classes (absent classes are NaN)."""
    tp = cm.true_positives().astype(np.float64)
    denom = tp + cm.false_positives() + cm.false_negatives()
    present = denom > 0
    iou = np.full(cm.num_classes, np.nan)
    iou[present] = tp[present] / denom[present]
    return iou, present


def miou(cm: ConfusionMatrix) -> float:
    iou, present = iou_per_class(cm)
    if not present.any():
        raise ContractError("no class is present; mIoU is undefined")
    return float(iou[present].mean())


def format_report(cm: ConfusionMatrix, class_names=None) -> tuple[str, str]:
    """Human-readable table and ``key=value`` lines for per-class IoU and mIoU."""
    iou, present = iou_per_class(cm)
    names = list(class_names) if class_names is not None else [str(c) for c in range(cm.num_classes)]
    width = max(len("class"), *(len(n) for n in names))
    table = [f"{'class':<{width}}  {'IoU':>7}"]
    kv = []
    for c, name in enumerate(names):
        value = f"{iou[c]:.4f}" if present[c] else "absent"
        table.append(f"{name:<{width}}  {value:>7}")
        kv.append(f"iou.{name}={float(iou[c])!r}" if present[c] else f"iou.{name}=absent")
    m = miou(cm)
    table.append(f"{'mIoU':<{width}}  {m:>7.4f}")
    kv.append(f"miou={float(m)!r}")
    kv.append(f"accuracy={float(cm.accuracy())!r}")
    return "\n".join(table) + "\n", "\n".join(kv) + "\n"
