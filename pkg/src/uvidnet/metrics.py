"""Confusion-matrix segmentation metrics: IoU, mIoU, precision, recall, F1.

A class is undefined for a metric when that metric's denominator is zero;
undefined classes are left out of the macro means.
"""
from __future__ import annotations

import csv
import io
from typing import Mapping, Sequence

import numpy as np

from .data import Palette


class ConfusionMatrix:
    """Entry (i, j) counts pixels with ground truth i predicted as j."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        if num_classes < 1:
            raise ValueError("num_classes must be positive")
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes) or (counts < 0).any():
            raise ValueError(f"counts must be a non-negative {num_classes}x{num_classes} matrix")
        self.counts = counts

    def __repr__(self) -> str:
        return f"ConfusionMatrix({self.counts.tolist()})"

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.counts)

    @property
    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp


def accumulate(pred: np.ndarray, gt: np.ndarray, cm: ConfusionMatrix) -> ConfusionMatrix:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    c = cm.num_classes
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= c):
            raise ValueError(f"{name} holds indices outside [0, {c})")
    counts = np.bincount(gt.astype(np.int64).ravel() * c + pred.astype(np.int64).ravel(), minlength=c * c)
    return ConfusionMatrix(c, cm.counts + counts.reshape(c, c))


def _ratio(num: np.ndarray, den: np.ndarray) -> list[float | None]:
    return [float(n) / float(d) if d > 0 else None for n, d in zip(num, den)]


def _mean(values: Sequence[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    return sum(defined) / len(defined) if defined else None


def per_class_iou(cm: ConfusionMatrix) -> list[float | None]:
    return _ratio(cm.tp, cm.tp + cm.fp + cm.fn)


def miou(cm: ConfusionMatrix) -> float:
    value = _mean(per_class_iou(cm))
    if value is None:
        raise ValueError("mIoU undefined: no class occurs in prediction or ground truth")
    return value


def per_class_prf(cm: ConfusionMatrix) -> tuple[list, list, list]:
    tp, fp, fn = cm.tp, cm.fp, cm.fn
    # 2TP / (2TP + FP + FN) equals 2PR / (P + R) wherever both are defined,
    # and is 0 (not undefined) for a class that is present but never hit.
    return _ratio(tp, tp + fp), _ratio(tp, tp + fn), _ratio(2 * tp, 2 * tp + fp + fn)


def precision_recall_f1(cm: ConfusionMatrix, averaging: str = "macro") -> tuple[float | None, ...]:
    if averaging == "macro":
        p, r, f = per_class_prf(cm)
        return _mean(p), _mean(r), _mean(f)
    if averaging == "micro":
        tp, fp, fn = int(cm.tp.sum()), int(cm.fp.sum()), int(cm.fn.sum())
        p = tp / (tp + fp) if tp + fp else None
        r = tp / (tp + fn) if tp + fn else None
        f = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else None
        return p, r, f
    raise ValueError(f"averaging must be 'macro' or 'micro', not {averaging!r}")


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    return float(cm.tp.sum()) / cm.total if cm.total else 0.0


METRIC_COLUMNS = ("mIoU", "precision_macro", "recall_macro", "f1_macro", "precision_micro", "recall_micro",
                  "f1_micro")


def metric_row(cm: ConfusionMatrix) -> list[float | None]:
    ious = per_class_iou(cm)
    mean = _mean(ious)
    return [*ious, mean, *precision_recall_f1(cm, "macro"), *precision_recall_f1(cm, "micro")]


def report(cms: Mapping[str, ConfusionMatrix], palette: Palette) -> tuple[str, str]:
    """Build (text table, CSV) with one row per sequence plus an aggregate row."""
    if not cms:
        raise ValueError("report needs at least one confusion matrix")
    header = ["sequence", *palette.names, *METRIC_COLUMNS]
    total = None
    rows = []
    for name, cm in cms.items():
        if cm.num_classes != len(palette):
            raise ValueError(f"{name}: {cm.num_classes} classes but palette has {len(palette)}")
        rows.append([name, *metric_row(cm)])
        total = cm if total is None else total + cm
    rows.append(["ALL", *metric_row(total)])

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([row[0], *("" if v is None else f"{v:.6f}" for v in row[1:])])

    width = max(12, *(len(h) for h in header[1:]))
    name_w = max(len("sequence"), *(len(r[0]) for r in rows))
    lines = [f"{header[0]:<{name_w}} " + " ".join(f"{h:>{width}}" for h in header[1:])]
    for row in rows:
        cells = ("n/a" if v is None else f"{v:.4f}" for v in row[1:])
        lines.append(f"{row[0]:<{name_w}} " + " ".join(f"{c:>{width}}" for c in cells))
    lines.append("undefined classes (absent from prediction and ground truth) are excluded from means")
    return "\n".join(lines) + "\n", buf.getvalue()
