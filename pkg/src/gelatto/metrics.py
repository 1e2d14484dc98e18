"""Confusion matrix and segmentation scores (OA, mAcc, mIoU)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Scores:
    oa: float
    macc: float
    miou: float
    iou: np.ndarray
    acc: np.ndarray


class ConfusionMatrix:
    """Counts with rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = (np.zeros((num_classes, num_classes), dtype=np.int64)
                       if counts is None else np.asarray(counts, dtype=np.int64).copy())

    def update(self, truth, pred) -> "ConfusionMatrix":
        truth = np.asarray(truth, dtype=np.int64).reshape(-1)
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        if truth.shape != pred.shape:
            raise ValueError(f"{truth.size} labels vs {pred.size} predictions")
        c = self.num_classes
        for name, arr in (("truth", truth), ("prediction", pred)):
            if arr.size and (arr.min() < 0 or arr.max() >= c):
                raise ValueError(f"{name} label outside [0, {c})")
        self.counts += np.bincount(truth * c + pred, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def compute(self) -> Scores:
        return compute(self.counts)


def update(cm: ConfusionMatrix, truth, pred) -> ConfusionMatrix:
    return cm.update(truth, pred)


def compute(counts) -> Scores:
    """Scores from a confusion matrix.

    Classes with an empty ground-truth row are left out of mAcc; classes
    absent from both truth and prediction are left out of mIoU. Per-class
    entries for excluded classes are NaN.
    """
    cm = np.asarray(counts, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm)
    rows, cols = cm.sum(axis=1), cm.sum(axis=0)
    union = rows + cols - tp
    with np.errstate(divide="ignore", invalid="ignore"):
        acc = np.where(rows > 0, tp / rows, np.nan)
        iou = np.where(union > 0, tp / union, np.nan)
    return Scores(
        oa=float(tp.sum() / total),
        macc=float(np.nanmean(acc)),
        miou=float(np.nanmean(iou)),
        iou=iou,
        acc=acc,
    )


def format_table(scores: Scores, class_names: list[str] | None = None) -> str:
    """One header row and one value row, percentages with one decimal."""
    n = len(scores.iou)
    names = class_names or [f"class{i}" for i in range(n)]
    head = ["OA", "mIoU", "mAcc"] + names
    vals = [scores.oa, scores.miou, scores.macc] + list(scores.iou)
    cells = ["-" if np.isnan(v) else f"{100 * v:.1f}" for v in vals]
    widths = [max(len(h), len(c)) for h, c in zip(head, cells)]
    line1 = "  ".join(h.rjust(w) for h, w in zip(head, widths))
    line2 = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    return f"{line1}\n{line2}"


def format_keyvalue(scores: Scores) -> str:
    lines = [f"oa={scores.oa:.9g}", f"macc={scores.macc:.9g}", f"miou={scores.miou:.9g}"]
    for i, (a, u) in enumerate(zip(scores.acc, scores.iou)):
        lines.append(f"acc_{i}={a:.9g}")
        lines.append(f"iou_{i}={u:.9g}")
    return "\n".join(lines) + "\n"
