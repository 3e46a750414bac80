"""Point-level confusion matrix and IoU / mIoU."""

from __future__ import annotations

import numpy as np

from .errors import LabelError


class ConfusionMatrix:
    """Counts indexed (truth, prediction); points whose truth is the ignore id are skipped."""

    def __init__(self, num_classes: int, ignore: int = 0):
        self.num_classes = num_classes
        self.ignore = ignore
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, truth, pred) -> ConfusionMatrix:
        truth = np.asarray(truth, dtype=np.int64).reshape(-1)
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        if truth.shape != pred.shape:
            raise LabelError(f"truth has {truth.size} entries, prediction {pred.size}")
        for name, a in (("truth", truth), ("prediction", pred)):
            if a.size and (a.min() < 0 or a.max() >= self.num_classes):
                raise LabelError(f"{name} id out of range [0, {self.num_classes})")
        keep = truth != self.ignore
        flat = truth[keep] * self.num_classes + pred[keep]
        self.counts += np.bincount(flat, minlength=self.num_classes ** 2).reshape(self.counts.shape)
        return self

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.num_classes != self.num_classes or other.ignore != self.ignore:
            raise ValueError("cannot merge confusion matrices of different layout")
        out = ConfusionMatrix(self.num_classes, self.ignore)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def scored_classes(self) -> list[int]:
        return [c for c in range(self.num_classes) if c != self.ignore]

    def iou(self, c: int) -> float | None:
        """TP / (TP + FP + FN) for class ``c``, or None when that denominator is 0.

        False positives count only points with non-ignored truth.
        """
        if c == self.ignore:
            raise ValueError("IoU of the ignore class is not defined")
        tp = int(self.counts[c, c])
        fp = int(self.counts[:, c].sum()) - tp
        fn = int(self.counts[c, :].sum()) - tp
        denom = tp + fp + fn
        return None if denom == 0 else tp / denom

    def miou(self, undefined: str = "zero") -> float:
        """Mean IoU over non-ignored classes; undefined classes count as 0 or are excluded."""
        vals = [self.iou(c) for c in self.scored_classes()]
        if undefined == "exclude":
            vals = [v for v in vals if v is not None]
            if not vals:
                raise ValueError("no class has a defined IoU")
        elif undefined == "zero":
            if all(v is None for v in vals):
                raise ValueError("no class has a defined IoU")
            vals = [0.0 if v is None else v for v in vals]
        else:
            raise ValueError(f"unknown undefined-class policy {undefined!r}")
        return float(sum(vals) / len(vals))

    def report(self, class_names=None, undefined: str = "zero") -> list[tuple[str, float | None]]:
        names = class_names or [f"class{c}" for c in range(self.num_classes)]
        rows = [(names[c], self.iou(c)) for c in self.scored_classes()]
        rows.append(("mIoU", self.miou(undefined)))
        return rows


def format_table(rows) -> str:
    width = max(len(name) for name, _ in rows)
    lines = [f"{'class':<{width}}  IoU"]
    for name, v in rows:
        lines.append(f"{name:<{width}}  {'n/a' if v is None else f'{v:.4f}'}")
    return "\n".join(lines) + "\n"


def format_csv(rows) -> str:
    out = ["class,iou"]
    for name, v in rows:
        out.append(f"{name},{'' if v is None else repr(float(v))}")
    return "\n".join(out) + "\n"
