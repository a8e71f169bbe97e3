"""Segmentation metrics: per-class IoU (mIoU) and foreground/background IoU (FB-IoU)."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from ..errors import MetricError, ShapeError


@dataclass
class MetricsAccumulator:
    tp: dict[int, int] = field(default_factory=lambda: defaultdict(int))
    fn: dict[int, int] = field(default_factory=lambda: defaultdict(int))
    fp: dict[int, int] = field(default_factory=lambda: defaultdict(int))
    # index 0 = background, 1 = foreground
    inter: list[int] = field(default_factory=lambda: [0, 0])
    union: list[int] = field(default_factory=lambda: [0, 0])

    def update(self, pred: np.ndarray, gt: np.ndarray, class_id: int) -> "MetricsAccumulator":
        pred = np.asarray(pred).astype(bool)
        gt = np.asarray(gt).astype(bool)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        self.tp[class_id] += int(np.count_nonzero(pred & gt))
        self.fn[class_id] += int(np.count_nonzero(~pred & gt))
        self.fp[class_id] += int(np.count_nonzero(pred & ~gt))
        for idx, (p, g) in enumerate(((~pred, ~gt), (pred, gt))):
            self.inter[idx] += int(np.count_nonzero(p & g))
            self.union[idx] += int(np.count_nonzero(p | g))
        return self

    def add_counts(self, class_id: int, tp: int = 0, fn: int = 0, fp: int = 0) -> "MetricsAccumulator":
        self.tp[class_id] += tp
        self.fn[class_id] += fn
        self.fp[class_id] += fp
        return self

    def merge(self, other: "MetricsAccumulator") -> "MetricsAccumulator":
        for c in set(other.tp) | set(other.fn) | set(other.fp):
            self.add_counts(c, other.tp[c], other.fn[c], other.fp[c])
        for i in range(2):
            self.inter[i] += other.inter[i]
            self.union[i] += other.union[i]
        return self

    def class_iou(self) -> dict[int, float]:
        """IoU per class; classes with an empty union are skipped."""
        out = {}
        for c in sorted(set(self.tp) | set(self.fn) | set(self.fp)):
            denom = self.tp[c] + self.fn[c] + self.fp[c]
            if denom > 0:
                out[c] = self.tp[c] / denom
        return out


def miou(acc: MetricsAccumulator) -> float:
    ious = acc.class_iou()
    if not ious:
        raise MetricError("mIoU undefined: no class has a nonzero union")
    return sum(ious.values()) / len(ious)


def fb_iou(acc: MetricsAccumulator) -> float:
    ious = [i / u for i, u in zip(acc.inter, acc.union) if u > 0]
    if not ious:
        raise MetricError("FB-IoU undefined: nothing accumulated")
    return sum(ious) / len(ious)
