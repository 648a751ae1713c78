"""Fold-level mean intersection-over-union from per-episode predictions.

IoU is episode-aggregated: intersection and union pixel counts are summed
over all of a class's episodes first, then divided. Counts are integers, so
accumulation order never changes a result and accumulator merging is exact.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DataError, ShapeError


class ConfusionAccumulator:
    """Per-class intersection / union pixel sums."""

    def __init__(self):
        self.inter = {}
        self.union = {}

    def accumulate(self, class_id, pred, gt):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
        if not np.isin(pred, (0, 1)).all() or not np.isin(gt, (0, 1)).all():
            raise DataError("accumulate() needs binary masks")
        p = pred == 1
        g = gt == 1
        self.inter[class_id] = self.inter.get(class_id, 0) + int(np.count_nonzero(p & g))
        self.union[class_id] = self.union.get(class_id, 0) + int(np.count_nonzero(p | g))
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        out = ConfusionAccumulator()
        for src in (self, other):
            for cid, v in src.inter.items():
                out.inter[cid] = out.inter.get(cid, 0) + v
            for cid, v in src.union.items():
                out.union[cid] = out.union.get(cid, 0) + v
        return out

    def iou(self, class_id):
        u = self.union.get(class_id, 0)
        if u == 0:
            return None
        return self.inter.get(class_id, 0) / u

    def to_dict(self):
        return {"inter": dict(self.inter), "union": dict(self.union)}

    @classmethod
    def from_dict(cls, doc):
        acc = cls()
        acc.inter = {int(k): int(v) for k, v in doc["inter"].items()}
        acc.union = {int(k): int(v) for k, v in doc["union"].items()}
        return acc


def miou(acc: ConfusionAccumulator, classes):
    """Unweighted mean IoU over the fold's classes.

    Returns (miou, per_class, undefined): classes whose union is zero are
    excluded from the mean and reported in `undefined`.
    """
    classes = sorted(classes)
    if not classes:
        raise ConfigError("miou() needs a non-empty class set")
    per_class = {}
    undefined = set()
    for cid in classes:
        v = acc.iou(cid)
        if v is None:
            undefined.add(cid)
        else:
            per_class[cid] = v
    if not per_class:
        raise DataError("every requested class has zero union; nothing was evaluated")
    return sum(per_class.values()) / len(per_class), per_class, undefined
