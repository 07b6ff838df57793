"""Single-object tracking metrics over per-frame predictions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import BoundingBox, iou

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
NORM_PRECISION_THRESHOLDS = np.linspace(0.0, 0.5, 51)
PRECISION_PX = 20.0


def success_curve(ious) -> np.ndarray:
    """Fraction of frames whose overlap reaches each threshold.

    A frame with zero overlap never counts, so a lost target scores 0 even at
    threshold 0 and a perfect tracker scores 1 everywhere.
    """
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        return np.zeros_like(SUCCESS_THRESHOLDS)
    hit = (ious[None, :] >= SUCCESS_THRESHOLDS[:, None] - 1e-12) & (ious[None, :] > 0)
    return hit.mean(axis=1)


def success_auc(ious) -> float:
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        return 0.0
    # one division of an integer count keeps the result exactly rounded
    hits = (ious[None, :] >= SUCCESS_THRESHOLDS[:, None] - 1e-12) & (ious[None, :] > 0)
    return int(hits.sum()) / (ious.size * SUCCESS_THRESHOLDS.size)


def center_error(pred: BoundingBox, gt: BoundingBox) -> float:
    return float(np.hypot(pred.cx - gt.cx, pred.cy - gt.cy))


def normalized_center_error(pred: BoundingBox, gt: BoundingBox) -> float:
    return float(np.hypot((pred.cx - gt.cx) / gt.w, (pred.cy - gt.cy) / gt.h))


@dataclass
class Metrics:
    ious: list[float] = field(default_factory=list)
    center_errors: list[float] = field(default_factory=list)
    norm_errors: list[float] = field(default_factory=list)

    def add(self, pred: BoundingBox, gt: BoundingBox) -> float:
        value = iou(pred, gt)
        self.ious.append(value)
        self.center_errors.append(center_error(pred, gt))
        self.norm_errors.append(normalized_center_error(pred, gt))
        return value

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.ious)) if self.ious else 0.0

    @property
    def auc(self) -> float:
        return success_auc(self.ious)

    @property
    def precision(self) -> float:
        if not self.center_errors:
            return 0.0
        return float(np.mean(np.asarray(self.center_errors) <= PRECISION_PX))

    @property
    def norm_precision(self) -> float:
        if not self.norm_errors:
            return 0.0
        err = np.asarray(self.norm_errors)
        return float(np.mean(err[None, :] <= NORM_PRECISION_THRESHOLDS[:, None]))

    def summary(self) -> dict:
        return {
            "frames": len(self.ious),
            "mean_iou": self.mean_iou,
            "auc": self.auc,
            "precision": self.precision,
            "norm_precision": self.norm_precision,
        }
