"""Confusion matrix, IoU/mIoU and panoptic quality."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud import IGNORE


@dataclass
class ConfusionMatrix:
    """``counts[g - 1, p - 1]`` = points with ground truth g predicted as p."""

    counts: np.ndarray
    ignored: int = 0

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored)


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> ConfusionMatrix:
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt differ in length")
    valid = gt != IGNORE
    if np.any((pred[valid] < 1) | (pred[valid] > num_classes)) or np.any(gt[valid] > num_classes):
        raise ValueError("labels outside 1..num_classes")
    flat = (gt[valid] - 1) * num_classes + (pred[valid] - 1)
    counts = np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    return ConfusionMatrix(counts, int((~valid).sum()))


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """TP / (TP + FP + FN) per class; NaN where the class never occurs."""
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / denom, np.nan)


def miou(cm: ConfusionMatrix) -> float:
    iou = per_class_iou(cm)
    return float(np.nanmean(iou)) if np.any(~np.isnan(iou)) else float("nan")


def format_iou_report(cm: ConfusionMatrix, class_names=None) -> str:
    iou = per_class_iou(cm)
    lines = ["class                    IoU"]
    for c, v in enumerate(iou, start=1):
        name = class_names[c - 1] if class_names else str(c)
        lines.append(f"{name:<20} {'   n/a' if np.isnan(v) else f'{v:.4f}'}")
    lines.append(f"{'mIoU':<20} {miou(cm):.4f}")
    return "\n".join(lines)


@dataclass
class PanopticResult:
    pq: np.ndarray
    sq: np.ndarray
    rq: np.ndarray

    @property
    def mean_pq(self) -> float:
        return float(np.nanmean(self.pq))

    @property
    def mean_sq(self) -> float:
        return float(np.nanmean(self.sq))

    @property
    def mean_rq(self) -> float:
        return float(np.nanmean(self.rq))


def _segments(sem, inst, thing_classes):
    segs = {}
    for key in np.unique(np.stack([sem, inst], axis=1), axis=0):
        s, i = int(key[0]), int(key[1])
        if s == IGNORE or (thing_classes is not None and s in thing_classes and i == 0):
            continue
        segs[(s, i)] = np.flatnonzero((sem == s) & (inst == i))
    return segs


def panoptic_quality(pred, gt, num_classes: int, thing_classes=None, match_iou: float = 0.5) -> PanopticResult:
    """Standard PQ with segments keyed by (semantic, instance).

    Thing points with instance 0 are treated as crowd and ignored when
    ``thing_classes`` is given. Points with IGNORE ground truth are removed
    from the predicted segments before matching.
    """
    p_sem, p_inst = (np.asarray(a, dtype=np.int64) for a in pred)
    g_sem, g_inst = (np.asarray(a, dtype=np.int64) for a in gt)
    things = None if thing_classes is None else set(thing_classes)
    valid = g_sem != IGNORE
    p_segs = _segments(np.where(valid, p_sem, IGNORE), p_inst, things)
    g_segs = _segments(g_sem, g_inst, things)
    tp = np.zeros(num_classes)
    fp = np.zeros(num_classes)
    fn = np.zeros(num_classes)
    iou_sum = np.zeros(num_classes)
    used = set()
    for gk, gpts in g_segs.items():
        cls = gk[0]
        hit = None
        for pk, ppts in p_segs.items():
            if pk[0] != cls or pk in used:
                continue
            inter = len(np.intersect1d(gpts, ppts, assume_unique=True))
            if inter == 0:
                continue
            iou = inter / (len(gpts) + len(ppts) - inter)
            if iou > match_iou:
                hit = (pk, iou)
                break
        if hit:
            used.add(hit[0])
            tp[cls - 1] += 1
            iou_sum[cls - 1] += hit[1]
        else:
            fn[cls - 1] += 1
    for pk in p_segs:
        if pk not in used:
            fp[pk[0] - 1] += 1
    denom = tp + 0.5 * fp + 0.5 * fn
    with np.errstate(invalid="ignore", divide="ignore"):
        rq = np.where(denom > 0, tp / denom, np.nan)
        sq = np.where(denom > 0, np.where(tp > 0, iou_sum / np.maximum(tp, 1), 0.0), np.nan)
        pq = np.where(denom > 0, iou_sum / denom, np.nan)
    return PanopticResult(pq, sq, rq)
