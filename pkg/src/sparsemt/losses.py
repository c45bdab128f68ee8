"""Training objectives, evaluated with analytic gradients w.r.t. the predictions.

Segmentation targets are 0-based class indices with ``ignore_index`` (-1)
marking unlabeled rows; use :func:`labels_to_targets` to convert 1-based
label ids where 0 means undefined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gcp import BevGeometry
from .heads import REG_CHANNELS, Box, DetGrid, box_iou_3d

EPS = 1e-7
DET_WEIGHTS = {"hm": 1.0, "reg": 2.0, "iou": 1.0}


def labels_to_targets(labels: np.ndarray) -> np.ndarray:
    """1-based label ids (0 = undefined) -> 0-based targets (-1 = ignore)."""
    return np.asarray(labels, dtype=np.int64) - 1


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: np.ndarray, targets: np.ndarray, ignore_index: int = -1):
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    valid = targets != ignore_index
    grad = np.zeros_like(logits)
    n = int(valid.sum())
    if n == 0:
        return 0.0, grad
    rows = np.flatnonzero(valid)
    lsm = log_softmax(logits[rows])
    value = -lsm[np.arange(n), targets[rows]].sum() / n
    g = np.exp(lsm)
    g[np.arange(n), targets[rows]] -= 1.0
    grad[rows] = g / n
    return float(value), grad


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Discrete gradient of the Jaccard loss along a sorted 0/1 vector."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_per_class(probs: np.ndarray, targets: np.ndarray, ignore_index: int = -1):
    """Per-class Lovasz values and gradients for classes present in ``targets``.

    Returns ``{class_index: (value, grad)}`` with grads shaped like ``probs``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets)
    rows = np.flatnonzero(targets != ignore_index)
    p = probs[rows]
    t = targets[rows]
    out = {}
    for c in np.unique(t):
        fg = (t == c).astype(np.float64)
        errors = np.abs(fg - p[:, c])
        order = np.argsort(-errors, kind="stable")
        g = lovasz_grad(fg[order])
        value = float(errors[order] @ g)
        grad = np.zeros_like(probs)
        per_row = np.empty(len(rows))
        per_row[order] = g
        grad[rows, c] = per_row * np.where(fg > 0, -1.0, 1.0)
        out[int(c)] = (value, grad)
    return out


def lovasz_softmax(probs: np.ndarray, targets: np.ndarray, ignore_index: int = -1):
    """Lovasz extension of the Jaccard loss, averaged over present classes."""
    per = lovasz_per_class(probs, targets, ignore_index)
    grad = np.zeros_like(np.asarray(probs, dtype=np.float64))
    if not per:
        return 0.0, grad
    value = 0.0
    for v, g in per.values():
        value += v
        grad += g
    return value / len(per), grad / len(per)


def seg_loss(logits: np.ndarray, targets: np.ndarray, ignore_index: int = -1, with_grad: bool = False):
    """Cross-entropy plus Lovasz-Softmax on rows of logits.

    Returns ``(value, parts)``, or ``(value, parts, grad)`` when ``with_grad``.
    """
    ce, g_ce = cross_entropy(logits, targets, ignore_index)
    probs = softmax(np.asarray(logits, dtype=np.float64))
    lov, g_p = lovasz_softmax(probs, targets, ignore_index)
    parts = {"ce": ce, "lovasz": lov}
    value = ce + lov
    if not with_grad:
        return value, parts
    # chain through softmax: dL/dz = p * (g - <g, p>)
    g_lov = probs * (g_p - (g_p * probs).sum(axis=1, keepdims=True))
    return value, parts, g_ce + g_lov


def bev_loss(logits: np.ndarray, targets: np.ndarray, ignore_index: int = -1, with_grad: bool = False):
    """Dense variant of :func:`seg_loss` on (K, H, W) logits and (H, W) targets."""
    k = logits.shape[0]
    rows = np.moveaxis(logits, 0, -1).reshape(-1, k)
    res = seg_loss(rows, np.asarray(targets).reshape(-1), ignore_index, with_grad)
    if not with_grad:
        return res
    value, parts, grad = res
    return value, parts, np.moveaxis(grad.reshape(logits.shape[1:] + (k,)), -1, 0)


def focal_heatmap(pred: np.ndarray, gt: np.ndarray, alpha: float = 2.0, beta: float = 4.0):
    """Penalty-reduced focal loss on a post-sigmoid heatmap, normalized by #positives."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    p = np.clip(pred, EPS, 1 - EPS)
    inside = (pred > EPS) & (pred < 1 - EPS)
    pos = gt == 1.0
    neg = ~pos
    n_pos = max(int(pos.sum()), 1)
    w_neg = (1 - gt) ** beta
    pos_term = (1 - p) ** alpha * np.log(p)
    neg_term = w_neg * p ** alpha * np.log(1 - p)
    value = -(pos_term[pos].sum() + neg_term[neg].sum()) / n_pos
    d_pos = -alpha * (1 - p) ** (alpha - 1) * np.log(p) + (1 - p) ** alpha / p
    d_neg = w_neg * (alpha * p ** (alpha - 1) * np.log(1 - p) - p ** alpha / (1 - p))
    grad = -np.where(pos, d_pos, d_neg) / n_pos * inside
    return float(value), grad


def focal_classic(pred: np.ndarray, target: np.ndarray, alpha: float = 0.25, gamma: float = 2.0):
    """Per-pixel focal loss on binary targets, normalized by #positives."""
    pred = np.asarray(pred, dtype=np.float64)
    y = (np.asarray(target) >= 1.0).astype(np.float64)
    p = np.clip(pred, EPS, 1 - EPS)
    inside = (pred > EPS) & (pred < 1 - EPS)
    n_pos = max(int(y.sum()), 1)
    a = np.where(y > 0, alpha, 1 - alpha)
    pt = np.where(y > 0, p, 1 - p)
    value = -(a * (1 - pt) ** gamma * np.log(pt)).sum() / n_pos
    d_pt = -a * (-gamma * (1 - pt) ** (gamma - 1) * np.log(pt) + (1 - pt) ** gamma / pt)
    grad = d_pt * np.where(y > 0, 1.0, -1.0) / n_pos * inside
    return float(value), grad


def focal_loss(pred, gt, variant: str = "penalty_reduced"):
    if variant == "penalty_reduced":
        return focal_heatmap(pred, gt)
    if variant == "classic":
        return focal_classic(pred, gt)
    raise ValueError(f"unknown focal variant {variant!r}")


def l1_reg(pred: np.ndarray, target: np.ndarray, mask: np.ndarray):
    """Mean absolute error over valid cells x channels of (C, H, W) grids."""
    pred = np.asarray(pred, dtype=np.float64)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    n = int(m.sum())
    grad = np.zeros_like(pred)
    if n == 0:
        return 0.0, grad
    diff = pred - target
    grad[m] = np.sign(diff[m]) / n
    return float(np.abs(diff[m]).sum() / n), grad


@dataclass
class DetTargets:
    heatmap: np.ndarray
    reg: np.ndarray
    reg_mask: np.ndarray
    iou: np.ndarray
    box_index: np.ndarray
    boxes: list = field(default_factory=list)


def det_loss(pred: DetGrid, t: DetTargets, weights: dict | None = None, focal_variant: str = "penalty_reduced"):
    """Weighted heatmap + regression + IoU loss. Returns ``(value, parts)``."""
    weights = DET_WEIGHTS if weights is None else weights
    hm, _ = focal_loss(pred.heatmap, t.heatmap, focal_variant)
    reg, _ = l1_reg(pred.reg, t.reg, t.reg_mask)
    iou, _ = l1_reg(pred.iou, t.iou, t.reg_mask)
    parts = {"hm": hm, "reg": reg, "iou": iou}
    return combine_det_parts(parts, weights), parts


def combine_det_parts(parts: dict, weights: dict | None = None) -> float:
    weights = DET_WEIGHTS if weights is None else weights
    return sum(weights[k] * parts[k] for k in ("hm", "reg", "iou"))


def multitask_total(losses, sigma2):
    """Uncertainty-weighted sum: sum_i L_i / (2 s_i) + log(s_i) / 2 with s_i = sigma_i^2.

    ``losses`` and ``sigma2`` are sequences or dicts with matching keys.
    Returns ``(value, grad)`` with grad w.r.t. each sigma^2.
    """
    if isinstance(losses, dict):
        keys = list(losses)
        L = np.array([losses[k] for k in keys], dtype=np.float64)
        s = np.array([sigma2[k] for k in keys], dtype=np.float64)
    else:
        keys = None
        L = np.asarray(losses, dtype=np.float64)
        s = np.asarray(sigma2, dtype=np.float64)
    if L.shape != s.shape:
        raise ValueError("losses and sigma2 differ in length")
    if np.any(s <= 0):
        raise ValueError("sigma^2 must be positive")
    value = float(np.sum(L / (2 * s) + 0.5 * np.log(s)))
    grad = -L / (2 * s * s) + 1 / (2 * s)
    if keys is not None:
        return value, dict(zip(keys, grad.tolist()))
    return value, grad


def gaussian_radius(length: float, width: float, min_overlap: float = 0.7) -> float:
    """Largest center displacement keeping IoU >= min_overlap (CornerNet bound)."""
    h, w, o = length, width, min_overlap
    b1 = h + w
    c1 = w * h * (1 - o) / (1 + o)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * c1)) / 2
    b2 = 2 * (h + w)
    c2 = (1 - o) * w * h
    r2 = (b2 + math.sqrt(b2 ** 2 - 16 * c2)) / 2
    a3 = 4 * o
    b3 = -2 * o * (h + w)
    c3 = (o - 1) * w * h
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def draw_gaussian(heatmap: np.ndarray, row: int, col: int, radius: int) -> None:
    sigma = (2 * radius + 1) / 6.0
    h, w = heatmap.shape
    ys = np.arange(max(row - radius, 0), min(row + radius + 1, h))
    xs = np.arange(max(col - radius, 0), min(col + radius + 1, w))
    g = np.exp(-((ys[:, None] - row) ** 2 + (xs[None, :] - col) ** 2) / (2 * sigma * sigma))
    region = heatmap[np.ix_(ys, xs)]
    heatmap[np.ix_(ys, xs)] = np.maximum(region, g)


def gaussian_splat_targets(boxes, geometry: BevGeometry, thing_classes, min_overlap: float = 0.7,
                           min_radius: int = 2) -> DetTargets:
    thing_classes = tuple(thing_classes)
    k = len(thing_classes)
    hh, ww = geometry.height, geometry.width
    hm = np.zeros((k, hh, ww))
    reg = np.zeros((len(REG_CHANNELS), hh, ww))
    mask = np.zeros((hh, ww), dtype=bool)
    iou = np.zeros((1, hh, ww))
    index = np.full((hh, ww), -1, dtype=np.int64)
    for b_idx, b in enumerate(boxes):
        if b.label not in thing_classes:
            continue
        cx = (b.x - geometry.origin_x) / geometry.cell_x
        cy = (b.y - geometry.origin_y) / geometry.cell_y
        col, row = int(math.floor(cx)), int(math.floor(cy))
        if not (0 <= col < ww and 0 <= row < hh):
            continue
        r = max(min_radius, int(gaussian_radius(b.l / geometry.cell_x, b.w / geometry.cell_y, min_overlap)))
        draw_gaussian(hm[thing_classes.index(b.label)], row, col, r)
        reg[:, row, col] = (cx - col, cy - row, b.z, math.log(b.w), math.log(b.l), math.log(b.h),
                            math.sin(b.yaw), math.cos(b.yaw))
        mask[row, col] = True
        iou[0, row, col] = 1.0
        index[row, col] = b_idx
    return DetTargets(hm, reg, mask, iou, index, list(boxes))


def decode_cell_box(pred: DetGrid, geometry: BevGeometry, row: int, col: int) -> Box:
    r = pred.reg[:, row, col]
    return Box((col + r[0]) * geometry.cell_x + geometry.origin_x,
               (row + r[1]) * geometry.cell_y + geometry.origin_y, r[2],
               math.exp(r[3]), math.exp(r[4]), math.exp(r[5]), math.atan2(r[6], r[7]), 0)


def update_iou_targets(pred: DetGrid, t: DetTargets, geometry: BevGeometry) -> DetTargets:
    """Set each positive cell's IoU target to IoU(predicted box there, its GT box)."""
    iou = t.iou.copy()
    for row, col in zip(*np.nonzero(t.reg_mask)):
        gt = t.boxes[t.box_index[row, col]]
        iou[0, row, col] = box_iou_3d(decode_cell_box(pred, geometry, row, col), gt)
    return DetTargets(t.heatmap, t.reg, t.reg_mask, iou, t.box_index, t.boxes)


def binary_cross_entropy(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None):
    """Mean BCE on probabilities, gradient w.r.t. the probabilities."""
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    m = np.ones(pred.shape, bool) if mask is None else np.asarray(mask, bool)
    n = int(m.sum())
    grad = np.zeros_like(pred)
    if n == 0:
        return 0.0, grad
    p = np.clip(pred, EPS, 1 - EPS)
    inside = (pred > EPS) & (pred < 1 - EPS)
    term = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    grad[m] = ((p - y) / (p * (1 - p)) / n * inside)[m]
    return float(term[m].sum() / n), grad


def prob_cross_entropy(probs: np.ndarray, targets: np.ndarray):
    """Mean -log p[target] over rows of probabilities; gradient w.r.t. the probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    n = len(targets)
    grad = np.zeros_like(probs)
    if n == 0:
        return 0.0, grad
    rows = np.arange(n)
    p = np.clip(probs[rows, targets], EPS, 1.0)
    grad[rows, targets] = -1.0 / p / n * (probs[rows, targets] > EPS)
    return float(-np.log(p).sum() / n), grad
