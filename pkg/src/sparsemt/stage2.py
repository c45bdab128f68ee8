"""Second-stage refinement: point-box assignment, box-level scoring, score fusion, panoptic ids."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dense2d import bilinear_sample
from .gcp import BevGeometry, DenseBEV
from .heads import Box, box_iou_3d, sigmoid
from .losses import EPS, binary_cross_entropy, prob_cross_entropy, softmax

UNASSIGNED = -1


@dataclass
class Stage2Features:
    points: np.ndarray  # (N, 6 + C_voxel): local xyz, normalized xyz, voxel features
    boxes: np.ndarray   # (B, 5 * C_bev)


@dataclass
class Stage2Scores:
    s_point: np.ndarray  # (N,)
    s_box: np.ndarray    # (B, cls + 1); last column is the unrefined class


def assign_points_to_boxes(xyz: np.ndarray, boxes, stage1_labels: np.ndarray, thing_classes,
                           margin: float = 0.1) -> np.ndarray:
    """Index of the box each point falls in, or UNASSIGNED.

    Points predicted as stuff are never assigned. A point inside several
    boxes goes to the one with the highest rectified score.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    idx = np.full(len(xyz), UNASSIGNED, dtype=np.int64)
    best = np.full(len(xyz), -np.inf)
    is_thing = np.isin(stage1_labels, list(thing_classes))
    for b, box in enumerate(boxes):
        inside = box.contains(xyz, margin) & is_thing & (box.rect_score > best)
        idx[inside] = b
        best[inside] = box.rect_score
    return idx


def local_transform(xyz: np.ndarray, box: Box) -> np.ndarray:
    """Box-frame coordinates plus the same coordinates divided by the half-sizes."""
    loc = box.to_local(xyz)
    half = np.array([box.l, box.w, box.h]) / 2
    return np.concatenate([loc, loc / half], axis=1)


def extract_box_bev_features(bev: DenseBEV, box: Box, geometry: BevGeometry | None = None) -> np.ndarray:
    """Bilinear samples at the box center and its four side midpoints, concatenated."""
    geometry = bev.geometry if geometry is None else geometry
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = box.l / 2, box.w / 2
    pts = [(box.x, box.y),
           (box.x + hl * c, box.y + hl * s), (box.x - hl * c, box.y - hl * s),
           (box.x - hw * s, box.y + hw * c), (box.x + hw * s, box.y - hw * c)]
    out = []
    for x, y in pts:
        u = (x - geometry.origin_x) / geometry.cell_x
        v = (y - geometry.origin_y) / geometry.cell_y
        out.append(bilinear_sample(bev.features, u, v))
    return np.concatenate(out)


def build_stage2_features(xyz: np.ndarray, boxes, idx: np.ndarray, point_voxel_features: np.ndarray,
                          bev: DenseBEV, geometry: BevGeometry | None = None) -> Stage2Features:
    local = np.zeros((len(idx), 6))
    for b, box in enumerate(boxes):
        m = idx == b
        if m.any():
            local[m] = local_transform(xyz[m], box)
    pts = np.concatenate([local, point_voxel_features], axis=1)
    width = 5 * bev.channels
    bx = np.stack([extract_box_bev_features(bev, b, geometry) for b in boxes]) if boxes else np.zeros((0, width))
    return Stage2Features(pts, bx)


def _mlp(x, ws, prefix, n, final_relu=True):
    for i in range(n):
        x = x @ ws[f"{prefix}.{i}.weight"] + ws[f"{prefix}.{i}.bias"]
        if final_relu or i + 1 < n:
            x = np.maximum(x, 0.0)
    return x


def stage2_forward(feats: Stage2Features, idx: np.ndarray, ws, num_thing: int) -> Stage2Scores:
    n = len(idx)
    n_boxes = len(feats.boxes)
    s_point = np.zeros(n)
    s_box = np.zeros((n_boxes, num_thing + 1))
    assigned = np.flatnonzero(idx != UNASSIGNED)
    h_all = np.zeros((n, ws["s2.point.1.weight"].shape[1]))
    if len(assigned):
        h_all[assigned] = _mlp(feats.points[assigned], ws, "s2.point", 2)
    for b in range(n_boxes):
        members = np.flatnonzero(idx == b)
        if len(members) == 0:
            s_box[b, num_thing] = 1.0
            continue
        h = h_all[members]
        att = softmax(h @ ws["s2.attn.weight"])
        pooled = np.concatenate([h.max(axis=0), att @ h, feats.boxes[b]])
        emb = _mlp(pooled[None, :], ws, "s2.box", 2)
        s_box[b] = softmax(emb @ ws["s2.cls.weight"] + ws["s2.cls.bias"])[0]
        per_point = np.concatenate([h, np.repeat(emb, len(members), axis=0)], axis=1)
        # keep mask scores strictly inside (0, 1) even when the logit saturates
        logit = _mlp(per_point, ws, "s2.mask", 2, final_relu=False)[:, 0]
        s_point[members] = np.clip(sigmoid(logit), EPS, 1 - EPS)
    return Stage2Scores(s_point, s_box)


def refined_box_classes(s2: Stage2Scores, thing_classes, tau_box: float = 0.5) -> np.ndarray:
    """Class id each box refines its points to, or 0 where the box stays unrefined."""
    thing_classes = tuple(thing_classes)
    out = np.zeros(len(s2.s_box), dtype=np.int64)
    for b, row in enumerate(s2.s_box):
        c = int(np.argmax(row))
        if c < len(thing_classes) and row[c] >= tau_box:
            out[b] = thing_classes[c]
    return out


def fuse_scores(stage1_probs: np.ndarray, s2: Stage2Scores, idx: np.ndarray, thing_classes,
                tau_mask: float = 0.5, tau_box: float = 0.5) -> np.ndarray:
    """Final 1-based labels: box class where box and mask are confident, else stage-1 argmax."""
    labels = np.argmax(stage1_probs, axis=1).astype(np.int64) + 1
    box_cls = refined_box_classes(s2, thing_classes, tau_box)
    for b, cls in enumerate(box_cls):
        if cls == 0:
            continue
        m = (idx == b) & (s2.s_point >= tau_mask)
        labels[m] = cls
    return labels


def build_panoptic(labels: np.ndarray, idx: np.ndarray, s2: Stage2Scores, boxes, thing_classes,
                   tau_box: float = 0.5):
    """Per-point (semantic, instance); instance b+1 for thing points matching box b's class."""
    labels = np.asarray(labels, dtype=np.int64)
    inst = np.zeros(len(labels), dtype=np.int64)
    refined = refined_box_classes(s2, thing_classes, tau_box)
    for b, box in enumerate(boxes):
        cls = refined[b] if refined[b] else box.label
        m = (idx == b) & (labels == cls)
        inst[m] = b + 1
    return labels.copy(), inst


def stage2_targets(xyz: np.ndarray, idx: np.ndarray, boxes, gt_boxes, thing_classes,
                   iou_thresh: float = 0.5):
    """Box class targets (cls index or the unrefined index) and per-point membership targets."""
    thing_classes = tuple(thing_classes)
    unrefined = len(thing_classes)
    box_t = np.full(len(boxes), unrefined, dtype=np.int64)
    matched = [None] * len(boxes)
    for b, box in enumerate(boxes):
        best, best_iou = None, 0.0
        for g in gt_boxes:
            iou = box_iou_3d(box, g)
            if iou > best_iou:
                best, best_iou = g, iou
        if best is not None and best_iou >= iou_thresh and best.label in thing_classes:
            box_t[b] = thing_classes.index(best.label)
            matched[b] = best
    point_t = np.zeros(len(idx))
    for b in range(len(boxes)):
        m = np.flatnonzero(idx == b)
        if matched[b] is not None and len(m):
            point_t[m] = matched[b].contains(xyz[m]).astype(float)
    return box_t, point_t


def stage2_losses(s2: Stage2Scores, idx: np.ndarray, box_targets: np.ndarray, point_targets: np.ndarray):
    """Cross-entropy on box scores plus BCE on assigned points' mask scores.

    Returns ``(value, parts, grads)``; grads are w.r.t. ``s_box`` and ``s_point``.
    """
    ce, g_box = prob_cross_entropy(s2.s_box, box_targets)
    bce, g_point = binary_cross_entropy(s2.s_point, point_targets, idx != UNASSIGNED)
    return ce + bce, {"box_ce": ce, "mask_bce": bce}, {"s_box": g_box, "s_point": g_point}
