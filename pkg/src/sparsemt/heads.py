"""Task heads and detection decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter
from shapely.geometry import Polygon

from .dense2d import conv2d
from .gcp import BevGeometry, DenseBEV
from .pointcloud import IGNORE, PointCloud
from .sparse_core import SparseTensor
from .sparse_nn import linear

REG_CHANNELS = ("dx", "dy", "z", "log_w", "log_l", "log_h", "sin_yaw", "cos_yaw")


@dataclass
class Box:
    """Oriented box; ``l`` runs along the heading, ``w`` across it."""

    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    yaw: float
    label: int
    score: float = 1.0
    rect_score: float = 1.0

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def to_local(self, xyz: np.ndarray) -> np.ndarray:
        d = np.asarray(xyz, dtype=np.float64).reshape(-1, 3) - self.center
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)

    def contains(self, xyz: np.ndarray, margin: float = 0.0) -> np.ndarray:
        loc = self.to_local(xyz)
        half = np.array([self.l, self.w, self.h]) / 2 + margin
        return np.all(np.abs(loc) <= half, axis=1)

    def bev_corners(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.l / 2, self.w / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + [self.x, self.y]


@dataclass
class DetGrid:
    heatmap: np.ndarray  # (K_thing, H, W), post-sigmoid
    reg: np.ndarray      # (8, H, W), channels as REG_CHANNELS
    iou: np.ndarray      # (1, H, W), post-sigmoid


def box_iou_3d(a: Box, b: Box) -> float:
    """Volumetric IoU of two yaw-rotated boxes."""
    inter_bev = Polygon(a.bev_corners()).intersection(Polygon(b.bev_corners())).area
    lo = max(a.z - a.h / 2, b.z - b.h / 2)
    hi = min(a.z + a.h / 2, b.z + b.h / 2)
    inter = inter_bev * max(hi - lo, 0.0)
    union = a.w * a.l * a.h + b.w * b.l * b.h - inter
    return float(inter / union) if union > 0 else 0.0


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def seg_head(decoder_out: SparseTensor, ws) -> np.ndarray:
    """Per-voxel logits (M x K); no softmax."""
    return linear(decoder_out.features, ws["seg.weight"], ws["seg.bias"])


def bev_seg_head(bev: DenseBEV, ws, depth: int = 2) -> np.ndarray:
    x = bev.features
    for i in range(depth):
        x = np.maximum(conv2d(x, ws[f"bevseg.{i}.weight"], ws[f"bevseg.{i}.bias"]), 0.0)
    return conv2d(x, ws["bevseg.out.weight"], ws["bevseg.out.bias"])


def _branch(x: np.ndarray, ws, name: str) -> np.ndarray:
    h = np.maximum(conv2d(x, ws[f"det.{name}.0.weight"], ws[f"det.{name}.0.bias"]), 0.0)
    return conv2d(h, ws[f"det.{name}.1.weight"], ws[f"det.{name}.1.bias"])


def det_head(bev: DenseBEV, ws) -> DetGrid:
    x = bev.features
    return DetGrid(sigmoid(_branch(x, ws, "hm")), _branch(x, ws, "reg"), sigmoid(_branch(x, ws, "iou")))


def find_peaks(heatmap: np.ndarray) -> np.ndarray:
    """Boolean mask of cells equal to their 3x3 neighbourhood maximum (per class)."""
    pooled = maximum_filter(heatmap, size=(1, 3, 3), mode="constant", cval=-np.inf)
    return heatmap == pooled


def decode_boxes(g: DetGrid, geometry: BevGeometry, thing_classes=None, top_k: int = 100,
                 score_thresh: float = 0.1, beta: float = 0.5) -> list:
    """Peak-pick the heatmap and turn each surviving cell into a :class:`Box`.

    Rectified score is ``raw ** (1 - beta) * iou ** beta``. Output is sorted by
    rectified score, ties broken by (class, row, col).
    """
    k = g.heatmap.shape[0]
    thing_classes = tuple(range(1, k + 1)) if thing_classes is None else tuple(thing_classes)
    peaks = find_peaks(g.heatmap) & (g.heatmap > score_thresh)
    cls, rows, cols = np.nonzero(peaks)
    raw = g.heatmap[cls, rows, cols]
    order = np.lexsort((cols, rows, cls, -raw))[:top_k]
    x_lo, x_hi = geometry.x_range
    y_lo, y_hi = geometry.y_range
    boxes, keys = [], []
    for i in order:
        c, r, q = int(cls[i]), int(rows[i]), int(cols[i])
        reg = g.reg[:, r, q]
        x = min(max((q + reg[0]) * geometry.cell_x + geometry.origin_x, x_lo), x_hi)
        y = min(max((r + reg[1]) * geometry.cell_y + geometry.origin_y, y_lo), y_hi)
        score = float(raw[i])
        iou = float(np.clip(g.iou[0, r, q], 1e-7, 1.0))
        rect = score ** (1.0 - beta) * iou ** beta if beta else score
        box = Box(float(x), float(y), float(reg[2]), float(np.exp(reg[3])), float(np.exp(reg[4])),
                  float(np.exp(reg[5])), math.atan2(reg[6], reg[7]), thing_classes[c], score, rect)
        boxes.append(box)
        keys.append((-rect, c, r, q))
    return [boxes[i] for i in sorted(range(len(boxes)), key=lambda j: keys[j])]


def bev_cell_labels(pc: PointCloud, geometry: BevGeometry, num_classes: int) -> np.ndarray:
    """Majority current-frame label per BEV cell (H x W); IGNORE where empty."""
    if pc.labels is None:
        raise ValueError("point cloud has no labels")
    col = np.floor((pc.xyz[:, 0] - geometry.origin_x) / geometry.cell_x).astype(np.int64)
    row = np.floor((pc.xyz[:, 1] - geometry.origin_y) / geometry.cell_y).astype(np.int64)
    ok = (pc.current_mask & (pc.labels != IGNORE) & (col >= 0) & (col < geometry.width)
          & (row >= 0) & (row < geometry.height))
    k = num_classes + 1
    cells = geometry.height * geometry.width
    counts = np.bincount((row[ok] * geometry.width + col[ok]) * k + pc.labels[ok],
                         minlength=cells * k).reshape(cells, k)
    counts[:, IGNORE] = 0
    out = counts.argmax(axis=1)
    out[counts.max(axis=1) == 0] = IGNORE
    return out.reshape(geometry.height, geometry.width)


_CSV_HEADER = "class,score,rect_score,x,y,z,w,l,h,yaw"


def boxes_to_csv(boxes) -> str:
    lines = [_CSV_HEADER]
    for b in boxes:
        vals = (b.score, b.rect_score, b.x, b.y, b.z, b.w, b.l, b.h, b.yaw)
        lines.append(f"{b.label}," + ",".join(format(float(v), ".9g") for v in vals))
    return "\n".join(lines) + "\n"


def boxes_from_csv(text: str) -> list:
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line == _CSV_HEADER:
            continue
        v = line.split(",")
        s, rs, x, y, z, w, l, h, yaw = (float(t) for t in v[1:])
        out.append(Box(x, y, z, w, l, h, yaw, int(v[0]), s, rs))
    return out


def save_boxes(boxes, path) -> None:
    Path(path).write_text(boxes_to_csv(boxes))


def load_boxes(path) -> list:
    return boxes_from_csv(Path(path).read_text())
