"""End-to-end inference and the output file writers."""

from __future__ import annotations

import io
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .heads import decode_boxes
from .model import Stage1Output, forward_stage1, point_probabilities
from .pointcloud import IGNORE, PointCloud, TtaConfig, aggregate_tta_probs, make_tta_set
from .stage2 import (UNASSIGNED, Stage2Scores, assign_points_to_boxes, build_panoptic,
                     build_stage2_features, fuse_scores, stage2_forward)
from .voxelizer import devoxelize_features


@dataclass
class InferenceResult:
    probs: np.ndarray            # (N, K) stage-1 point probabilities, TTA-averaged
    stage1_labels: np.ndarray
    labels: np.ndarray           # final labels (stage-2 fused when enabled)
    boxes: list
    box_index: np.ndarray
    scores: Stage2Scores | None
    panoptic: tuple | None       # (semantic, instance) per point
    stage1: Stage1Output
    timings: dict = field(default_factory=dict)


def _unrefined_scores(n_points: int, n_boxes: int, n_thing: int) -> Stage2Scores:
    s_box = np.zeros((n_boxes, n_thing + 1))
    s_box[:, n_thing] = 1.0
    return Stage2Scores(np.zeros(n_points), s_box)


def infer(pc: PointCloud, cfg: PipelineConfig, ws, tta: bool = False, stage2: bool = False,
          panoptic: bool = False, tta_config: TtaConfig | None = None) -> InferenceResult:
    """Run the full pipeline on one (possibly multi-frame) cloud.

    Detection and the second stage always use the untransformed pass; TTA
    only averages the point-wise class probabilities.
    """
    t0 = time.perf_counter()
    variants = make_tta_set(pc, tta_config or cfg.tta) if tta else [(None, pc)]
    per_variant, base = [], None
    for _, cloud in variants:
        out = forward_stage1(cloud, cfg, ws)
        base = out if base is None else base
        per_variant.append(point_probabilities(out))
    probs = aggregate_tta_probs(per_variant) if tta else per_variant[0]
    timings = dict(base.timings)
    timings["tta_variants"] = len(variants)

    things = tuple(cfg.thing_classes)
    s1_labels = (probs.argmax(axis=1) + 1).astype(np.int64) if len(pc) else np.zeros(0, dtype=np.int64)
    t1 = time.perf_counter()
    # with no voxels the BEV is all zeros and the heatmap is just the head biases; report nothing
    boxes = [] if base.voxel_map.is_empty else decode_boxes(
        base.det, base.geometry, things, cfg.heads.top_k, cfg.heads.score_thresh, cfg.heads.rectify_beta)
    timings["decode"] = time.perf_counter() - t1

    labels = s1_labels
    scores = None
    idx = np.full(len(pc), UNASSIGNED, dtype=np.int64)
    if stage2 or panoptic:
        idx = assign_points_to_boxes(pc.xyz, boxes, s1_labels, things, cfg.stage2.margin)
    if stage2:
        t1 = time.perf_counter()
        vox = (devoxelize_features(base.voxel_map, base.decoder_out.features) if len(pc)
               else np.zeros((0, base.decoder_out.channels)))
        feats = build_stage2_features(pc.xyz, boxes, idx, vox, base.bev, base.geometry)
        scores = stage2_forward(feats, idx, ws, len(things))
        labels = fuse_scores(probs, scores, idx, things, cfg.stage2.tau_mask, cfg.stage2.tau_box)
        timings["stage2"] = time.perf_counter() - t1
    pan = None
    if panoptic:
        sc = scores if scores is not None else _unrefined_scores(len(pc), len(boxes), len(things))
        pan = build_panoptic(labels, idx, sc, boxes, things, cfg.stage2.tau_box)
    timings["total"] = time.perf_counter() - t0
    return InferenceResult(probs, s1_labels, labels, boxes, idx, scores, pan, base, timings)


# 22 class colours plus grey (index 0) for undefined points.
PALETTE = np.array([
    [128, 128, 128],
    [245, 150, 100], [180, 30, 80], [250, 80, 100], [255, 0, 0], [90, 30, 150],
    [255, 40, 200], [30, 30, 255], [255, 240, 150], [255, 200, 0], [150, 240, 255],
    [255, 120, 50], [100, 230, 245], [30, 60, 150], [0, 200, 255], [0, 175, 0],
    [135, 60, 0], [80, 240, 150], [255, 0, 255], [170, 255, 150], [75, 0, 75],
    [150, 150, 255], [75, 0, 175],
], dtype=np.uint8)


def write_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ValueError("labels do not fit in u8")
    Path(path).write_bytes(labels.astype(np.uint8).tobytes())


def read_labels(path) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype=np.uint8).astype(np.int64)


def write_panoptic(path, semantic: np.ndarray, instance: np.ndarray) -> None:
    """``.bin`` gets little-endian u16 pairs; anything else one "sem inst" line per point."""
    pairs = np.stack([semantic, instance], axis=1).astype(np.int64)
    if pairs.size and (pairs.min() < 0 or pairs.max() > 0xFFFF):
        raise ValueError("panoptic ids do not fit in u16")
    path = Path(path)
    if path.suffix == ".bin":
        path.write_bytes(pairs.astype("<u2").tobytes())
    else:
        path.write_text("".join(f"{s} {i}\n" for s, i in pairs))


def read_panoptic(path):
    path = Path(path)
    if path.suffix == ".bin":
        pairs = np.frombuffer(path.read_bytes(), dtype="<u2").astype(np.int64).reshape(-1, 2)
    else:
        text = path.read_text().split()
        pairs = np.array(text, dtype=np.int64).reshape(-1, 2)
    return pairs[:, 0], pairs[:, 1]


def write_ply(path, xyz: np.ndarray, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.int64)
    idx = np.where((labels >= 0) & (labels < len(PALETTE)), labels, IGNORE)
    rgb = PALETTE[idx]
    header = ("ply\nformat ascii 1.0\n"
              f"element vertex {len(xyz)}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n")
    body = "".join(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}\n" for p, c in zip(xyz, rgb))
    Path(path).write_text(header + body)


def save_logits(path, res: InferenceResult) -> None:
    """Dump the raw head outputs so ``eval`` can recompute every loss."""
    s1 = res.stage1
    vm = s1.voxel_map
    g = s1.geometry
    arrays = dict(
        seg_logits=s1.seg_logits,
        bev_seg_logits=s1.bev_seg_logits,
        heatmap=s1.det.heatmap,
        reg=s1.det.reg,
        iou=s1.det.iou,
        unique_coords=vm.unique_coords,
        point_to_voxel=vm.point_to_voxel,
        points_per_voxel=vm.points_per_voxel,
        point_coords=vm.point_coords,
        grid_size=np.array(vm.grid_size),
        geometry=np.array([g.cell_x, g.cell_y, g.origin_x, g.origin_y, g.height, g.width]),
    )
    # np.savez stamps the wall clock into the archive; a fixed date keeps reruns byte-identical.
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_logits(path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        return {k: data[k] for k in data.files}
