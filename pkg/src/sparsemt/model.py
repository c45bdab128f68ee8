"""Network assembly: parameter layout, stage-1 forward pass and shape tracing."""

from __future__ import annotations

import time
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneState, decode, encode
from .config import PipelineConfig
from .gcp import BevGeometry, DenseBEV, gcp_forward
from .heads import DetGrid, bev_seg_head, det_head, seg_head
from .losses import softmax
from .pointcloud import PointCloud
from .sparse_core import SparseTensor, strided_output_shape
from .voxelizer import VfeParams, VoxelMap, compute_voxel_indices, devoxelize_features, devoxelize_labels, vfe_encode

NORM_LEAVES = ("scale", "shift", "mean", "var")


def scale_shapes(cfg: PipelineConfig) -> list:
    """Spatial shape (D, H, W) of each encoder stage."""
    shapes = [cfg.voxel.spatial_shape]
    for _ in range(len(cfg.backbone.encoder_widths) - 1):
        shapes.append(strided_output_shape(shapes[-1]))
    return shapes


def param_shapes(cfg: PipelineConfig) -> OrderedDict:
    """Every weight tensor the config implies, in a fixed order."""
    bb, gcp, hs = cfg.backbone, cfg.gcp, cfg.heads
    out = OrderedDict()

    def norm(prefix, c):
        if bb.use_norm:
            for leaf in NORM_LEAVES:
                out[f"{prefix}.{leaf}"] = (c,)

    def dense(prefix, cin, cout):
        out[f"{prefix}.weight"] = (cin, cout)
        out[f"{prefix}.bias"] = (cout,)

    def conv2(prefix, k, cin, cout):
        out[f"{prefix}.weight"] = (k * k, cin, cout)
        out[f"{prefix}.bias"] = (cout,)

    def block(prefix, c):
        out[f"{prefix}.conv1.weight"] = (27, c, c)
        norm(prefix + ".norm1", c)
        out[f"{prefix}.conv2.weight"] = (27, c, c)
        norm(prefix + ".norm2", c)

    prev = 3 + cfg.point_features
    for i, w in enumerate(bb.vfe_widths):
        dense(f"vfe.{i}", prev, w)
        prev = w
    for s, (w, depth) in enumerate(zip(bb.encoder_widths, bb.encoder_depths)):
        out[f"enc.{s}.conv.weight"] = (27, prev, w)
        norm(f"enc.{s}.norm", w)
        for j in range(depth):
            block(f"enc.{s}.block.{j}", w)
        prev = w

    deep = bb.encoder_widths[-1]
    n_z = scale_shapes(cfg)[-1][0]
    w1, w2 = gcp.widths
    conv2("gcp.stem", 1, deep * n_z, w1)
    for i in range(gcp.depths[0]):
        conv2(f"gcp.l1.{i}", 3, w1, w1)
    for i in range(gcp.depths[1]):
        conv2(f"gcp.l2.{i}", 3, w1 if i == 0 else w2, w2)
    conv2("gcp.out", 1, w1 + w2, deep * n_z)

    dw = bb.decoder_widths
    dense("dec.adapter", deep, dw[0])
    for s, w in enumerate(dw):
        skip = bb.encoder_widths[len(dw) - 1 - s]
        dense(f"dec.{s}.fuse", w + skip, w)
        block(f"dec.{s}.block", w)
        if s + 1 < len(dw):
            out[f"dec.{s}.up.weight"] = (27, w, dw[s + 1])
            norm(f"dec.{s}.up_norm", dw[s + 1])

    k = cfg.num_classes
    c_bev = gcp.out_channels
    dense("seg", dw[-1], k)
    prev = c_bev
    for i in range(hs.bev_seg_depth):
        conv2(f"bevseg.{i}", 3, prev, hs.bev_seg_hidden)
        prev = hs.bev_seg_hidden
    conv2("bevseg.out", 1, prev, k)
    for name, n_out in (("hm", len(cfg.thing_classes)), ("reg", 8), ("iou", 1)):
        conv2(f"det.{name}.0", 3, c_bev, hs.det_hidden)
        conv2(f"det.{name}.1", 1, hs.det_hidden, n_out)

    s2 = cfg.stage2
    if s2.enabled:
        pw, bw = s2.point_width, s2.box_width
        dense("s2.point.0", 6 + dw[-1], pw)
        dense("s2.point.1", pw, pw)
        out["s2.attn.weight"] = (pw,)
        dense("s2.box.0", 2 * pw + 5 * c_bev, bw)
        dense("s2.box.1", bw, bw)
        dense("s2.cls", bw, len(cfg.thing_classes) + 1)
        dense("s2.mask.0", pw + bw, pw)
        dense("s2.mask.1", pw, 1)
    return out


def vfe_params(ws, cfg: PipelineConfig) -> VfeParams:
    n = len(cfg.backbone.vfe_widths)
    return VfeParams([(ws[f"vfe.{i}.weight"], ws[f"vfe.{i}.bias"]) for i in range(n)])


@dataclass
class Stage1Output:
    voxel_map: VoxelMap
    voxels: SparseTensor
    state: BackboneState
    decoder_out: SparseTensor
    seg_logits: np.ndarray
    bev: DenseBEV
    bev_seg_logits: np.ndarray
    det: DetGrid
    geometry: BevGeometry
    timings: dict = field(default_factory=dict)


@contextmanager
def _timed(timings: dict, name: str):
    t0 = time.perf_counter()
    yield
    timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


def forward_stage1(pc: PointCloud, cfg: PipelineConfig, ws) -> Stage1Output:
    timings: dict = {}
    geometry = BevGeometry.from_voxel_config(cfg.voxel, cfg.backbone.downsampling)
    with _timed(timings, "voxelize"):
        vm = compute_voxel_indices(pc, cfg.voxel)
    with _timed(timings, "vfe"):
        feats = vfe_encode(pc, vm, vfe_params(ws, cfg))
        voxels = SparseTensor(vm.zyx, feats, cfg.voxel.spatial_shape, 1)
    with _timed(timings, "encoder"):
        state = encode(voxels, cfg.backbone, ws)
    with _timed(timings, "gcp"):
        back, bev = gcp_forward(state.outputs[-1], cfg.gcp, ws, geometry)
    with _timed(timings, "decoder"):
        dec = decode(back, state, cfg.backbone, ws)
    with _timed(timings, "heads"):
        seg = seg_head(dec, ws)
        bev_seg = bev_seg_head(bev, ws, cfg.heads.bev_seg_depth)
        det = det_head(bev, ws)
    return Stage1Output(vm, voxels, state, dec, seg, bev, bev_seg, det, geometry, timings)


def point_probabilities(out: Stage1Output) -> np.ndarray:
    """Per-point class probabilities (N x K) from the voxel logits.

    Dropped points get a one-hot row on the de-voxelization fallback label.
    """
    vm = out.voxel_map
    k = out.seg_logits.shape[1]
    n = len(vm.point_to_voxel)
    if vm.is_empty:
        return np.full((n, k), 1.0 / k)
    probs = devoxelize_features(vm, softmax(out.seg_logits))
    dropped = np.flatnonzero(vm.dropped)
    if len(dropped):
        labels = devoxelize_labels(vm, out.seg_logits.argmax(axis=1) + 1)
        probs[dropped] = 0.0
        probs[dropped, labels[dropped] - 1] = 1.0
    return probs


def trace_shapes(cfg: PipelineConfig) -> dict:
    """Tensor shapes of the forward pass derived from the config alone."""
    shapes = scale_shapes(cfg)
    bb, gcp = cfg.backbone, cfg.gcp
    d8, h8, w8 = shapes[-1]
    return {
        "base_shape": shapes[0],
        "stage_shapes": shapes,
        "stage_channels": tuple(bb.encoder_widths),
        "bev_in": (bb.encoder_widths[-1] * d8, h8, w8),
        "gcp_out": (gcp.out_channels, h8, w8),
        "decoder_channels": tuple(bb.decoder_widths),
        "seg_logits_width": cfg.num_classes,
        "bev_seg": (cfg.num_classes, h8, w8),
        "heatmap": (len(cfg.thing_classes), h8, w8),
        "reg": (8, h8, w8),
    }


def observed_shapes(out: Stage1Output) -> dict:
    """The same keys as :func:`trace_shapes`, measured on an actual forward pass."""
    outs = out.state.outputs
    d8, h8, w8 = outs[-1].spatial_shape
    return {
        "base_shape": out.voxels.spatial_shape,
        "stage_shapes": [t.spatial_shape for t in outs],
        "stage_channels": tuple(t.channels for t in outs),
        "bev_in": (outs[-1].channels * d8, h8, w8),
        "gcp_out": out.bev.features.shape,
        "decoder_channels": None,
        "seg_logits_width": out.seg_logits.shape[1],
        "bev_seg": out.bev_seg_logits.shape,
        "heatmap": out.det.heatmap.shape,
        "reg": out.det.reg.shape,
    }
