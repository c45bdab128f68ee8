"""Global context pooling: sparse -> dense BEV, two-level 2D CNN, dense -> sparse."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import GcpSpec
from .dense2d import avg_pool2x, conv2d, upsample_bilinear2x
from .sparse_core import SparseTensor


@dataclass(frozen=True)
class BevGeometry:
    """Maps BEV cell indices to metres: x = col * cell_x + origin_x."""

    cell_x: float
    cell_y: float
    origin_x: float
    origin_y: float
    height: int
    width: int

    @classmethod
    def from_voxel_config(cls, vcfg, stride: int = 8) -> "BevGeometry":
        from .sparse_core import strided_output_shape

        shape = vcfg.spatial_shape
        for _ in range(int(np.log2(stride))):
            shape = strided_output_shape(shape)
        return cls(vcfg.voxel_size[0] * stride, vcfg.voxel_size[1] * stride,
                   vcfg.range_min[0], vcfg.range_min[1], shape[1], shape[2])

    def scaled(self, factor: float) -> "BevGeometry":
        return BevGeometry(self.cell_x * factor, self.cell_y * factor,
                           self.origin_x, self.origin_y, self.height, self.width)

    @property
    def x_range(self) -> tuple:
        return self.origin_x, self.origin_x + self.width * self.cell_x

    @property
    def y_range(self) -> tuple:
        return self.origin_y, self.origin_y + self.height * self.cell_y


@dataclass
class DenseBEV:
    features: np.ndarray  # (C, H, W)
    z_slices: int = 1
    geometry: BevGeometry | None = None

    @property
    def channels(self) -> int:
        return self.features.shape[0]

    @property
    def shape(self) -> tuple:
        return self.features.shape


def bev_channels(channels: int, depth: int) -> int:
    return channels * depth


def sparse_to_bev(t: SparseTensor, geometry: BevGeometry | None = None) -> DenseBEV:
    """Scatter into a dense volume and stack z-slices into channels.

    Channel ``z * C + c`` of cell (y, x) holds feature c of voxel (z, y, x).
    """
    d, h, w = t.spatial_shape
    c = t.channels
    vol = np.zeros((d, c, h, w))
    z, y, x = t.coords.T
    vol[z, :, y, x] = t.features
    return DenseBEV(vol.reshape(d * c, h, w), d, geometry)


def _stack(x: np.ndarray, ws, prefix: str, depth: int) -> np.ndarray:
    for i in range(depth):
        x = np.maximum(conv2d(x, ws[f"{prefix}.{i}.weight"], ws[f"{prefix}.{i}.bias"]), 0.0)
    return x


def bev_cnn(m: DenseBEV, spec: GcpSpec, ws) -> DenseBEV:
    """1x1 stem, full-resolution stack, half-resolution stack, concat -> sum(widths) channels."""
    x = np.maximum(conv2d(m.features, ws["gcp.stem.weight"], ws["gcp.stem.bias"]), 0.0)
    level1 = _stack(x, ws, "gcp.l1", spec.depths[0])
    level2 = _stack(avg_pool2x(level1), ws, "gcp.l2", spec.depths[1])
    level2 = upsample_bilinear2x(level2, level1.shape[1:])
    return DenseBEV(np.concatenate([level1, level2], axis=0), m.z_slices, m.geometry)


def bev_to_sparse(m: DenseBEV, coords: np.ndarray, spatial_shape, stride: int, out_channels: int,
                  weight: np.ndarray | None = None, bias: np.ndarray | None = None) -> SparseTensor:
    """Optionally project channels 1x1, unstack z-slices, gather rows at ``coords``."""
    feats = m.features if weight is None else conv2d(m.features, weight, bias)
    d, h, w = spatial_shape
    if feats.shape != (d * out_channels, h, w):
        raise ValueError(f"map of shape {feats.shape} cannot hold {d} slices of {out_channels}")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if len(coords) and (np.any(coords < 0) or np.any(coords >= np.array(spatial_shape))):
        raise ValueError("coordinate outside the BEV map")
    vol = feats.reshape(d, out_channels, h, w)
    z, y, x = coords.T
    return SparseTensor(coords, vol[z, :, y, x].reshape(len(coords), out_channels), spatial_shape, stride)


def gcp_forward(t: SparseTensor, spec: GcpSpec, ws, geometry: BevGeometry | None = None):
    """Returns ``(sparse tensor for the decoder, BEV map for the heads)``."""
    bev_in = sparse_to_bev(t, geometry)
    bev = bev_cnn(bev_in, spec, ws)
    back = bev_to_sparse(bev, t.coords, t.spatial_shape, t.stride, t.channels,
                         ws["gcp.out.weight"], ws["gcp.out.bias"])
    return back, bev
