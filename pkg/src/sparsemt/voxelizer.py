"""Point -> voxel quantization, voxel feature encoding, label voting and de-voxelization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud import IGNORE, PointCloud

SENTINEL = -1


@dataclass(frozen=True)
class VoxelizationConfig:
    voxel_size: tuple = (0.1, 0.1, 0.15)
    range_min: tuple = (-75.2, -75.2, -2.0)
    range_max: tuple = (75.2, 75.2, 4.0)
    oob_policy: str = "drop"

    def __post_init__(self):
        size = np.asarray(self.voxel_size, dtype=float)
        lo = np.asarray(self.range_min, dtype=float)
        hi = np.asarray(self.range_max, dtype=float)
        if size.shape != (3,) or lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("voxel_size, range_min and range_max need 3 entries each")
        if np.any(size <= 0):
            raise ValueError("voxel sizes must be positive")
        if np.any(hi <= lo):
            raise ValueError("range_max must exceed range_min on every axis")
        extent = (hi - lo) / size
        if np.any(np.abs(extent - np.round(extent)) > 1e-6):
            raise ValueError(f"range span is not a whole number of voxels: {extent}")
        if self.oob_policy not in ("drop", "clamp"):
            raise ValueError(f"oob_policy must be 'drop' or 'clamp', got {self.oob_policy!r}")

    @property
    def grid_size(self) -> tuple:
        """Voxel counts along (x, y, z)."""
        span = (np.asarray(self.range_max) - np.asarray(self.range_min)) / np.asarray(self.voxel_size)
        return tuple(int(v) for v in np.round(span))

    @property
    def spatial_shape(self) -> tuple:
        """Grid extents in (D_z, H_y, W_x) order, as used by sparse tensors."""
        nx, ny, nz = self.grid_size
        return (nz, ny, nx)


@dataclass
class VoxelMap:
    """Result of quantizing a point cloud.

    ``unique_coords`` are (ix, iy, iz) triples sorted by (iz, iy, ix).
    ``point_coords`` keeps each point's clamped voxel (also (ix, iy, iz)) so
    dropped points can still be matched to a nearby active voxel.
    """

    unique_coords: np.ndarray
    point_to_voxel: np.ndarray
    points_per_voxel: np.ndarray
    point_coords: np.ndarray
    grid_size: tuple

    @property
    def num_voxels(self) -> int:
        return len(self.unique_coords)

    @property
    def dropped(self) -> np.ndarray:
        return self.point_to_voxel == SENTINEL

    @property
    def is_empty(self) -> bool:
        return self.num_voxels == 0

    @property
    def zyx(self) -> np.ndarray:
        return self.unique_coords[:, ::-1].copy()

    def keys(self, coords_xyz: np.ndarray) -> np.ndarray:
        nx, ny, _ = self.grid_size
        c = np.asarray(coords_xyz, dtype=np.int64)
        return (c[:, 2] * ny + c[:, 1]) * nx + c[:, 0]

    def lookup(self, coords_xyz: np.ndarray) -> np.ndarray:
        """Row of each (ix, iy, iz) triple in ``unique_coords`` or SENTINEL."""
        table = self.keys(self.unique_coords)
        q = self.keys(coords_xyz)
        if len(table) == 0:
            return np.full(len(q), SENTINEL, dtype=np.int64)
        pos = np.minimum(np.searchsorted(table, q), len(table) - 1)
        return np.where(table[pos] == q, pos, SENTINEL)


def compute_voxel_indices(pc: PointCloud, cfg: VoxelizationConfig) -> VoxelMap:
    size = np.asarray(cfg.voxel_size, dtype=np.float64)
    lo = np.asarray(cfg.range_min, dtype=np.float64)
    grid = np.asarray(cfg.grid_size, dtype=np.int64)
    raw = np.floor((pc.xyz - lo) / size).astype(np.int64)
    inside = np.all((raw >= 0) & (raw < grid), axis=1)
    clamped = np.clip(raw, 0, grid - 1)
    keep = inside if cfg.oob_policy == "drop" else np.ones(len(pc), dtype=bool)
    keys = (clamped[:, 2] * grid[1] + clamped[:, 1]) * grid[0] + clamped[:, 0]
    uniq, inverse, counts = np.unique(keys[keep], return_inverse=True, return_counts=True)
    p2v = np.full(len(pc), SENTINEL, dtype=np.int64)
    p2v[keep] = inverse.reshape(-1)
    ix = uniq % grid[0]
    iy = (uniq // grid[0]) % grid[1]
    iz = uniq // (grid[0] * grid[1])
    coords = np.stack([ix, iy, iz], axis=1).astype(np.int64)
    return VoxelMap(coords, p2v, counts.astype(np.int64), clamped, tuple(int(g) for g in grid))


@dataclass
class VfeParams:
    """Per-point MLP: a list of ``(weight[in, out], bias[out])`` layers, ReLU after each."""

    layers: list

    def __post_init__(self):
        for (w0, _), (w1, _) in zip(self.layers, self.layers[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ValueError("VFE layer shapes do not chain")

    @property
    def in_features(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_features(self) -> int:
        return self.layers[-1][0].shape[1]


def vfe_mlp(points: np.ndarray, params: VfeParams) -> np.ndarray:
    h = np.asarray(points, dtype=np.float64)
    for w, b in params.layers:
        h = np.maximum(h @ w + b, 0.0)
    return h


def vfe_encode(pc: PointCloud, vm: VoxelMap, params: VfeParams) -> np.ndarray:
    """Max-pool the per-point MLP output over each voxel -> M x C."""
    if pc.feature_dim != params.in_features:
        raise ValueError(
            f"point feature width {pc.feature_dim} != VFE input width {params.in_features}"
        )
    keep = np.flatnonzero(~vm.dropped)
    out = np.zeros((vm.num_voxels, params.out_features))
    if len(keep) == 0:
        return out
    h = vfe_mlp(pc.points[keep], params)
    vox = vm.point_to_voxel[keep]
    order = np.argsort(vox, kind="stable")
    starts = np.flatnonzero(np.r_[True, np.diff(vox[order]) != 0])
    out[vox[order][starts]] = np.maximum.reduceat(h[order], starts, axis=0)
    return out


def majority_vote_labels(pc: PointCloud, vm: VoxelMap, num_classes: int | None = None) -> np.ndarray:
    """Per-voxel majority label over current-frame points.

    Past-frame points, dropped points and IGNORE-labeled points do not vote.
    Ties go to the smallest class id; voxels without votes get IGNORE.
    """
    if pc.labels is None:
        raise ValueError("point cloud has no labels")
    k = int(pc.labels.max(initial=0)) + 1 if num_classes is None else num_classes + 1
    vote = pc.current_mask & ~vm.dropped & (pc.labels != IGNORE)
    m = vm.num_voxels
    counts = np.bincount(
        vm.point_to_voxel[vote] * k + pc.labels[vote], minlength=m * k
    ).reshape(m, k)
    counts[:, IGNORE] = 0
    out = counts.argmax(axis=1)
    out[counts.max(axis=1, initial=0) == 0] = IGNORE
    return out.astype(np.int64)


def devoxelize_labels(vm: VoxelMap, voxel_labels: np.ndarray) -> np.ndarray:
    """Give each point its voxel's label.

    Dropped points take the label of their clamped voxel when that voxel is
    active, otherwise the most frequent voxel label (smallest id on ties).
    """
    voxel_labels = np.asarray(voxel_labels)
    if len(voxel_labels) != vm.num_voxels:
        raise ValueError("voxel_labels length does not match the voxel map")
    out = np.full(len(vm.point_to_voxel), IGNORE, dtype=np.int64)
    kept = ~vm.dropped
    out[kept] = voxel_labels[vm.point_to_voxel[kept]]
    dropped = np.flatnonzero(vm.dropped)
    if len(dropped) and vm.num_voxels:
        rows = vm.lookup(vm.point_coords[dropped])
        fallback = int(np.bincount(voxel_labels).argmax())
        out[dropped] = np.where(rows != SENTINEL, voxel_labels[np.maximum(rows, 0)], fallback)
    return out


def devoxelize_features(vm: VoxelMap, voxel_features: np.ndarray) -> np.ndarray:
    """Copy voxel feature rows to points; dropped points get zero rows."""
    voxel_features = np.asarray(voxel_features)
    if len(voxel_features) != vm.num_voxels:
        raise ValueError("voxel_features row count does not match the voxel map")
    out = np.zeros((len(vm.point_to_voxel),) + voxel_features.shape[1:], dtype=voxel_features.dtype)
    kept = ~vm.dropped
    out[kept] = voxel_features[vm.point_to_voxel[kept]]
    return out
