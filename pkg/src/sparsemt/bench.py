"""Timing harness: sparse-vs-dense convolution and per-stage pipeline throughput."""

from __future__ import annotations

import time

import numpy as np

from .pipeline import infer
from .scene import SceneSpec, generate_scene
from .sparse_core import SparseTensor, build_submanifold_rulebook
from .sparse_nn import ConvWeights, dense_conv3d_oracle, submanifold_conv3d

STAGES = ("voxelize", "vfe", "encoder", "gcp", "decoder", "heads", "decode", "stage2")


def random_sparse_tensor(shape, occupancy: float, channels: int, seed: int = 0) -> SparseTensor:
    rng = np.random.default_rng(seed)
    total = int(np.prod(shape))
    n = max(1, int(round(occupancy * total)))
    flat = np.sort(rng.choice(total, size=n, replace=False))
    coords = np.stack(np.unravel_index(flat, shape), axis=1).astype(np.int64)
    return SparseTensor(coords, rng.standard_normal((n, channels)), tuple(shape), 1)


def bench_sparse_vs_dense(shape=(40, 128, 128), occupancy: float = 0.02, channels: int = 16,
                          seed: int = 0, repeats: int = 1) -> dict:
    """Best-of-``repeats`` wall time of one submanifold layer (rulebook build included)
    against the dense oracle on the same volume and channel widths."""
    t = random_sparse_tensor(shape, occupancy, channels, seed)
    rng = np.random.default_rng(seed + 1)
    w = ConvWeights(rng.standard_normal((27, channels, channels)) * 0.1, np.zeros(channels))

    sparse_s = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = submanifold_conv3d(t, build_submanifold_rulebook(t), w)
        sparse_s = min(sparse_s, time.perf_counter() - t0)
    dense_s = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        dense = dense_conv3d_oracle(t.dense(), w)
        dense_s = min(dense_s, time.perf_counter() - t0)
    z, y, x = t.coords.T
    err = float(np.max(np.abs(dense[z, y, x] - out.features))) if t.num_active else 0.0
    return {"shape": tuple(shape), "occupancy": occupancy, "channels": channels,
            "active": t.num_active, "sparse_s": sparse_s, "dense_s": dense_s,
            "speedup": dense_s / sparse_s, "max_abs_diff": err}


def scene_of_size(n_points: int, seed: int = 0):
    """A default-layout scene whose point budget scales with ``n_points``."""
    f = n_points / 20000.0
    spec = SceneSpec(points_per_object=max(1, int(1000 * f)), ground_points=int(14500 * f),
                     points_per_pole=max(1, int(300 * f)), points_per_wall=max(1, int(1500 * f)), seed=seed)
    return generate_scene(spec)


def bench_stages(cfg, ws, sizes=(5000, 10000, 20000), seed: int = 0) -> list:
    rows = []
    for n in sizes:
        scene = scene_of_size(n, seed)
        res = infer(scene.cloud, cfg, ws, stage2=True, panoptic=True)
        rows.append({"points": len(scene.cloud), "voxels": res.stage1.voxel_map.num_voxels,
                     "timings": {k: res.timings.get(k, 0.0) for k in STAGES},
                     "total_ms": 1000.0 * res.timings["total"]})
    return rows


def format_bench_report(rows, dense: dict | None = None) -> str:
    lines = []
    for r in rows:
        lines.append(f"points {r['points']}  voxels {r['voxels']}  end-to-end {r['total_ms']:.1f} ms")
        for name in STAGES:
            s = r["timings"][name]
            rate = r["voxels"] / s if s > 0 else float("inf")
            lines.append(f"  {name:<10} {1000 * s:9.2f} ms  {rate:14.0f} voxels/s")
    if dense is not None:
        d, h, w = dense["shape"]
        lines.append(f"submanifold vs dense on {w}x{h}x{d}, occupancy {dense['occupancy']:.3f}, "
                     f"C={dense['channels']}, active {dense['active']}")
        lines.append(f"  sparse {1000 * dense['sparse_s']:.2f} ms  dense {1000 * dense['dense_s']:.2f} ms  "
                     f"speedup {dense['speedup']:.1f}x  max |diff| {dense['max_abs_diff']:.2e}")
    return "\n".join(lines) + "\n"
