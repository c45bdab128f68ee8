#!/usr/bin/env python3
# coding: utf-8

# # Sparse convolution by rulebook
#
# A sparse tensor is just sorted (z, y, x) coordinates plus a feature row per site.
# Convolution becomes gather, multiply, scatter over a list of (input row, output row) pairs.

# In[1]:

import time

import numpy as np

from sparsemt.gcp import gcp_forward
from sparsemt.config import GcpSpec
from sparsemt.sparse_core import SparseTensor, build_strided_rulebook, build_submanifold_rulebook
from sparsemt.sparse_nn import ConvWeights, dense_conv3d_oracle, sparse_conv3d, submanifold_conv3d
from sparsemt.weights import WeightStore

rng = np.random.default_rng(0)


# A handful of active voxels in an 8^3 grid, two channels each.

# In[2]:

coords = np.array([[1, 1, 1], [1, 1, 2], [1, 2, 2], [5, 5, 5]])
t = SparseTensor(coords, rng.normal(size=(4, 2)), (8, 8, 8))
print(t.num_active, t.channels, t.spatial_shape)


# The submanifold rulebook only pairs active sites with active neighbours.
# The lone voxel at (5,5,5) only ever sees itself.

# In[3]:

rb = build_submanifold_rulebook(t)
print("pairs per offset:", [len(p) for p in rb.pairs if len(p)])
print("total pairs:", rb.num_pairs)


# Check against a plain dense 3D convolution of the zero-filled volume.

# In[4]:

w = ConvWeights(rng.normal(size=(27, 2, 3)), rng.normal(size=3))
out = submanifold_conv3d(t, rb, w)
dense = dense_conv3d_oracle(t.dense(), w)
print(np.abs(out.features - dense[tuple(t.coords.T)]).max())


# Strided convolution makes new sites: every coarse cell any input can reach.

# In[5]:

down = sparse_conv3d(t, build_strided_rulebook(t), w)
print(down.num_active, down.spatial_shape, down.stride)
dense2 = dense_conv3d_oracle(t.dense(), w, stride=2)
print(np.abs(down.features - dense2[tuple(down.coords.T)]).max())


# # Why a dense context path helps
#
# Stacking submanifold layers never connects voxels separated by empty space.
# Nudge voxel 0 and watch voxel 3.

# In[6]:

def stack(feats, layers):
    x = t.replace_features(feats)
    for lw in layers:
        x = x.replace_features(np.maximum(submanifold_conv3d(x, rb, lw).features, 0))
    return x.features

layers = [ConvWeights(rng.normal(size=(27, 2, 2))) for _ in range(6)]
bumped = t.features.copy()
bumped[0] += 1.0
print("change at the far voxel:", np.abs(stack(bumped, layers)[3] - stack(t.features, layers)[3]).max())


# Project to a BEV map, run a small 2D CNN, read back: now the far voxel moves.

# In[7]:

spec = GcpSpec(depths=(2, 2), widths=(3, 3))
ws = {"gcp.stem.weight": rng.normal(size=(1, 2, 3)), "gcp.stem.bias": rng.normal(size=3),
      "gcp.out.weight": rng.normal(size=(1, 6, 2)), "gcp.out.bias": rng.normal(size=2)}
for lvl in ("l1", "l2"):
    for i in range(2):
        ws[f"gcp.{lvl}.{i}.weight"] = rng.normal(size=(9, 3, 3))
        ws[f"gcp.{lvl}.{i}.bias"] = rng.normal(size=3)
ws = WeightStore(ws)
flat = SparseTensor([[0, 1, 1], [0, 5, 5]], rng.normal(size=(2, 2)), (1, 8, 8), 8)
a, bev = gcp_forward(flat, spec, ws)
pert = flat.features.copy()
pert[0] += 1.0
b, _ = gcp_forward(flat.replace_features(pert), spec, ws)
print("BEV channels:", bev.features.shape)
print("change at the far voxel:", np.abs(b.features[1] - a.features[1]).max())


# # Timing at desk scale
#
# 2% of a 40 x 128 x 128 grid, 16 channels in and out.

# In[8]:

from sparsemt.bench import bench_sparse_vs_dense

r = bench_sparse_vs_dense((40, 128, 128), 0.02, 16)
print(f"{r['active']} active   sparse {r['sparse_s']*1e3:.0f} ms   dense {r['dense_s']*1e3:.0f} ms   "
      f"{r['speedup']:.0f}x")
