#!/usr/bin/env python3
# coding: utf-8

# # From a synthetic scan to panoptic labels
#
# Untrained weights, so the labels are noise; the point is the plumbing and the shapes.

# In[1]:

import numpy as np

from sparsemt.config import CLASS_NAMES, desk_config
from sparsemt.metrics import confusion, miou, panoptic_quality
from sparsemt.model import trace_shapes
from sparsemt.pipeline import infer
from sparsemt.scene import SceneSpec, generate_scene
from sparsemt.voxelizer import compute_voxel_indices
from sparsemt.weights import init_weights


# Two cars, a pedestrian and a cyclist on a road, plus poles and walls.

# In[2]:

scene = generate_scene(SceneSpec(seed=0))
pc = scene.cloud
print(len(pc), "points")
for b in scene.boxes:
    print(f"  {CLASS_NAMES[b.label - 1]:<12} at ({b.x:5.2f}, {b.y:5.2f})  yaw {b.yaw:+.2f}")


# Voxelize on the desk grid (128 x 128 x 40).

# In[3]:

cfg = desk_config()
vm = compute_voxel_indices(pc, cfg.voxel)
print(vm.num_voxels, "voxels,", vm.points_per_voxel.max(), "points in the fullest one")


# What the network will produce, without running it.

# In[4]:

for k, v in trace_shapes(cfg).items():
    print(f"{k:<18} {v}")


# Run both stages with seeded weights.

# In[5]:

ws = init_weights(cfg, 0)
res = infer(pc, cfg, ws, stage2=True, panoptic=True)
print(len(res.boxes), "boxes above threshold")
print({k: round(v * 1e3, 1) for k, v in res.timings.items() if isinstance(v, float)})


# Scoring against the ground truth: near zero with random weights.

# In[6]:

cm = confusion(res.labels, pc.labels, cfg.num_classes)
print("mIoU", round(miou(cm), 4))
pq = panoptic_quality(res.panoptic, scene.panoptic, cfg.num_classes, cfg.thing_classes)
print("PQ", round(pq.mean_pq, 4))


# The ground truth against itself, as a sanity check.

# In[7]:

print("mIoU", miou(confusion(pc.labels, pc.labels, cfg.num_classes)))
print("PQ", panoptic_quality(scene.panoptic, scene.panoptic, cfg.num_classes, cfg.thing_classes).mean_pq)
