"""Deterministic NumPy reference for a sparse-voxel LiDAR multi-task network.

One forward pass yields per-point semantic labels, BEV segmentation, oriented
3D boxes, and (with the second stage) refined labels plus panoptic instance ids.
"""

__version__ = "0.1.0"
