"""Synthetic labelled scenes: a ground plane, box-shaped objects, poles and walls."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .heads import Box
from .pointcloud import PointCloud

ROAD, SIDEWALK, POLE, BUILDING = 18, 22, 10, 14

# (w, l, h) in metres; l runs along the heading.
OBJECT_SIZES = {
    1: (1.9, 4.5, 1.6),   # car
    2: (2.5, 7.0, 3.0),   # truck
    3: (2.6, 9.0, 3.2),   # bus
    4: (1.8, 3.5, 1.8),   # other vehicle
    5: (0.8, 2.0, 1.7),   # motorcyclist
    6: (0.7, 1.8, 1.7),   # bicyclist
    7: (0.7, 0.7, 1.75),  # pedestrian
    12: (0.6, 1.7, 1.1),  # bicycle
    13: (0.8, 2.1, 1.2),  # motorcycle
}


@dataclass
class SceneSpec:
    extent: float = 6.0
    objects: dict = field(default_factory=lambda: {1: 2, 7: 1, 6: 1})
    poles: int = 3
    walls: int = 2
    points_per_object: int = 1000
    ground_points: int = 14500
    points_per_pole: int = 300
    points_per_wall: int = 1500
    noise: float = 0.02
    ground_z: float = -1.7
    seed: int = 0

    def __post_init__(self):
        counts = [self.poles, self.walls, self.points_per_object, self.ground_points,
                  self.points_per_pole, self.points_per_wall, *self.objects.values()]
        if any(c < 0 for c in counts):
            raise ValueError("scene counts must be non-negative")
        unknown = set(self.objects) - set(OBJECT_SIZES)
        if unknown:
            raise ValueError(f"no object size for classes {sorted(unknown)}")


@dataclass
class Scene:
    cloud: PointCloud
    boxes: list
    instances: np.ndarray  # per point, b + 1 for points of box b, else 0

    @property
    def panoptic(self):
        return self.cloud.labels, self.instances


def _place(rng, radius, taken, extent, tries=200):
    """Random (x, y) whose circle of ``radius`` fits and avoids every taken circle."""
    lim = extent - radius
    if lim <= 0:
        raise ValueError("object does not fit in the scene extent")
    for _ in range(tries):
        x, y = rng.uniform(-lim, lim, 2)
        if all(math.hypot(x - tx, y - ty) > radius + tr + 0.3 for tx, ty, tr in taken):
            return float(x), float(y)
    raise _Crowded


class _Crowded(Exception):
    pass


def _layout(rng, spec: SceneSpec):
    e = spec.extent
    taken, boxes, poles = [], [], []
    for cls in sorted(spec.objects):
        w, l, h = OBJECT_SIZES[cls]
        r = 0.5 * math.hypot(w, l)
        for _ in range(spec.objects[cls]):
            x, y = _place(rng, r, taken, e - 0.4)
            taken.append((x, y, r))
            yaw = float(rng.uniform(-math.pi, math.pi))
            boxes.append(Box(x, y, spec.ground_z + h / 2, w, l, h, yaw, cls))
    for _ in range(spec.poles):
        x, y = _place(rng, 0.15, taken, e)
        taken.append((x, y, 0.15))
        poles.append((x, y))
    return boxes, poles


def _cuboid_surface(rng, box: Box, n: int, noise: float) -> np.ndarray:
    """Points on the four sides and top of ``box``, jittered and clipped back inside."""
    l, w, h = box.l, box.w, box.h
    areas = np.array([l * h, l * h, w * h, w * h, l * w])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u, v = rng.uniform(-0.5, 0.5, (2, n))
    loc = np.empty((n, 3))
    side = np.where(face % 2 == 0, 0.5, -0.5)
    along = face < 2
    across = (face == 2) | (face == 3)
    top = face == 4
    loc[along] = np.stack([u[along] * l, side[along] * w, v[along] * h], axis=1)
    loc[across] = np.stack([side[across] * l, u[across] * w, v[across] * h], axis=1)
    loc[top] = np.stack([u[top] * l, v[top] * w, np.full(top.sum(), 0.5 * h)], axis=1)
    loc += rng.normal(0.0, noise, loc.shape)
    loc = np.clip(loc, -np.array([l, w, h]) / 2, np.array([l, w, h]) / 2)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    xy = loc[:, :2] @ np.array([[c, s], [-s, c]])
    return np.column_stack([xy + [box.x, box.y], loc[:, 2] + box.z])


def generate_scene(spec: SceneSpec | None = None) -> Scene:
    spec = SceneSpec() if spec is None else spec
    rng = np.random.default_rng(spec.seed)
    e = spec.extent
    # greedy placement can paint itself into a corner, so restart the whole layout a few times
    for attempt in range(50):
        try:
            boxes, poles = _layout(rng, spec)
            break
        except _Crowded:
            if attempt == 49:
                raise ValueError("could not place all objects without overlap; enlarge the extent") from None

    xyz, labels, inst = [], [], []
    for b, box in enumerate(boxes):
        pts = _cuboid_surface(rng, box, spec.points_per_object, spec.noise)
        xyz.append(pts)
        labels.append(np.full(len(pts), box.label))
        inst.append(np.full(len(pts), b + 1))

    for x, y in poles:
        n = spec.points_per_pole
        ang = rng.uniform(0, 2 * math.pi, n)
        z = rng.uniform(spec.ground_z, spec.ground_z + 3.0, n)
        xyz.append(np.column_stack([x + 0.1 * np.cos(ang), y + 0.1 * np.sin(ang), z]))
        labels.append(np.full(n, POLE))
        inst.append(np.zeros(n, dtype=np.int64))

    for k in range(spec.walls):
        n = spec.points_per_wall
        t = rng.uniform(-e, e, n)
        z = rng.uniform(spec.ground_z, spec.ground_z + 3.0, n)
        off = e - 0.05 - 0.3 * (k // 4)
        d = rng.normal(0.0, spec.noise, n)
        side = k % 4
        px = [off + d, -off + d, t, t][side]
        py = [t, t, off + d, -off + d][side]
        xyz.append(np.column_stack([px, py, z]))
        labels.append(np.full(n, BUILDING))
        inst.append(np.zeros(n, dtype=np.int64))

    n = spec.ground_points
    g = np.column_stack([rng.uniform(-e, e, (n, 2)), spec.ground_z + rng.normal(0.0, spec.noise, n)])
    free = np.ones(n, dtype=bool)
    for box in boxes:
        free &= ~box.contains(g, margin=0.2)
    g = g[free]
    xyz.append(g)
    labels.append(np.where(g[:, 0] > e - 1.5, SIDEWALK, ROAD))
    inst.append(np.zeros(len(g), dtype=np.int64))

    xyz = np.concatenate(xyz)
    feats = np.column_stack([rng.uniform(0, 1, len(xyz)), rng.uniform(0, 0.5, len(xyz)), np.zeros(len(xyz))])
    cloud = PointCloud(xyz, feats, labels=np.concatenate(labels))
    return Scene(cloud, boxes, np.concatenate(inst).astype(np.int64))
