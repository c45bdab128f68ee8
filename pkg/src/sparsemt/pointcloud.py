"""Point clouds: data model, file I/O, multi-frame merging and geometric transforms."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

IGNORE = 0

DEFAULT_FEATURE_NAMES = ("intensity", "elongation", "timestamp")

_MAGIC = b"LPCD"
_LABEL_MARKER = b"LBLS"
_VERSION = 1
_HEADER = struct.Struct("<4sIQI")


class PointCloudFormatError(ValueError):
    """Raised when a point-cloud file cannot be decoded.

    ``offset`` is a byte offset for binary files and a 1-based line number
    for CSV files.
    """

    def __init__(self, message: str, offset: int, unit: str = "byte"):
        super().__init__(f"{message} (at {unit} {offset})")
        self.offset = offset
        self.unit = unit


@dataclass
class PointCloud:
    xyz: np.ndarray
    features: np.ndarray
    feature_names: tuple = DEFAULT_FEATURE_NAMES
    labels: np.ndarray | None = None
    current_mask: np.ndarray | None = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = len(self.xyz)
        feats = np.asarray(self.features, dtype=np.float64)
        self.features = feats if feats.ndim == 2 and len(feats) == n else feats.reshape(n, -1)
        if len(self.feature_names) != self.features.shape[1]:
            self.feature_names = _default_names(self.features.shape[1])
        self.feature_names = tuple(self.feature_names)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ValueError(f"labels has shape {self.labels.shape}, expected ({n},)")
        if self.current_mask is None:
            self.current_mask = np.ones(n, dtype=bool)
        else:
            self.current_mask = np.asarray(self.current_mask, dtype=bool)
            if self.current_mask.shape != (n,):
                raise ValueError("current_mask length does not match point count")
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.xyz)

    @property
    def points(self) -> np.ndarray:
        """N x (3 + c) matrix of coordinates followed by the extra features."""
        return np.concatenate([self.xyz, self.features], axis=1)

    @property
    def feature_dim(self) -> int:
        return 3 + self.features.shape[1]

    def subset(self, index) -> "PointCloud":
        return PointCloud(
            self.xyz[index],
            self.features[index],
            self.feature_names,
            None if self.labels is None else self.labels[index],
            self.current_mask[index],
        )

    @classmethod
    def from_points(cls, points, labels=None, feature_names=None) -> "PointCloud":
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] < 3:
            raise ValueError("points must be an N x (3+c) matrix")
        extra = points.shape[1] - 3
        names = feature_names if feature_names is not None else _default_names(extra)
        return cls(points[:, :3], points[:, 3:], tuple(names), labels)

    @classmethod
    def empty(cls, n_features: int = 3) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, n_features)))


def _default_names(n: int) -> tuple:
    names = list(DEFAULT_FEATURE_NAMES[:n])
    names += [f"f{i}" for i in range(len(names), n)]
    return tuple(names)


# -- file I/O --------------------------------------------------------------


def load_point_cloud(path, format: str = "binary", has_labels: bool = False) -> PointCloud:
    """Read a point cloud from ``path``.

    ``format`` is ``"binary"`` (LPCD container) or ``"csv"``. For CSV the
    trailing column is parsed as an integer label when ``has_labels`` is set;
    binary files carry labels iff they contain an ``LBLS`` section.
    """
    path = Path(path)
    if format == "binary":
        return decode_binary(path.read_bytes())
    if format == "csv":
        return decode_csv(path.read_text(), has_labels=has_labels)
    raise ValueError(f"unknown point-cloud format {format!r}")


def save_point_cloud(pc: PointCloud, path, format: str = "binary") -> None:
    path = Path(path)
    if format == "binary":
        path.write_bytes(encode_binary(pc))
    elif format == "csv":
        path.write_text(encode_csv(pc))
    else:
        raise ValueError(f"unknown point-cloud format {format!r}")


def encode_binary(pc: PointCloud) -> bytes:
    data = pc.points.astype("<f4")
    out = [_HEADER.pack(_MAGIC, _VERSION, len(pc), pc.feature_dim), data.tobytes()]
    if pc.labels is not None:
        out.append(struct.pack("<4sQ", _LABEL_MARKER, len(pc)))
        out.append(pc.labels.astype(np.uint8).tobytes())
    return b"".join(out)


def decode_binary(buf: bytes) -> PointCloud:
    if len(buf) < _HEADER.size:
        raise PointCloudFormatError("truncated header", len(buf))
    magic, version, count, dim = _HEADER.unpack_from(buf, 0)
    if magic != _MAGIC:
        raise PointCloudFormatError(f"bad magic {magic!r}", 0)
    if version != _VERSION:
        raise PointCloudFormatError(f"unsupported version {version}", 4)
    if dim < 3:
        raise PointCloudFormatError(f"feature_dim {dim} < 3", 16)
    offset = _HEADER.size
    nbytes = count * dim * 4
    if len(buf) < offset + nbytes:
        raise PointCloudFormatError(
            f"expected {count} x {dim} float32 payload, file too short", len(buf)
        )
    data = np.frombuffer(buf, dtype="<f4", count=count * dim, offset=offset).reshape(count, dim)
    bad = np.flatnonzero(~np.isfinite(data).all(axis=1))
    if len(bad):
        raise PointCloudFormatError("non-finite value", offset + int(bad[0]) * dim * 4)
    offset += nbytes
    labels = None
    if offset < len(buf):
        if len(buf) < offset + 12:
            raise PointCloudFormatError("truncated label section header", offset)
        marker, n_labels = struct.unpack_from("<4sQ", buf, offset)
        if marker != _LABEL_MARKER:
            raise PointCloudFormatError(f"unexpected section marker {marker!r}", offset)
        if n_labels != count:
            raise PointCloudFormatError(
                f"label count {n_labels} does not match point count {count}", offset + 4
            )
        offset += 12
        if len(buf) < offset + count:
            raise PointCloudFormatError("truncated label payload", len(buf))
        labels = np.frombuffer(buf, dtype=np.uint8, count=count, offset=offset).astype(np.int64)
        offset += count
        if offset != len(buf):
            raise PointCloudFormatError("trailing bytes after label section", offset)
    return PointCloud.from_points(data.astype(np.float64), labels=labels)


def encode_csv(pc: PointCloud) -> str:
    lines = []
    pts = pc.points
    for i in range(len(pc)):
        row = ",".join(repr(float(v)) for v in pts[i])
        if pc.labels is not None:
            row += f",{int(pc.labels[i])}"
        lines.append(row)
    return "\n".join(lines) + ("\n" if lines else "")


def decode_csv(text: str, has_labels: bool = False) -> PointCloud:
    rows, labels = [], []
    width = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cells = line.split(",")
        if has_labels:
            try:
                labels.append(int(cells[-1]))
            except ValueError:
                raise PointCloudFormatError(f"bad label {cells[-1]!r}", lineno, "line") from None
            cells = cells[:-1]
        try:
            values = [float(c) for c in cells]
        except ValueError as exc:
            raise PointCloudFormatError(str(exc), lineno, "line") from None
        if width is None:
            width = len(values)
            if width < 3:
                raise PointCloudFormatError("fewer than 3 columns", lineno, "line")
        elif len(values) != width:
            raise PointCloudFormatError(
                f"expected {width} features, got {len(values)}", lineno, "line"
            )
        if not all(math.isfinite(v) for v in values):
            raise PointCloudFormatError("non-finite value", lineno, "line")
        rows.append(values)
    if not rows:
        return PointCloud.empty()
    return PointCloud.from_points(np.array(rows), labels=np.array(labels) if has_labels else None)


# -- poses and multi-frame merging -------------------------------------------


def check_pose(pose, atol: float = 1e-6) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise ValueError(f"pose must be 4x4, got {pose.shape}")
    rot = pose[:3, :3]
    if not np.allclose(rot @ rot.T, np.eye(3), atol=atol):
        raise ValueError("pose rotation block is not orthonormal")
    if not np.allclose(pose[3], [0, 0, 0, 1], atol=0):
        raise ValueError("pose last row must be (0, 0, 0, 1)")
    return pose


def translation_pose(dx: float, dy: float, dz: float) -> np.ndarray:
    pose = np.eye(4)
    pose[:3, 3] = dx, dy, dz
    return pose


def merge_frames(current: PointCloud, past: Sequence = (), frame_interval: float = 0.1) -> PointCloud:
    """Merge past frames into the current frame's coordinate system.

    ``past`` holds ``(cloud, pose)`` or ``(cloud, pose, timestamp)`` tuples,
    ordered from most recent to oldest. Without an explicit timestamp the
    k-th past frame gets ``-(k + 1) * frame_interval``. Past points keep
    their extra features but are excluded from ``current_mask``.
    """
    ts_col = _timestamp_column(current)
    cur_feats = _with_timestamp(current).features.copy()
    cur_feats[:, ts_col] = 0.0
    xyz = [current.xyz]
    feats = [cur_feats]
    masks = [np.ones(len(current), dtype=bool)]
    labels = [current.labels]
    for k, item in enumerate(past):
        cloud, pose = item[0], check_pose(item[1])
        stamp = item[2] if len(item) > 2 else -(k + 1) * frame_interval
        if stamp > 0:
            raise ValueError("past-frame timestamps must be <= 0")
        f = _with_timestamp(cloud).features.copy()
        if f.shape[1] != cur_feats.shape[1]:
            raise ValueError("past frame feature width differs from current frame")
        f[:, ts_col] = stamp
        xyz.append(cloud.xyz @ pose[:3, :3].T + pose[:3, 3])
        feats.append(f)
        masks.append(np.zeros(len(cloud), dtype=bool))
        labels.append(cloud.labels)
    merged_labels = None
    if current.labels is not None:
        merged_labels = np.concatenate(
            [lab if lab is not None else np.full(len(m), IGNORE) for lab, m in zip(labels, masks)]
        )
    names = _with_timestamp(current).feature_names
    return PointCloud(
        np.concatenate(xyz), np.concatenate(feats), names, merged_labels, np.concatenate(masks)
    )


def _timestamp_column(pc: PointCloud) -> int:
    if "timestamp" in pc.feature_names:
        return pc.feature_names.index("timestamp")
    return len(pc.feature_names)


def _with_timestamp(pc: PointCloud) -> PointCloud:
    if "timestamp" in pc.feature_names:
        return pc
    feats = np.concatenate([pc.features, np.zeros((len(pc), 1))], axis=1)
    return replace(pc, features=feats, feature_names=pc.feature_names + ("timestamp",))


# -- geometric transforms ----------------------------------------------------

_KINDS = ("identity", "flip_xz", "flip_yz", "scale", "rot_yaw", "rot_pitch", "rot_roll", "translate")


@dataclass(frozen=True)
class GeomTransform:
    kind: str
    params: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "scale" and not self.params[0] > 0:
            raise ValueError("scale factor must be positive")
        if not all(math.isfinite(p) for p in self.params):
            raise ValueError("transform parameters must be finite")

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def scale(cls, factor: float):
        return cls("scale", (float(factor),))

    @classmethod
    def yaw(cls, angle: float):
        return cls("rot_yaw", (float(angle),))

    @classmethod
    def pitch(cls, angle: float):
        return cls("rot_pitch", (float(angle),))

    @classmethod
    def roll(cls, angle: float):
        return cls("rot_roll", (float(angle),))

    @classmethod
    def translate(cls, dx: float = 0.0, dy: float = 0.0, dz: float = 0.0):
        return cls("translate", (float(dx), float(dy), float(dz)))

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        k = self.kind
        if k == "identity":
            return xyz.copy()
        if k == "flip_xz":
            return xyz * np.array([1.0, -1.0, 1.0])
        if k == "flip_yz":
            return xyz * np.array([-1.0, 1.0, 1.0])
        if k == "scale":
            return xyz * self.params[0]
        if k == "translate":
            return xyz + np.array(self.params)
        return xyz @ _rotation(k, self.params[0]).T


def _rotation(kind: str, a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    if kind == "rot_yaw":  # about z
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    if kind == "rot_pitch":  # about y
        return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])  # roll, about x


def apply_transform(pc: PointCloud, t: GeomTransform) -> PointCloud:
    return replace(pc, xyz=t.apply(pc.xyz))


@dataclass(frozen=True)
class TtaConfig:
    flips: bool = True
    scales: tuple = (0.95, 1.05)
    yaw_deg: tuple = (22.5, -22.5, 45.0, -45.0, 135.0, -135.0, 157.5, -157.5, 180.0)
    pitch_deg: tuple = (8.0, -8.0)
    roll_deg: tuple = (5.0, -5.0)
    z_shifts: tuple = (0.2, -0.2)

    @classmethod
    def none(cls) -> "TtaConfig":
        return cls(False, (), (), (), (), ())

    @classmethod
    def flips_only(cls) -> "TtaConfig":
        return cls(True, (), (), (), (), ())

    def transforms(self) -> list:
        out = [GeomTransform.identity()]
        if self.flips:
            out += [GeomTransform("flip_xz"), GeomTransform("flip_yz")]
        out += [GeomTransform.scale(s) for s in self.scales]
        out += [GeomTransform.yaw(math.radians(a)) for a in self.yaw_deg]
        out += [GeomTransform.pitch(math.radians(a)) for a in self.pitch_deg]
        out += [GeomTransform.roll(math.radians(a)) for a in self.roll_deg]
        out += [GeomTransform.translate(dz=d) for d in self.z_shifts]
        return out


def make_tta_set(pc: PointCloud, config: TtaConfig | None = None) -> list:
    """Return ``[(transform, transformed_cloud), ...]`` with identity first.

    Each variant applies exactly one transform; point order is preserved.
    """
    config = TtaConfig() if config is None else config
    return [(t, apply_transform(pc, t)) for t in config.transforms()]


def aggregate_tta_probs(per_variant_probs: Sequence[np.ndarray]) -> np.ndarray:
    if len(per_variant_probs) == 0:
        raise ValueError("need at least one probability matrix")
    shape = np.shape(per_variant_probs[0])
    for p in per_variant_probs:
        if np.shape(p) != shape:
            raise ValueError(f"shape mismatch: {np.shape(p)} vs {shape}")
    acc = np.zeros(shape, dtype=np.float64)
    for p in per_variant_probs:
        acc += p
    acc /= len(per_variant_probs)
    total = acc.sum(axis=-1, keepdims=True)
    return np.divide(acc, total, out=np.zeros_like(acc), where=total > 0)
