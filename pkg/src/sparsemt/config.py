"""Pipeline configuration: defaults, the desk-scale preset, and JSON parsing."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .pointcloud import TtaConfig
from .voxelizer import VoxelizationConfig

CLASS_NAMES = (
    "CAR", "TRUCK", "BUS", "OTHER_VEHICLE", "MOTORCYCLIST", "BICYCLIST", "PEDESTRIAN",
    "SIGN", "TRAFFIC_LIGHT", "POLE", "CONSTRUCTION_CONE", "BICYCLE", "MOTORCYCLE",
    "BUILDING", "VEGETATION", "TREE_TRUNK", "CURB", "ROAD", "LANE_MARKER",
    "OTHER_GROUND", "WALKABLE", "SIDEWALK",
)
CLASS_IDS = {name: i + 1 for i, name in enumerate(CLASS_NAMES)}
THING_CLASSES = (1, 2, 3, 4, 5, 6, 7, 12, 13)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    encoder_widths: tuple = (32, 64, 128, 256)
    encoder_depths: tuple = (2, 3, 3, 3)
    decoder_widths: tuple = (128, 64, 32, 32)
    vfe_widths: tuple = (16, 32)
    use_norm: bool = True

    def __post_init__(self):
        if not (len(self.encoder_widths) == len(self.encoder_depths) == len(self.decoder_widths) == 4):
            raise ConfigError("backbone needs exactly 4 encoder and 4 decoder stages")
        if self.vfe_widths[-1] != self.encoder_widths[0]:
            raise ConfigError("last VFE width must equal the first encoder width")

    @property
    def downsampling(self) -> int:
        return 2 ** (len(self.encoder_widths) - 1)


@dataclass(frozen=True)
class GcpSpec:
    depths: tuple = (6, 6)
    widths: tuple = (128, 256)

    def __post_init__(self):
        if len(self.depths) != 2 or len(self.widths) != 2:
            raise ConfigError("GCP has exactly two levels")

    @property
    def out_channels(self) -> int:
        return sum(self.widths)


@dataclass(frozen=True)
class HeadSpec:
    bev_seg_hidden: int = 64
    bev_seg_depth: int = 2
    det_hidden: int = 64
    top_k: int = 100
    score_thresh: float = 0.1
    rectify_beta: float = 0.5


@dataclass(frozen=True)
class Stage2Spec:
    enabled: bool = True
    point_width: int = 64
    box_width: int = 64
    margin: float = 0.1
    tau_mask: float = 0.5
    tau_box: float = 0.5


@dataclass(frozen=True)
class PipelineConfig:
    voxel: VoxelizationConfig = field(default_factory=VoxelizationConfig)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    gcp: GcpSpec = field(default_factory=GcpSpec)
    heads: HeadSpec = field(default_factory=HeadSpec)
    stage2: Stage2Spec = field(default_factory=Stage2Spec)
    tta: TtaConfig = field(default_factory=TtaConfig)
    num_classes: int = 22
    thing_classes: tuple = THING_CLASSES
    point_features: int = 3
    past_frames: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not all(1 <= c <= self.num_classes for c in self.thing_classes):
            raise ConfigError("thing_classes must lie in 1..num_classes")
        if len(set(self.thing_classes)) != len(self.thing_classes):
            raise ConfigError("thing_classes contains duplicates")

    @property
    def stuff_classes(self) -> tuple:
        return tuple(c for c in range(1, self.num_classes + 1) if c not in self.thing_classes)


def desk_config(**overrides) -> PipelineConfig:
    """Same architecture on a +-6.4 m square: a 128 x 128 x 40 base grid."""
    voxel = VoxelizationConfig(range_min=(-6.4, -6.4, -2.0), range_max=(6.4, 6.4, 4.0))
    return replace(PipelineConfig(voxel=voxel), **overrides)


_SECTIONS = {
    "backbone": BackboneSpec,
    "gcp": GcpSpec,
    "heads": HeadSpec,
    "stage2": Stage2Spec,
    "tta": TtaConfig,
}
_VOXEL_KEYS = ("voxel_size", "range_min", "range_max", "oob_policy")
_SCALARS = ("num_classes", "thing_classes", "point_features", "past_frames", "seed")


def config_from_dict(data: dict) -> PipelineConfig:
    data = dict(data)
    preset = data.pop("preset", "full")
    if preset == "full":
        base = PipelineConfig()
    elif preset == "desk":
        base = desk_config()
    else:
        raise ConfigError(f"unknown preset {preset!r}")
    voxel_kw = {k: _tuple(data.pop(k)) for k in _VOXEL_KEYS if k in data}
    updates = {}
    if voxel_kw:
        try:
            updates["voxel"] = replace(base.voxel, **voxel_kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    for key in _SCALARS:
        if key in data:
            updates[key] = _tuple(data.pop(key))
    for key, cls in _SECTIONS.items():
        if key not in data:
            continue
        section = data.pop(key)
        if not isinstance(section, dict):
            raise ConfigError(f"section {key!r} must be an object")
        allowed = {f.name for f in fields(cls)}
        for sub in section:
            if sub not in allowed:
                raise ConfigError(f"unknown config key {key}.{sub!r}")
        updates[key] = replace(getattr(base, key), **{k: _tuple(v) for k, v in section.items()})
    if data:
        raise ConfigError(f"unknown config key {sorted(data)[0]!r}")
    return replace(base, **updates)


def _tuple(v):
    return tuple(_tuple(x) for x in v) if isinstance(v, list) else v


def parse_config(path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return config_from_dict(data)


def config_to_dict(cfg: PipelineConfig) -> dict:
    out = {k: getattr(cfg.voxel, k) for k in _VOXEL_KEYS}
    for key in _SCALARS:
        out[key] = getattr(cfg, key)
    for key in _SECTIONS:
        out[key] = asdict(getattr(cfg, key))
    return json.loads(json.dumps(out))


def dump_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")
