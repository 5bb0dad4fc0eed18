"""Flat ``section.key = value`` run configuration.

Example::

    # comments start with '#'
    grid.shape = 8, 48, 48
    grid.x_range = 0, 24
    bti.r = 80
    bti.T = 3
    train.epochs = 50

Tuples are comma separated. Unknown sections or keys are rejected so a
typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig, DetectorConfig
from .energy import COUNT_MODES, EnergyModel
from .head import AnchorSpec, HeadConfig
from .lif import LIFParams
from .points import VoxelGridSpec
from .scene import SceneConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BTIConfig:
    r: float = 80.0
    T: int = 3
    reset_between_steps: bool = False

    def __post_init__(self):
        if not 0 < self.r <= 100:
            raise ConfigError(f"bti.r must be in (0, 100], got {self.r}")
        if self.T < 1:
            raise ConfigError(f"bti.T must be >= 1, got {self.T}")


@dataclass(frozen=True)
class InferConfig:
    mode: str = "snn"
    count_mode: str = "dense"

    def __post_init__(self):
        if self.mode not in ("snn", "ann"):
            raise ConfigError(f"infer.mode must be snn or ann, got {self.mode!r}")
        if self.count_mode not in COUNT_MODES:
            raise ConfigError(f"infer.count_mode must be one of {COUNT_MODES}")


@dataclass(frozen=True)
class DataConfig:
    frames: int = 20


@dataclass(frozen=True)
class HeadSection:
    anchor_size: tuple[float, float, float] = AnchorSpec().size
    anchor_yaws: tuple[float, ...] = AnchorSpec().yaws
    anchor_z: float = AnchorSpec().z_center
    kernel: int = 3
    pos_iou: float = 0.5
    neg_iou: float = 0.35
    force_match: bool = True
    yaw_period: float = math.pi
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_delta: float = 1.0
    score_threshold: float = 0.3
    nms_iou: float = 0.1


@dataclass(frozen=True)
class BackboneSection:
    widths: tuple[int, int, int] = BackboneConfig().widths
    blocks_per_stage: int = 2
    kernel: int = 3
    bev_channels: tuple[int, int, int] = BackboneConfig().bev_channels


_SCENE_RANGES = ("x_range", "y_range", "z_range")

SECTIONS = {
    "grid": VoxelGridSpec,
    "scene": SceneConfig,
    "backbone": BackboneSection,
    "head": HeadSection,
    "lif": LIFParams,
    "bti": BTIConfig,
    "train": TrainConfig,
    "infer": InferConfig,
    "energy": EnergyModel,
    "data": DataConfig,
}


def _defaults(cls) -> dict:
    return {f.name: f.default for f in dataclasses.fields(cls)}


def _convert(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(p) if kind is not int else int(p) for p in parts)
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc


@dataclass
class RunConfig:
    values: dict[str, dict] = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        values: dict[str, dict] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if "." not in key:
                raise ConfigError(f"{source}:{lineno}: key {key!r} lacks a section prefix")
            section, name = key.split(".", 1)
            if section not in SECTIONS:
                raise ConfigError(f"{source}:{lineno}: unknown section {section!r}")
            defaults = _defaults(SECTIONS[section])
            if name not in defaults:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            values.setdefault(section, {})[name] = _convert(value, defaults[name], key)
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.parse(path.read_text(), str(path))

    def section(self, name: str) -> dict:
        out = _defaults(SECTIONS[name])
        out.update(self.values.get(name, {}))
        return out

    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            values = self.section(name)
            if name == "scene":
                values = dataclasses.asdict(self.scene())
            for key, value in values.items():
                if isinstance(value, tuple):
                    value = ", ".join(repr(v) for v in value)
                lines.append(f"{name}.{key} = {value}")
        return "\n".join(lines) + "\n"

    def validate(self) -> None:
        try:
            self.detector()
            self.scene()
            self.train()
            self.bti()
            self.infer()
            self.energy()
            self.scene().check_inside(self.grid())
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    # builders -------------------------------------------------------------

    def grid(self) -> VoxelGridSpec:
        return VoxelGridSpec(**self.section("grid"))

    def scene(self) -> SceneConfig:
        vals = self.section("scene")
        given = self.values.get("scene", {})
        grid = self.grid()
        for key in _SCENE_RANGES:
            if key not in given:
                vals[key] = getattr(grid, key)
        return SceneConfig(**vals)

    def detector(self) -> DetectorConfig:
        grid = self.grid()
        b = self.section("backbone")
        backbone = BackboneConfig(in_channels=grid.channels, grid_shape=tuple(grid.shape), **b)
        h = self.section("head")
        anchors = AnchorSpec(size=h.pop("anchor_size"), yaws=h.pop("anchor_yaws"), z_center=h.pop("anchor_z"))
        return DetectorConfig(grid, backbone, HeadConfig(anchors=anchors, **h), LIFParams(**self.section("lif")))

    def train(self) -> TrainConfig:
        vals = self.section("train")
        if "seed" not in self.values.get("train", {}):
            vals["seed"] = self.seed
        return TrainConfig(**vals)

    def bti(self) -> BTIConfig:
        return BTIConfig(**self.section("bti"))

    def infer(self) -> InferConfig:
        return InferConfig(**self.section("infer"))

    def energy(self) -> EnergyModel:
        return EnergyModel(**self.section("energy"))

    def data(self) -> DataConfig:
        return DataConfig(**self.section("data"))
