"""Run configuration: one JSON document, every field defaulted, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

from .conditioning import GuidanceConfig
from .denoiser import DenoiserConfig
from .sampler import SamplerConfig
from .tensor import ConfigError
from .trainer import TrainConfig


@dataclass(frozen=True)
class DatasetConfig:
    n_clips: int = 4096
    T_clip: int = 8
    H: int = 32
    W: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.n_clips < 1 or self.T_clip < 2:
            raise ConfigError("dataset needs n_clips >= 1 and T_clip >= 2")
        if self.H % 2 or self.W % 2 or self.H < 8 or self.W < 8:
            raise ConfigError(f"frame size must be even and >= 8, got {self.H}x{self.W}")


def _spatial_default() -> TrainConfig:
    return TrainConfig(stage="spatial_pretrain", steps=1500, batch_size=16)


def _temporal_default() -> TrainConfig:
    return TrainConfig(stage="temporal", steps=2000, batch_size=4)


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    spatial: TrainConfig = field(default_factory=_spatial_default)
    temporal: TrainConfig = field(default_factory=_temporal_default)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        d, m = self.dataset, self.model
        if (m.h, m.w) != (d.H // 2, d.W // 2):
            raise ConfigError(f"model latent size {m.h}x{m.w} does not match frames {d.H}x{d.W}")
        if d.T_clip > m.T_clip_max:
            raise ConfigError(f"T_clip={d.T_clip} exceeds model T_clip_max={m.T_clip_max}")
        if self.spatial.stage != "spatial_pretrain" or self.temporal.stage != "temporal":
            raise ConfigError("stage fields of the spatial/temporal sections are fixed")
        for tc in (self.spatial, self.temporal):
            if tc.T != m.num_train_timesteps:
                raise ConfigError(f"training T={tc.T} differs from model num_train_timesteps={m.num_train_timesteps}")

    def stage(self, name: str) -> TrainConfig:
        return {"spatial": self.spatial, "spatial_pretrain": self.spatial, "temporal": self.temporal}[name]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return _build(cls, doc, "config")

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object, got {type(doc).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in doc.items():
        sub = _dataclass_type(hints[name])
        if sub is not None and isinstance(value, dict):
            # a partial section overrides that section's own defaults
            default = _field_default(known[name])
            base = dataclasses.asdict(default) if is_dataclass(default) else {}
            kwargs[name] = _build(sub, {**base, **value}, f"{where}.{name}")
        elif sub is not None and value is not None:
            raise ConfigError(f"{where}.{name}: expected an object, got {type(value).__name__}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _field_default(f):
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None if f.default is dataclasses.MISSING else f.default


def _dataclass_type(tp):
    if is_dataclass(tp):
        return tp
    for arg in typing.get_args(tp):
        if is_dataclass(arg):
            return arg
    return None


__all__ = ["DatasetConfig", "RunConfig", "GuidanceConfig"]
