"""JSON configuration with strict key checking."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .coarsenet import CoarseConfig
from .raynet import RayConfig
from .scenegen import SceneConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.0005
    coarse_lr: float | None = None      # defaults to ``lr``
    decay: float = 0.9
    decay_every: int = 2                # epochs
    weights: tuple = (0.1, 0.8, 0.1)    # w_s, w_l, w_sl
    ray_batch: int = 512
    coarse_epochs: int = 60
    ray_epochs: int = 60
    seed: int = 0
    joint: bool = False                 # let the ray loss update the coarse stage
    coarse_noise_std: float = 0.0
    references: str = "manifest"        # "manifest" or "all" (every view takes a turn)
    checkpoint_every: int = 10
    dtype: str = "float32"
    data_dir: str | None = None         # dataset root; generated under the run directory when unset


@dataclass
class Config:
    data: SceneConfig = field(default_factory=SceneConfig)
    coarse: CoarseConfig = field(default_factory=CoarseConfig)
    ray: RayConfig = field(default_factory=RayConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "Config":
        r, t, c, d = self.ray, self.train, self.coarse, self.data
        if r.samples < 2:
            raise ConfigError("ray.samples: K ≥ 2 required")
        if r.delta <= 0:
            raise ConfigError("ray.delta: must be positive")
        if t.lr <= 0 or (t.coarse_lr is not None and t.coarse_lr <= 0):
            raise ConfigError("train.lr: learning rates must be positive")
        if not 0 < t.decay <= 1:
            raise ConfigError("train.decay: must lie in (0, 1]")
        if t.decay_every < 1:
            raise ConfigError("train.decay_every: must be >= 1")
        if len(t.weights) != 3 or any(w < 0 for w in t.weights):
            raise ConfigError("train.weights: need three non-negative loss weights")
        if t.ray_batch < 1:
            raise ConfigError("train.ray_batch: must be >= 1")
        if t.coarse_epochs < 0 or t.ray_epochs < 0:
            raise ConfigError("train.coarse_epochs/ray_epochs: must be >= 0")
        if t.coarse_noise_std < 0:
            raise ConfigError("train.coarse_noise_std: must be >= 0")
        if t.references not in ("manifest", "all"):
            raise ConfigError("train.references: expected 'manifest' or 'all'")
        if t.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype: expected 'float32' or 'float64'")
        if c.num_planes < 2:
            raise ConfigError("coarse.num_planes: D ≥ 2 required")
        if not 0 < c.volume_scale <= 1:
            raise ConfigError("coarse.volume_scale: must lie in (0, 1]")
        if len(c.widths) != 3 or len(c.volume_widths) != 3:
            raise ConfigError("coarse.widths/volume_widths: need three encoder widths")
        if c.channels != r.channels or c.volume_channels != r.volume_channels:
            raise ConfigError("ray.channels/volume_channels: must match the coarse stage")
        if d.num_views < 2:
            raise ConfigError("data.num_views: need at least 2 views")
        lo, hi = d.depth_range
        if not 0 < lo < hi:
            raise ConfigError("data.depth_range: need 0 < min < max")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{where}.{key}'" if where else f"unknown config key '{key}'")
        f = known[key]
        if dataclasses.is_dataclass(f.default_factory if f.default_factory is not dataclasses.MISSING else None):
            value = _build(f.default_factory, value, f"{where}.{key}" if where else key)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def from_dict(raw: dict) -> Config:
    return _build(Config, raw, "").validate()


def load_config(path) -> Config:
    """Read a JSON config; an empty file yields the defaults."""
    text = Path(path).read_text() if path is not None else ""
    if not text.strip():
        return Config().validate()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(raw)


def save_config(cfg: Config, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
