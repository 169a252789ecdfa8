"""Run configuration files (YAML or JSON) and flag layering.

Schema, every key optional::

    model:
      backbone: desk            # name in zoo.BACKBONES; explicit lists below override it
      blocks: [1, 1, 1]
      channels: [8, 16, 32]
      spatial: [28, 14, 7]      # square sizes, or [[H, W], ...]
      policy: adaptive          # adaptive | every-block | last-stage | per-stage
      steam:                    # null or false trains the plain backbone
        d: 8
        heads: 4
        arrangement: ca-sa      # ca-sa | sa-ca | ca+sa
        m: 7
        channel_hops: 1
        edge_drop: true
        inter_activation: tanh  # tanh | relu | sigmoid | none
        channel_pool: avg       # avg | max | avg+max
        spatial_pool: avg
        sqrt_scaling: false
        include_self_loops: false
    train:
      epochs: 10
      lr: 0.05
      batch_size: 32
      seed: 0
      train_size: 5000          # stratified subsets; null keeps the whole split
      val_size: 1000
      hflip: false
    data:
      format: idx               # idx | cifar
      dir: null                 # falls back to $STEAM_DATA_DIR

Values from the file are overridden by command-line flags.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .errors import ConfigError
from .unit import SteamConfig
from .zoo import BACKBONES, PLACEMENT_POLICIES, StageSpec


@dataclass(frozen=True)
class ModelSettings:
    backbone: str = "desk"
    blocks: tuple | None = None
    channels: tuple | None = None
    spatial: tuple | None = None
    policy: str = "adaptive"
    steam: SteamConfig | None = field(default_factory=SteamConfig)

    def stage_spec(self) -> StageSpec:
        base = BACKBONES.get(self.backbone)
        if base is None and self.blocks is None:
            raise ConfigError(f"unknown backbone {self.backbone!r}; choose from {sorted(BACKBONES)}")
        blocks = self.blocks or base.blocks_per_stage
        channels = self.channels or (base.channels_per_stage if base else ())
        spatial = parse_spatial(self.spatial) if self.spatial else (base.spatial_per_stage if base else ())
        name = self.backbone if base is not None and not self.blocks else "custom"
        return StageSpec(tuple(blocks), tuple(channels), tuple(spatial), name)


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 10
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0
    train_size: int | None = 5000
    val_size: int | None = 1000
    hflip: bool = False


@dataclass(frozen=True)
class DataSettings:
    format: str = "idx"
    dir: str | None = None


@dataclass(frozen=True)
class RunConfig:
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: DataSettings = field(default_factory=DataSettings)

    def to_dict(self) -> dict:
        m = self.model
        return {"model": {"backbone": m.backbone, "blocks": _list(m.blocks), "channels": _list(m.channels),
                          "spatial": _list(m.spatial), "policy": m.policy,
                          "steam": m.steam.to_dict() if m.steam else None},
                "train": asdict(self.train), "data": asdict(self.data)}


def _list(v):
    return None if v is None else [list(x) if isinstance(x, (tuple, list)) else x for x in v]


def parse_spatial(items) -> tuple:
    out = []
    for it in items:
        if isinstance(it, (int, float)):
            out.append((int(it), int(it)))
        elif isinstance(it, str):
            h, _, w = it.lower().partition("x")
            out.append((int(h), int(w or h)))
        else:
            h, w = it
            out.append((int(h), int(w)))
    return tuple(out)


def _pick(cls, raw: dict, where: str) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return dict(raw)


def from_mapping(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    extra = sorted(set(raw) - {"model", "train", "data"})
    if extra:
        raise ConfigError(f"unknown top-level key(s): {', '.join(extra)}")
    model = _pick(ModelSettings, raw.get("model"), "model")
    if "steam" in model:
        s = model["steam"]
        model["steam"] = None if s in (None, False) else SteamConfig(**_pick(SteamConfig, s, "model.steam"))
    for key in ("blocks", "channels", "spatial"):
        if model.get(key) is not None:
            model[key] = tuple(model[key])
    cfg = RunConfig(ModelSettings(**model), TrainSettings(**_pick(TrainSettings, raw.get("train"), "train")),
                    DataSettings(**_pick(DataSettings, raw.get("data"), "data")))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.model.policy not in PLACEMENT_POLICIES:
        raise ConfigError(f"policy must be one of {PLACEMENT_POLICIES}")
    t = cfg.train
    if t.epochs < 1 or t.batch_size < 1 or t.lr < 0:
        raise ConfigError("epochs and batch_size must be positive and lr non-negative")
    if cfg.data.format not in ("idx", "cifar"):
        raise ConfigError(f"data.format must be idx or cifar, got {cfg.data.format!r}")


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (ValueError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return from_mapping(raw or {})


def override(cfg: RunConfig, **sections) -> RunConfig:
    """``override(cfg, train={"epochs": 2})``; ``None`` values are ignored."""
    out = cfg
    for name, values in sections.items():
        values = {k: v for k, v in values.items() if v is not None}
        if values:
            out = replace(out, **{name: replace(getattr(out, name), **values)})
    validate(out)
    return out
