"""Configuration dataclasses, profiles and resolution.

Resolution order is defaults <- profile <- file <- ``--set`` overrides.  The
resolved config is hashed over its canonical JSON form so that the hash does
not depend on key order in the source file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    dt: float = 0.2
    robot_radius: float = 0.3
    v_max: float = 1.0
    w_max: float = 1.5
    cell_size: float = 0.25
    # extra clearance added to the robot radius when inflating the planning grid
    plan_margin: float = 0.2
    success_radius: float = 0.5
    timeout: float = 120.0
    lookahead: float = 0.6
    route_spacing: float = 0.5


@dataclass
class CameraConfig:
    n_rays: int = 96
    n_rows: int = 64
    fov: float = 1.5707963267948966
    max_range: float = 8.0
    height: float = 0.5

    def __post_init__(self):
        if self.n_rays < 8 or self.n_rows < 8:
            raise ConfigError("camera needs at least 8 rays and 8 rows")
        if not 0.0 < self.fov < 3.141592653589793:
            raise ConfigError("camera fov must lie in (0, pi)")


@dataclass
class DataConfig:
    random_frames: int = 20000
    teacher_frames: int = 12000
    random_families: list = field(default_factory=lambda: ["open", "corridor", "clutter"])
    teacher_families: list = field(default_factory=lambda: ["open", "corridor", "clutter"])
    random_max_steps: int = 150
    teacher_max_steps: int = 600
    train_ratio: float = 0.8
    seq_len: int = 5
    seed: int = 0


@dataclass
class ModelConfig:
    image_embed: int = 128
    speed_embed: int = 16
    action_embed: int = 64
    history_dim: int = 128
    state_dim: int = 64
    hidden_dim: int = 256
    policy_dim: int = 256
    token_dim: int = 128
    n_heads: int = 4
    route_embed: int = 64
    route_layers: int = 4
    route_len: int = 20
    path_len: int = 5
    n_classes: int = 7
    encoder_channels: list = field(default_factory=lambda: [16, 32, 64, 64])
    decoder_channels: int = 32
    semantic_base: list = field(default_factory=lambda: [4, 6])
    sigma_min: float = 0.01
    kl_alpha: float = 0.75
    # which KL side alpha weights: "prior" trains the predictor with alpha
    kl_alpha_side: str = "prior"
    share_action_encoder: bool = True


@dataclass
class LossWeights:
    action: float = 10.0
    path: float = 5.0
    semantic: float = 1.0
    rgb: float = 10.0
    kl: float = 0.001


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    pct_start: float = 0.2
    seed: int = 0
    max_batches_per_epoch: int = 0
    no_pretrain: bool = False
    no_semantic: bool = False
    mixed_precision: bool = False
    grad_clip: float = 10.0


@dataclass
class EvalConfig:
    mode: str = "recurrent"
    trials: int = 1
    wtt_mode: str = "success"
    horizon: int = 5
    easy_suite_size: int = 20
    narrow_suite_size: int = 50


@dataclass
class Config:
    sim: SimConfig = field(default_factory=SimConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


PROFILES: dict[str, dict[str, Any]] = {
    "desk": {},
    "paper": {
        "camera": {"n_rays": 512, "n_rows": 320},
        "data": {"random_frames": 160000, "teacher_frames": 100000},
        "model": {
            "image_embed": 768,
            "speed_embed": 32,
            "history_dim": 1024,
            "state_dim": 512,
            "hidden_dim": 1024,
            "policy_dim": 2048,
            "token_dim": 512,
            "n_heads": 8,
            "encoder_channels": [32, 64, 128, 256],
            "decoder_channels": 64,
            "semantic_base": [5, 8],
        },
        "train": {"epochs": 100, "batch_size": 32, "lr": 1e-5, "mixed_precision": True},
    },
}


@dataclass
class ResolvedConfig:
    config: Config
    hash: str

    def to_dict(self) -> dict:
        return config_to_dict(self.config)


def config_to_dict(cfg: Config) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: Config | dict) -> str:
    d = cfg if isinstance(cfg, dict) else config_to_dict(cfg)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _coerce(path: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"{path}: expected bool, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool):
            raise ConfigError(f"{path}: expected int, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
        raise ConfigError(f"{path}: expected int, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        raise ConfigError(f"{path}: expected float, got {value!r}")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{path}: expected str, got {value!r}")
    if isinstance(default, list):
        if isinstance(value, str):
            value = yaml.safe_load(value)
        if isinstance(value, (list, tuple)):
            return list(value)
        raise ConfigError(f"{path}: expected list, got {value!r}")
    return value


def _merge(d: dict, updates: dict, prefix: str = "") -> None:
    for key, value in updates.items():
        path = f"{prefix}{key}"
        if key not in d:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(d[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a section, got {value!r}")
            _merge(d[key], value, path + ".")
        else:
            d[key] = _coerce(path, value, d[key])


def _from_dict(d: dict) -> Config:
    classes = {
        "sim": SimConfig,
        "camera": CameraConfig,
        "data": DataConfig,
        "model": ModelConfig,
        "loss": LossWeights,
        "train": TrainConfig,
        "eval": EvalConfig,
    }
    try:
        return Config(**{name: classes[name](**d[name]) for name in classes})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# accepted spellings for top-level sections on the command line
SECTION_ALIASES = {"trainer": "train", "evalbench": "eval", "simcore": "sim", "datastore": "data", "weights": "loss"}


def parse_override(item: str) -> dict:
    """Turn ``a.b=value`` into ``{"a": {"b": value}}``."""
    if "=" not in item:
        raise ConfigError(f"override must look like key=value: {item!r}")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    parts[0] = SECTION_ALIASES.get(parts[0], parts[0])
    value = yaml.safe_load(raw)
    out: dict = {}
    cur = out
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = raw if value is None else value
    return out


def load_config(
    path: str | Path | None = None,
    overrides: list[str] | tuple[str, ...] = (),
    profile: str = "desk",
) -> ResolvedConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    d = config_to_dict(Config())
    _merge(d, PROFILES[profile])
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(d, loaded)
    for item in overrides:
        _merge(d, parse_override(item))
    cfg = _from_dict(d)
    return ResolvedConfig(cfg, config_hash(cfg))


def resolve(cfg: Config) -> ResolvedConfig:
    return ResolvedConfig(cfg, config_hash(cfg))


def with_overrides(cfg: Config, overrides: dict) -> Config:
    d = config_to_dict(cfg)
    _merge(d, overrides)
    return _from_dict(d)
