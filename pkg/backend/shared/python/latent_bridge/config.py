"""
Run configuration: toy dimensions, training budgets, sampler defaults.

Configs load from YAML or TOML files and accept dotted ``key=value`` overrides.
A run is reproducible from (config, seed, dataset).
"""
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional

import toml
import yaml

from .errors import ConfigError
from .utils import compute_hash

logger = logging.getLogger(__name__)

# Environment variables
DEFAULT_OUTPUT_DIR = os.environ.get("LATENT_BRIDGE_OUTPUT_DIR", "runs/default")
DEFAULT_CONFIG_PATH = os.environ.get("LATENT_BRIDGE_CONFIG", "infrastructure/config.yaml")


class Phase(str, Enum):
    PRETRAIN_BACKBONE = "pretrain-backbone"
    TRAIN_BRANCH = "train-branch"
    TRAIN_CONTROLNET = "train-controlnet"


@dataclass(frozen=True)
class ModelDims:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 16
    encoder_mixing_layers: int = 2
    num_layers: int = 4
    num_heads: int = 2
    mlp_ratio: int = 4
    vocab_size: int = 64
    max_text_len: int = 16
    dm_width: int = 32
    dm_heads: int = 2
    dm_double_blocks: int = 6
    dm_single_blocks: int = 2
    cn_double_blocks: int = 4
    cn_single_blocks: int = 1
    downsample_width: int = 16

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_side * self.grid_side

    @property
    def latent_channels(self) -> int:
        return 3 * self.patch_size * self.patch_size

    def validate(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.grid_side % 2:
            raise ConfigError(f"grid side {self.grid_side} must be even for the control downsample")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.dm_width % self.dm_heads:
            raise ConfigError(f"dm_width {self.dm_width} not divisible by dm_heads {self.dm_heads}")
        if self.cn_double_blocks > self.dm_double_blocks or self.cn_single_blocks > self.dm_single_blocks:
            raise ConfigError("ControlNet cannot copy more blocks than the backbone has")


@dataclass(frozen=True)
class MaskRatioConfig:
    mean: float = 1.0
    std: float = 0.25
    low: float = 0.7
    high: float = 1.0


@dataclass(frozen=True)
class SamplerConfig:
    inference_steps: int = 28
    conditioning_scale: float = 0.7
    decode_steps: int = 64
    seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    learning_rate: float = 1e-3
    batch_size: int = 16
    pretrain_steps: int = 500
    branch_steps: int = 1000
    controlnet_steps: int = 500
    dataset_size: int = 512
    val_size: int = 64
    token_count: int = 0
    phase: str = Phase.PRETRAIN_BACKBONE.value
    log_every: int = 50
    dims: ModelDims = field(default_factory=ModelDims)
    mask_ratio: MaskRatioConfig = field(default_factory=MaskRatioConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        self.dims.validate()
        if self.phase not in {p.value for p in Phase}:
            raise ConfigError(f"Unknown phase '{self.phase}'")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        for name in ("pretrain_steps", "branch_steps", "controlnet_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.dataset_size <= 0 or self.val_size <= 0:
            raise ConfigError("dataset_size and val_size must be positive")
        if self.token_count < 0:
            raise ConfigError("token_count must be >= 0 (0 means the full grid)")

    @property
    def bridge_tokens(self) -> int:
        return self.token_count or self.dims.num_tokens

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "TrainConfig":
        data = self.to_dict()
        for dotted, value in overrides.items():
            _set_dotted(data, dotted, value)
        return config_from_dict(data)


_NESTED = {"dims": ModelDims, "mask_ratio": MaskRatioConfig, "sampler": SamplerConfig}


def _coerce(current: Any, value: Any) -> Any:
    """Coerce a CLI string onto the type of the existing field."""
    if not isinstance(value, str) or isinstance(current, str):
        return value
    if isinstance(current, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def _set_dotted(data: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = data
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"Unknown config section '{part}' in override '{dotted}'")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"Unknown config key '{dotted}'")
    node[parts[-1]] = _coerce(node[parts[-1]], value)


def _build(cls, data: Mapping[str, Any], where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"Unknown keys in {where}: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: Optional[Mapping[str, Any]]) -> TrainConfig:
    data = dict(data or {})
    nested = {}
    for key, cls in _NESTED.items():
        section = data.pop(key, None) or {}
        if not isinstance(section, Mapping):
            raise ConfigError(f"Config section '{key}' must be a mapping")
        nested[key] = _build(cls, section, key)
    try:
        return _build(TrainConfig, {**data, **nested}, "config")
    except TypeError as e:
        raise ConfigError(f"Invalid config: {e}") from e


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> TrainConfig:
    """
    Load a config file (.yaml/.yml via pyyaml, .toml via toml) and apply dotted overrides.

    Args:
        path: Config file path; None gives the built-in defaults
        overrides: Mapping of dotted keys to values (strings are coerced)

    Returns:
        Validated TrainConfig
    """
    data: Dict[str, Any] = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"Config file not found: {path}")
        text = p.read_text()
        if p.suffix in (".yaml", ".yml"):
            data = yaml.safe_load(text) or {}
        elif p.suffix == ".toml":
            data = toml.loads(text)
        else:
            raise ConfigError(f"Unsupported config format '{p.suffix}' (use .yaml or .toml)")
        logger.info(f"Loaded config from {path}")
    config = config_from_dict(data)
    if overrides:
        config = config.with_overrides(overrides)
    return config


def dump_config(config: TrainConfig, path: str) -> None:
    """Write a config snapshot; format follows the file extension."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    data = config.to_dict()
    if p.suffix == ".toml":
        p.write_text(toml.dumps(data))
    else:
        p.write_text(yaml.safe_dump(data, sort_keys=True))


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"Override '{pair}' is not of the form key=value")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def config_hash(config: TrainConfig, exclude: Iterable[str] = ()) -> str:
    """Hash of the config with the given dotted keys removed (used to prove sweeps hold all else fixed)."""
    data = config.to_dict()
    for dotted in exclude:
        parts = dotted.split(".")
        node = data
        for part in parts[:-1]:
            node = node.get(part, {})
        node.pop(parts[-1], None)
    return compute_hash(data)
