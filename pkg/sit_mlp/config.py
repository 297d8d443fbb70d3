"""
Model / training configuration.

Both configs are frozen dataclasses validated at construction, loaded from
and dumped to a small TOML file:

    joints = 25            # bare keys are model keys
    [model]
    base_channels = 48
    [train]
    epochs = 90
"""

import math
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import ConfigError

VARIANTS = ("full", "stgu_only", "mstc_only")
SHARED_INITS = ("identity", "binary_graph")
DTYPES = ("float32", "float64")
HALVING_BLOCKS = (1, 3)


@dataclass(frozen=True)
class AblationFlags:
    """STGU component toggles"""
    disable_specific: bool = False
    disable_generic: bool = False
    pool_temporal_attention: bool = False
    pool_channel_attention: bool = False

    def __post_init__(self):
        if self.disable_specific and self.disable_generic:
            raise ConfigError("Cannot disable both the sample-specific and sample-generic paths")

    def active(self) -> List[str]:
        return [f.name for f in fields(self) if getattr(self, f.name)]


@dataclass(frozen=True)
class ModelConfig:
    joints: int = 25
    frames: int = 64
    coord_dim: int = 3
    persons: int = 2
    base_channels: int = 48
    heads: int = 8
    num_classes: int = 60
    strides: Tuple[int, ...] = (1, 2, 1, 2, 1)
    channel_multipliers: Tuple[int, ...] = (1, 2, 2, 4, 4)
    mstc_kernels: Tuple[Tuple[int, int], ...] = ((5, 1), (5, 2))
    mstc_pool_kernel: int = 3
    input_norm: bool = True
    spatial_bias: bool = False
    variant: str = "full"
    shared_init: str = "identity"
    disable_specific: bool = False
    disable_generic: bool = False
    pool_temporal_attention: bool = False
    pool_channel_attention: bool = False
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        # TOML hands back lists
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        object.__setattr__(self, "mstc_kernels", tuple((int(k), int(d)) for k, d in self.mstc_kernels))
        self.validate()

    @classmethod
    def micro(cls, **overrides) -> "ModelConfig":
        """Desk-scale config: V=4, T=8, C0=6, H=2, 2 classes, 64-bit"""
        base = dict(joints=4, frames=8, base_channels=6, heads=2, num_classes=2, dtype="float64")
        base.update(overrides)
        return cls(**base)

    def validate(self):
        for name in ("joints", "frames", "coord_dim", "persons", "base_channels", "heads", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"Unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.shared_init not in SHARED_INITS:
            raise ConfigError(f"Unknown shared_init {self.shared_init!r}; expected one of {SHARED_INITS}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"Unknown dtype {self.dtype!r}; expected one of {DTYPES}")
        if len(self.strides) != 5 or len(self.channel_multipliers) != 5:
            raise ConfigError("strides and channel_multipliers need exactly 5 entries (one per basic block)")
        for i, s in enumerate(self.strides):
            if s not in (1, 2) or (s == 2 and i not in HALVING_BLOCKS):
                raise ConfigError(f"Stride {s} at block {i + 1}; only blocks 2 and 4 may halve time")
        if self.frames % math.prod(self.strides):
            raise ConfigError(f"frames={self.frames} not divisible by the temporal reduction {math.prod(self.strides)}")
        for k, d in self.mstc_kernels:
            if k < 1 or k % 2 == 0 or d < 1:
                raise ConfigError(f"MS-TC branch needs an odd kernel and dilation >= 1, got ({k}, {d})")
        if self.mstc_pool_kernel < 1 or self.mstc_pool_kernel % 2 == 0:
            raise ConfigError(f"mstc_pool_kernel must be odd and >= 1, got {self.mstc_pool_kernel}")
        for width in self.widths:
            if self.uses_mstc and width % self.mstc_branches:
                raise ConfigError(f"Block width {width} not divisible by {self.mstc_branches} MS-TC branches")
            if self.uses_stgu and width % self.heads:
                raise ConfigError(f"Block width {width} not divisible by {self.heads} heads")
        self.ablation  # both-paths check

    @property
    def widths(self) -> List[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    @property
    def mstc_branches(self) -> int:
        return len(self.mstc_kernels) + 1

    @property
    def uses_stgu(self) -> bool:
        return self.variant in ("full", "stgu_only")

    @property
    def uses_mstc(self) -> bool:
        return self.variant in ("full", "mstc_only")

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    @property
    def ablation(self) -> AblationFlags:
        return AblationFlags(
            disable_specific=self.disable_specific,
            disable_generic=self.disable_generic,
            pool_temporal_attention=self.pool_temporal_attention,
            pool_channel_attention=self.pool_channel_attention,
        )

    def block_plan(self) -> List[Tuple[int, int, int]]:
        """(c_in, c_out, stride) per basic block"""
        widths = self.widths
        ins = [self.base_channels] + widths[:-1]
        return list(zip(ins, widths, self.strides))

    def to_dict(self) -> Dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["strides"] = list(self.strides)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["mstc_kernels"] = [list(kd) for kd in self.mstc_kernels]
        return d


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 90
    warmup_epochs: int = 5
    base_lr: float = 0.1
    end_lr: float = 0.0001
    momentum: float = 0.9
    weight_decay: float = 0.0004
    batch_size: int = 64
    seed: int = 0
    log_every: int = 1
    workers: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs={self.warmup_epochs} must lie in [0, epochs={self.epochs})")
        if not self.base_lr > self.end_lr > 0:
            raise ConfigError(f"Need base_lr > end_lr > 0, got {self.base_lr}, {self.end_lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.log_every < 1 or self.workers < 0:
            raise ConfigError("log_every must be >= 1 and workers >= 0")

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _build(cls, values: Dict[str, Any], table: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown key(s) in [{table}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"Bad value in [{table}]: {e}") from None


def config_from_dict(data: Dict[str, Any]) -> Tuple[ModelConfig, TrainConfig]:
    data = dict(data)
    model_values = dict(data.pop("model", {}) or {})
    train_values = dict(data.pop("train", {}) or {})
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(f"Unknown table [{key}]")
        model_values.setdefault(key, value)
    return _build(ModelConfig, model_values, "model"), _build(TrainConfig, train_values, "train")


def load_config(path: Union[str, Path]) -> Tuple[ModelConfig, TrainConfig]:
    """Read a TOML config; missing keys keep their defaults"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with path.open("rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Invalid TOML in {path}: {e}") from None
    return config_from_dict(data)


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"Cannot write {type(value).__name__} to TOML")


def dump_config(model_cfg: ModelConfig, train_cfg: Optional[TrainConfig] = None) -> str:
    """TOML text that load_config reads back to equal configs"""
    train_cfg = train_cfg or TrainConfig()
    lines = ["[model]"]
    lines += [f"{k} = {_toml_value(v)}" for k, v in model_cfg.to_dict().items()]
    lines += ["", "[train]"]
    lines += [f"{k} = {_toml_value(v)}" for k, v in train_cfg.to_dict().items()]
    return "\n".join(lines) + "\n"


def with_overrides(cfg, **overrides):
    """dataclasses.replace that drops None overrides (CLI flags left unset)"""
    values = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **values) if values else cfg
