"""Model and training configuration, plus the ``key=value`` text both are stored in."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from math import prod
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    in_channels: int = 6
    window_length: int = 200
    stage_channels: tuple[int, ...] = (64, 128, 192, 256)
    blocks_per_stage: tuple[int, ...] = (2, 2, 2, 2)
    stage_strides: tuple[int, ...] = (1, 2, 2, 2)
    tssa_e: float = 50.0
    alpha_mode: str = "sqrt"  # "sqrt" -> sqrt(channels), otherwise a positive number
    head_hidden: tuple[int, ...] = (512,)
    out_dim: int = 2
    norm_enabled: bool = True
    gate_activation: str = "sigmoid"
    block_activation: str = "relu"
    expansion_ratio: float = 1.0
    gcu_prenorm: bool = False
    imu_frame: str = "world"
    seed: int = 0

    def __post_init__(self):
        for name in ("stage_channels", "blocks_per_stage", "stage_strides", "head_hidden"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        n = len(self.stage_channels)
        if not (len(self.blocks_per_stage) == len(self.stage_strides) == n) or n == 0:
            raise ConfigError("stage_channels, blocks_per_stage and stage_strides need equal, non-zero length")
        if any(c < 1 for c in self.stage_channels) or self.in_channels < 1 or self.out_dim < 1:
            raise ConfigError("channel counts must be positive")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ConfigError("every stage needs at least one block")
        if any(s not in (1, 2) for s in self.stage_strides):
            raise ConfigError("stage strides must be 1 or 2")
        if self.window_length % prod(self.stage_strides):
            raise ConfigError(
                f"window_length {self.window_length} not divisible by total stride {prod(self.stage_strides)}")
        if not 0 < self.tssa_e <= 100:
            raise ConfigError("tssa_e must lie in (0, 100]")
        if self.alpha_mode != "sqrt":
            try:
                ok = float(self.alpha_mode) > 0
            except ValueError:
                ok = False
            if not ok:
                raise ConfigError(f"alpha_mode must be 'sqrt' or a positive number, got {self.alpha_mode!r}")
        if self.expansion_ratio <= 0:
            raise ConfigError("expansion_ratio must be positive")
        if self.imu_frame not in ("world", "body"):
            raise ConfigError("imu_frame must be 'world' or 'body'")

    def alpha_for(self, channels: int) -> float:
        return channels ** 0.5 if self.alpha_mode == "sqrt" else float(self.alpha_mode)

    def stage_lengths(self, L: int | None = None) -> list[int]:
        L = self.window_length if L is None else L
        out = []
        for s in self.stage_strides:
            L = (L - 1) // s + 1
            out.append(L)
        return out


@dataclass
class TrainConfig:
    initial_lr: float = 1e-4
    max_epochs: int = 100
    lr_floor: float = 1e-6
    factor: float = 0.1
    patience: int = 10
    batch_size: int = 128
    window_stride: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_floor < self.initial_lr:
            raise ConfigError("need 0 < lr_floor < initial_lr")
        if not 0 < self.factor < 1:
            raise ConfigError("factor must be in (0, 1)")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1 or self.window_stride < 1:
            raise ConfigError("max_epochs, batch_size, patience and window_stride must be positive")


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, default: Any, key: str) -> Any:
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def to_text(*configs, extra: dict[str, Any] | None = None) -> str:
    lines = [f"{k}={_format(v)}" for k, v in (extra or {}).items()]
    for cfg in configs:
        prefix = "train." if isinstance(cfg, TrainConfig) else ""
        lines += [f"{prefix}{f.name}={_format(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def parse_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build(pairs: dict[str, str], allow_extra: tuple[str, ...] = ()) -> tuple[ModelConfig, TrainConfig]:
    """Split parsed pairs into model and ``train.``-prefixed training settings."""
    model_defaults = {f.name: getattr(ModelConfig(), f.name) for f in fields(ModelConfig)}
    train_defaults = {f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig)}
    mkw, tkw = {}, {}
    for key, raw in pairs.items():
        if key.startswith("train.") and key[6:] in train_defaults:
            tkw[key[6:]] = _parse(raw, train_defaults[key[6:]], key)
        elif key in model_defaults:
            mkw[key] = _parse(raw, model_defaults[key], key)
        elif key not in allow_extra:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return ModelConfig(**mkw), TrainConfig(**tkw)
    except TypeError as exc:  # pragma: no cover - guarded by the key checks above
        raise ConfigError(str(exc)) from None


def replace(cfg, **changes):
    return dataclasses.replace(cfg, **changes)
