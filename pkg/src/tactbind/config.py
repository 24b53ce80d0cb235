"""Flat ``key=value`` run configuration shared by the CLI and the ablation runner."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .data import MIN_LENGTH
from .decoder import ModelConfig
from .encoders import EncoderConfig
from .fusion import GROUPS, VARIANTS
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_trajectories: int = 200
    length: int = 12
    grid: int = 8
    T: int = 4
    test_fraction: float = 0.1
    pretrain_epochs: int = 20
    pretrain_lr: float = 1e-3
    finetune_epochs: int = 30
    finetune_lr: float = 3e-4
    batch_size: int = 16
    clip_norm: float = 1.0
    feature_dim: int = 64
    lstm_hidden: int = 64
    out_dim: int = 64
    temperature: float = 0.1
    n_layers: int = 8
    width: int = 64
    heads: int = 4
    ff_mult: int = 4
    max_positions: int = 16
    max_len: int = 6
    variant: str = "aware"
    group: str = "tactile_and_vision"
    freeze_encoder: bool = True
    freeze_gates: bool = False

    def __post_init__(self):
        if self.n_trajectories < 1:
            raise ConfigError("n_trajectories must be >= 1")
        if self.length < MIN_LENGTH:
            raise ConfigError(f"length must be >= {MIN_LENGTH}")
        if not 1 <= self.T <= self.length:
            raise ConfigError(f"T={self.T} must lie in [1, length={self.length}]")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        for name in ("pretrain_lr", "finetune_lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.grid < 1 or self.max_len < 1:
            raise ConfigError("batch_size, grid and max_len must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.group not in GROUPS:
            raise ConfigError(f"group must be one of {GROUPS}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")

    # -------------------------------------------------------------- text form

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def with_updates(self, updates: Mapping[str, Any]) -> "RunConfig":
        """Apply string or typed overrides; unknown keys are rejected."""
        types = {f.name: f.type for f in fields(self)}
        parsed = {}
        for key, value in updates.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            parsed[key] = _coerce(key, types[key], value)
        try:
            return replace(self, **parsed)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def to_text(self) -> str:
        return "".join(f"{f.name}={_render(getattr(self, f.name))}\n" for f in fields(self))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    # -------------------------------------------------------------- module configs

    def encoder_config(self, kind: str, n_classes: int) -> EncoderConfig:
        return EncoderConfig(kind=kind, grid=(self.grid, self.grid), feature_dim=self.feature_dim,
                             lstm_hidden=self.lstm_hidden, out_dim=self.out_dim, n_classes=n_classes,
                             temperature=self.temperature)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(n_layers=self.n_layers, width=self.width, heads=self.heads, vocab_size=vocab_size,
                           max_positions=self.max_positions, ff_mult=self.ff_mult)

    def pretrain_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(stage="pretrain", epochs=self.pretrain_epochs, batch_size=self.batch_size,
                           learning_rate=self.pretrain_lr, seed=self.seed if seed is None else seed,
                           clip_norm=self.clip_norm)

    def finetune_config(self, seed: int | None = None, freeze_gates: bool | None = None) -> TrainConfig:
        return TrainConfig(stage="finetune", epochs=self.finetune_epochs, batch_size=self.batch_size,
                           learning_rate=self.finetune_lr, seed=self.seed if seed is None else seed,
                           clip_norm=self.clip_norm, freeze_encoder=self.freeze_encoder,
                           freeze_gates=self.freeze_gates if freeze_gates is None else freeze_gates)


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, typ: str, value: Any) -> Any:
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if typ == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {typ}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then the file (if any), then ``overrides``."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file {p} not found")
        cfg = cfg.with_updates(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    return cfg.with_updates(overrides or {})
