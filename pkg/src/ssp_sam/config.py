"""Configuration dataclasses and the defaults <- file <- overrides resolver."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ssp_sam.errors import ConfigError


@dataclass
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 8
    feat_dim: int = 128  # CLIP-side width
    prompt_dim: int = 256  # SAM-side width, also the decoder channel count
    max_tokens: int = 20
    vocab_size: int = 32
    decoder_depth: int = 2
    clip_layers: int = 2
    clip_heads: int = 4
    sam_layers: int = 2
    seed: int = 1234
    # warm-start of the frozen stand-ins; 0 epochs keeps the random init
    warmstart_samples: int = 3000
    clip_warmstart_epochs: int = 20
    sam_warmstart_epochs: int = 6
    warmstart_lr: float = 2e-3

    def validate(self) -> None:
        for name in ("image_size", "patch_size", "feat_dim", "prompt_dim", "max_tokens", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.patch_size & (self.patch_size - 1):
            raise ConfigError("patch_size must be a power of two (decoder upsamples by 2x stages)")
        if self.prompt_dim % 8:
            raise ConfigError("prompt_dim must be divisible by 8")
        if self.feat_dim % self.clip_heads:
            raise ConfigError("feat_dim must be divisible by clip_heads")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def sam_channels(self) -> int:
        return self.prompt_dim


@dataclass
class ModelConfig:
    n_res: int = 128
    encoder_layers: int = 6
    encoder_heads: int = 8
    adapter_heads: int = 8
    ffn_mult: int = 4
    ctx_dim: int | None = None  # None -> feat_dim
    pg_type: str = "encoder"  # "encoder" | "mlp"
    use_visual_adapter: bool = True
    use_linguistic_adapter: bool = True
    gaussian: bool = True
    alpha_init: float = 1.0
    delta_init: float = 0.5
    delta_min: float = 1e-3

    def validate(self) -> None:
        if self.n_res < 1:
            raise ConfigError("n_res must be >= 1")
        if self.encoder_layers < 1:
            raise ConfigError("encoder_layers must be >= 1")
        if self.pg_type not in ("encoder", "mlp"):
            raise ConfigError(f"unknown pg_type {self.pg_type!r}")


@dataclass
class LossConfig:
    lambda_focal: float = 4.0
    lambda_dice: float = 4.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    beta: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_eps: float = 1.0

    def validate(self) -> None:
        for name in ("lambda_focal", "lambda_dice", "lambda_l1", "lambda_giou"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.beta not in (0.0, 1.0):
            raise ConfigError("beta must be 0 or 1")


@dataclass
class TrainConfig:
    pretrain_epochs: int = 5
    finetune_epochs: int = 20
    decoder_freeze_epochs: int = 5
    lr: float = 1e-4
    warmup_epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    eval_batch_size: int = 64
    max_val_samples: int | None = None

    def validate(self) -> None:
        if self.decoder_freeze_epochs > self.finetune_epochs:
            raise ConfigError("decoder_freeze_epochs must not exceed finetune_epochs")
        for name in ("pretrain_epochs", "finetune_epochs"):
            epochs = getattr(self, name)
            if epochs < 0:
                raise ConfigError(f"{name} must be >= 0")
            if epochs and self.warmup_epochs > epochs:
                raise ConfigError(f"warmup_epochs exceeds {name}")
        if self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("batch_size and lr must be positive")


@dataclass
class DataConfig:
    root: str = "data/res"
    regime: str = "res"
    size: int = 5000
    seed: int = 0
    val_fraction: float = 0.1
    test_fraction: float = 0.1

    def validate(self) -> None:
        if self.regime not in ("res", "gres"):
            raise ConfigError(f"unknown regime {self.regime!r}")
        if not 0 <= self.val_fraction + self.test_fraction < 1:
            raise ConfigError("split fractions must sum below 1")


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/default"
    backbone_cache: str | None = None

    def validate(self) -> "RunConfig":
        self.backbone.validate()
        self.model.validate()
        self.loss.validate()
        self.train.validate()
        self.data.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        cfg = cls()
        apply_overrides(cfg, flatten(raw))
        return cfg


_SECTIONS = ("backbone", "model", "loss", "train", "data")


def flatten(raw: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for key, value in raw.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, dotted + "."))
        else:
            out[dotted] = value
    return out


def _coerce(current: Any, value: Any, key: str) -> Any:
    if isinstance(value, str) and not isinstance(current, str):
        # command-line values arrive as text
        try:
            value = yaml.safe_load(value)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value for {key}: {value!r}") from exc
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects a boolean, got {value!r}")
        return value
    if isinstance(current, int) and isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(current, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if current is None or isinstance(value, type(current)):
        return value
    raise ConfigError(f"{key} expects {type(current).__name__}, got {value!r}")


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Apply flat ``section.key`` overrides in place; unknown keys are rejected."""
    for key, value in overrides.items():
        parts = key.split(".")
        if len(parts) == 1 and parts[0] in ("out_dir", "backbone_cache"):
            setattr(cfg, parts[0], None if value is None else str(value))
            continue
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        section = getattr(cfg, parts[0])
        names = {f.name for f in dataclasses.fields(section)}
        if parts[1] not in names:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(section, parts[1])
        nullable = next(f for f in dataclasses.fields(section) if f.name == parts[1]).default is None
        if nullable and (value is None or value == "null"):
            setattr(section, parts[1], None)
            continue
        if nullable and current is None:
            value = yaml.safe_load(value) if isinstance(value, str) else value
        setattr(section, parts[1], _coerce(current, value, key))
    return cfg


def check_override_keys(overrides: dict[str, Any]) -> None:
    apply_overrides(RunConfig(), {k: v for k, v in overrides.items()})


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Resolve defaults, then the YAML/JSON file at ``path``, then ``overrides``."""
    cfg = RunConfig()
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        apply_overrides(cfg, flatten(raw))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()


def save_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
