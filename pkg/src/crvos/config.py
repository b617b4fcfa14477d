"""Configuration dataclasses and the YAML config-file format.

A config file is a YAML mapping with up to three sections mirroring the
dataclasses below::

    model:
      variant: III
      encoder_width_scale: 0.125
    train:
      stage: finetune
      clip_len: 4
      resolution: [64, 64]
    data:
      kind: synthetic
      num_sequences: 8
      synthetic: {canvas: [64, 64], num_targets: 2, length: 12}
"""

from __future__ import annotations

import dataclasses
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
import yaml

VARIANTS = ("I", "II", "III", "IV")

# Per-variant flags: deconvolution refine modules, previous-mask specifier, full clue.
VARIANT_FLAGS = {
    "I": {"RM": True, "PM": False, "Clue": False},
    "II": {"RM": True, "PM": True, "Clue": False},
    "III": {"RM": True, "PM": False, "Clue": True},
    "IV": {"RM": False, "PM": False, "Clue": True},
}

DATA_ROOT_ENV = "CRVOS_DATA_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "III"
    # Multiplies ResNet-50-like stage widths (256, 512, 1024); 0.03125 gives 8/16/32.
    encoder_width_scale: float = 0.03125
    blocks_per_stage: tuple = (1, 1, 1)
    decoder_width: int = 16
    backbone_init: str = "random"  # or a path to a state-dict file for the encoder
    hard_clue_mask: bool = False
    combine: str = "sum"  # sum | last
    norm: str = "group"  # group | none
    seed: int = 0

    def __post_init__(self):
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        if self.variant not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.encoder_width_scale <= 0:
            raise ConfigError("model.encoder_width_scale must be positive")
        if self.combine not in ("sum", "last"):
            raise ConfigError(f"model.combine must be 'sum' or 'last', got {self.combine!r}")
        if self.norm not in ("group", "none"):
            raise ConfigError(f"model.norm must be 'group' or 'none', got {self.norm!r}")
        if len(self.blocks_per_stage) != 3 or min(self.blocks_per_stage) < 1:
            raise ConfigError("model.blocks_per_stage needs three positive counts")

    @property
    def specifier_channels(self) -> int:
        flags = VARIANT_FLAGS[self.variant]
        if flags["Clue"]:
            return 5
        if flags["PM"]:
            return 2
        return 0

    @property
    def use_deconv(self) -> bool:
        return VARIANT_FLAGS[self.variant]["RM"]

    @property
    def effective_combine(self) -> str:
        # The general refine module has no inter-module output skips.
        return self.combine if self.use_deconv else "last"

    @property
    def stage_widths(self) -> tuple:
        return tuple(max(1, int(round(w * self.encoder_width_scale))) for w in (256, 512, 1024))


STAGE_DEFAULTS = {
    "pretrain": dict(clip_len=8, resolution=(240, 432), lr=1e-4, epochs=100, augment=False),
    "finetune": dict(clip_len=16, resolution=(480, 864), lr=1e-5, epochs=500, augment=True),
}


@dataclass
class TrainConfig:
    stage: str = "finetune"
    clip_len: int = 16
    resolution: tuple = (480, 864)
    lr: float = 1e-5
    epochs: int = 500
    augment: bool = True
    seed: int = 0
    batch_size: int = 1
    clips_per_epoch: Optional[int] = None  # default: number of sequences
    backprop_through_clue: bool = False
    checkpoint_every: int = 0  # epochs; 0 writes only the final checkpoint

    def __post_init__(self):
        self.resolution = tuple(int(v) for v in self.resolution)
        if self.stage not in STAGE_DEFAULTS:
            raise ConfigError(f"train.stage must be pretrain or finetune, got {self.stage!r}")
        if self.clip_len < 2:
            raise ConfigError("train.clip_len must be >= 2")
        if len(self.resolution) != 2 or any(v <= 0 or v % 16 for v in self.resolution):
            raise ConfigError(f"train.resolution must be positive multiples of 16, got {self.resolution}")
        if self.augment and self.stage != "finetune":
            raise ConfigError("train.augment is only allowed in the finetune stage")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("train.epochs must be >= 0 and train.batch_size >= 1")

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainConfig":
        """Stage defaults (clip length, resolution, lr, epochs, augmentation) plus overrides."""
        if stage not in STAGE_DEFAULTS:
            raise ConfigError(f"unknown stage {stage!r}")
        kwargs = dict(STAGE_DEFAULTS[stage], stage=stage)
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass
class DataConfig:
    kind: str = "synthetic"  # synthetic | davis
    root: Optional[str] = None
    year: int = 2017
    num_sequences: int = 8
    synthetic: dict = field(default_factory=dict)
    eval_root: Optional[str] = None  # davis: defaults to root
    eval_num_sequences: int = 8  # synthetic held-out split
    eval_seed_offset: int = 100_000

    def __post_init__(self):
        if self.kind not in ("synthetic", "davis"):
            raise ConfigError(f"data.kind must be synthetic or davis, got {self.kind!r}")
        if self.year not in (2016, 2017):
            raise ConfigError("data.year must be 2016 or 2017")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


def _build(cls, section: Optional[dict], name: str):
    section = dict(section or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"bad '{name}' section: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw or {})
    unknown = set(raw) - {"model", "train", "data"}
    if unknown:
        raise ConfigError(f"unknown top-level config sections: {sorted(unknown)}")
    train = raw.get("train") or {}
    if "stage" in train:
        train = dict(STAGE_DEFAULTS.get(train["stage"], {}), **train)
    return RunConfig(
        model=_build(ModelConfig, raw.get("model"), "model"),
        train=_build(TrainConfig, train, "train"),
        data=_build(DataConfig, raw.get("data"), "data"),
    )


def load_config(path) -> RunConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw or {})


def to_plain(obj: Any) -> Any:
    """Dataclass -> YAML/JSON-safe nested dict (tuples become lists)."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_plain(v) for k, v in obj.items()}
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dump_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(to_plain(cfg), fh, sort_keys=False)


def default_data_root() -> Optional[str]:
    return os.environ.get(DATA_ROOT_ENV)


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
