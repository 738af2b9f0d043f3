#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
Run configuration: pydantic models for the model, pretraining and
fine-tuning settings, the named profiles and the INI config file loader.

Values resolve in this order, later winning: profile defaults, config file,
explicit overrides (usually command line flags).

A config file uses one section per model, with JSON literal values::

    [model.cnn]
    channels = [8, 16]
    num_stages = 2

    [train]
    mask_ratio = 0.5
    precision = float64
"""

import configparser
import copy
import json
import logging
from enum import Enum
from typing import Any
from typing import Dict
from typing import List
from typing import Mapping
from typing import Optional

import numpy as np
from pydantic import BaseModel
from pydantic import Extra
from pydantic import Field
from pydantic import ValidationError
from pydantic import root_validator
from pydantic import validator

from hybridmask.errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_PROFILE = "desk"

SECTIONS = {
    "model": ("model",),
    "model.cnn": ("model", "cnn"),
    "model.vit": ("model", "vit"),
    "model.decoder": ("model", "decoder"),
    "train": ("train",),
    "finetune": ("finetune",),
}


class Precision(str, Enum):
    """Floating point precision of parameters and activations."""

    FLOAT32 = "float32"
    FLOAT64 = "float64"


class SkipMode(str, Enum):
    """How encoder features enter the decoder below the junction."""

    CONCAT = "concat"
    ADD = "add"
    NONE = "none"


class CnnConfig(BaseModel):
    """The sparse CNN encoder stages."""

    class Config:
        extra = Extra.forbid

    num_stages: int = Field(4, description="Number of CNN stages N, the last one is the junction.")
    channels: List[int] = Field(
        [16, 32, 64, 128], description="Channel width of each stage, strictly increasing."
    )
    blocks: int = Field(1, description="Sparse blocks per stage.")
    kernel_size: int = Field(3, description="Odd extent of the depthwise convolution kernel.")
    expansion: int = Field(2, description="Inverted bottleneck expansion ratio.")
    stem_stride: int = Field(
        2, description="Pooling stride between the stem convolution and stage 1, 1 for none."
    )
    norm_groups: Optional[int] = Field(
        None, description="Groups of the active-site normalization, default one per channel."
    )

    @validator("num_stages")
    def at_least_two_stages(cls, value):
        if value < 2:
            raise ValueError(f"num_stages must be >= 2, got {value}")
        return value

    @validator("kernel_size")
    def odd_kernel(cls, value):
        if value < 1 or value % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd number, got {value}")
        return value

    @validator("blocks", "expansion", "stem_stride")
    def positive(cls, value, field):
        if value < 1:
            raise ValueError(f"{field.name} must be >= 1, got {value}")
        return value

    @root_validator(skip_on_failure=True)
    def channels_match_stages(cls, values):
        channels = values["channels"]
        if len(channels) != values["num_stages"]:
            raise ValueError(
                f"channels lists {len(channels)} widths for {values['num_stages']} stages"
            )
        if channels[0] < 1 or any(b <= a for a, b in zip(channels, channels[1:])):
            raise ValueError(f"channels must be positive and strictly increasing, got {channels}")
        groups = values.get("norm_groups")
        if groups is not None and (groups < 1 or any(c % groups for c in channels)):
            raise ValueError(f"norm_groups {groups} must divide every stage width {channels}")
        return values

    @property
    def stage_strides(self) -> List[int]:
        """The stem stride then a halving per stage transition."""
        return [self.stem_stride] + [2] * (self.num_stages - 1)

    @property
    def cumulative_stride(self) -> int:
        return int(np.prod(self.stage_strides))


class VitConfig(BaseModel):
    """The transformer encoder at the junction."""

    class Config:
        extra = Extra.forbid

    embed_dim: int = Field(192, description="Token embedding width E.")
    depth: int = Field(4, description="Number of transformer blocks.")
    heads: int = Field(4, description="Attention heads; must divide embed_dim.")
    mlp_ratio: int = Field(4, description="Hidden width of the MLP as a multiple of embed_dim.")

    @root_validator(skip_on_failure=True)
    def heads_divide_embed(cls, values):
        embed, heads = values["embed_dim"], values["heads"]
        if embed < 1 or heads < 1 or embed % heads:
            raise ValueError(f"heads {heads} must divide embed_dim {embed}")
        if values["depth"] < 0 or values["mlp_ratio"] < 1:
            raise ValueError("depth must be >= 0 and mlp_ratio >= 1")
        return values


class DecoderConfig(BaseModel):
    """The hierarchical decoder."""

    class Config:
        extra = Extra.forbid

    widths: Optional[List[int]] = Field(
        None, description="Projection width of each scale, default mirrors the encoder channels."
    )
    skip: SkipMode = Field(SkipMode.CONCAT, description="Skip connection fusion: concat, add or none.")

    @validator("widths")
    def positive_widths(cls, value):
        if value is not None and any(w < 1 for w in value):
            raise ValueError(f"decoder widths must be positive, got {value}")
        return value


class ModelConfig(BaseModel):
    """The complete hybrid encoder-decoder."""

    class Config:
        extra = Extra.forbid

    cnn: CnnConfig = Field(default_factory=CnnConfig)
    vit: VitConfig = Field(default_factory=VitConfig)
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)

    @root_validator(skip_on_failure=True)
    def decoder_matches_encoder(cls, values):
        widths = values["decoder"].widths
        stages = values["cnn"].num_stages
        if widths is not None and len(widths) != stages:
            raise ValueError(f"decoder widths list {len(widths)} scales for {stages} stages")
        return values

    @property
    def decoder_widths(self) -> List[int]:
        return list(self.decoder.widths or self.cnn.channels)


class OptimConfig(BaseModel):
    """Settings shared by the pretraining and fine-tuning loops."""

    class Config:
        extra = Extra.forbid

    lr: float = Field(1e-4, description="Peak learning rate of the cosine schedule.")
    lr_min: float = Field(1e-6, description="Final learning rate of the cosine schedule.")
    betas: List[float] = Field([0.9, 0.95], description="AdamW moment decay rates.")
    weight_decay: float = Field(0.05, description="Decoupled weight decay of matrices and kernels.")
    batch_size: int = Field(2, description="Volumes per optimizer step.")
    crop: List[int] = Field([32, 32, 32], description="Crop extents [D, H, W].")
    seed: int = Field(0, description="Seed of parameters, crops and masks.")
    precision: Precision = Field(Precision.FLOAT32, description="float32 or float64.")
    log_every: int = Field(10, description="Steps between two INFO progress lines.")
    prefetch: int = Field(2, description="Ready batches the data producer may queue, 0 for none.")

    @validator("lr", "lr_min", "weight_decay")
    def non_negative(cls, value, field):
        if not value >= 0:
            raise ValueError(f"{field.name} must be >= 0, got {value}")
        return value

    @validator("betas")
    def valid_betas(cls, value):
        if len(value) != 2 or not all(0 <= b < 1 for b in value):
            raise ValueError(f"betas must be two values in [0, 1), got {value}")
        return value

    @validator("crop")
    def valid_crop(cls, value):
        if len(value) != 3 or any(c < 1 for c in value):
            raise ValueError(f"crop must be three positive extents, got {value}")
        return value

    @validator("batch_size", "log_every")
    def at_least_one(cls, value, field):
        if value < 1:
            raise ValueError(f"{field.name} must be >= 1, got {value}")
        return value

    @validator("prefetch")
    def valid_prefetch(cls, value):
        if value < 0:
            raise ValueError(f"prefetch must be >= 0, got {value}")
        return value


class TrainConfig(OptimConfig):
    """Masked reconstruction pretraining."""

    mask_ratio: float = Field(0.75, description="Fraction of junction cells masked, in [0, 1).")
    steps: int = Field(200, description="Optimizer steps.")
    bottom_up: bool = Field(
        True, description="Replicate the junction mask to every stage; False samples each stage independently."
    )
    save_optimizer: bool = Field(True, description="Store AdamW moments in the checkpoint.")

    @validator("mask_ratio")
    def valid_mask_ratio(cls, value):
        if not 0 <= value < 1:
            raise ValueError(f"mask_ratio must be in [0, 1), got {value}")
        return value

    @validator("steps")
    def positive_steps(cls, value):
        if value < 1:
            raise ValueError(f"steps must be >= 1, got {value}")
        return value


class FinetuneConfig(OptimConfig):
    """Binary segmentation fine-tuning."""

    lr: float = Field(1e-3, description="Peak learning rate of the cosine schedule.")
    lr_min: float = Field(1e-5, description="Final learning rate of the cosine schedule.")
    betas: List[float] = Field([0.9, 0.999], description="AdamW moment decay rates.")
    weight_decay: float = Field(0.0, description="Decoupled weight decay of matrices and kernels.")
    batch_size: int = Field(1, description="Volumes per optimizer step.")
    epochs: int = Field(50, description="Epochs; Dice is logged after each one.")
    steps_per_epoch: int = Field(10, description="Optimizer steps per epoch.")
    train_fraction: float = Field(
        1.0, description="Fraction of labeled volumes used for training, the rest validate."
    )
    threshold: float = Field(0.5, description="Probability above which a voxel is foreground.")

    @validator("epochs", "steps_per_epoch")
    def positive_count(cls, value, field):
        if value < 1:
            raise ValueError(f"{field.name} must be >= 1, got {value}")
        return value

    @validator("train_fraction")
    def valid_fraction(cls, value):
        if not 0 < value <= 1:
            raise ValueError(f"train_fraction must be in (0, 1], got {value}")
        return value

    @property
    def steps(self) -> int:
        return self.epochs * self.steps_per_epoch


class RunConfig(BaseModel):
    """Everything a command needs: model, pretraining and fine-tuning."""

    class Config:
        extra = Extra.forbid

    profile: str = Field(DEFAULT_PROFILE, description="Name of the profile the defaults came from.")
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)

    @root_validator(skip_on_failure=True)
    def crops_fit_strides(cls, values):
        total = values["model"].cnn.cumulative_stride
        for section in ("train", "finetune"):
            for axis, extent in zip("DHW", values[section].crop):
                if extent % total:
                    raise ValueError(
                        f"{section}.crop axis {axis} extent {extent} is not divisible by "
                        f"the cumulative stride {total}"
                    )
        return values


PROFILES: Dict[str, Dict[str, Any]] = {
    "desk": {},
    "full-scale": {
        "train": {
            "crop": [96, 96, 96],
            "batch_size": 8,
            # 100 epochs over 6814 volumes at 8 per step
            "steps": 85200,
            "lr": 1e-4,
            "log_every": 100,
        },
        "finetune": {"crop": [96, 96, 96], "batch_size": 2, "lr": 1e-4},
    },
}


def profile_defaults(name: str) -> Dict[str, Any]:
    """
    Return the nested settings of the profile ``name``.

    >>> profile_defaults("full-scale")["train"]["crop"]
    [96, 96, 96]
    """
    try:
        settings = copy.deepcopy(PROFILES[name])
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}, expected one of {sorted(PROFILES)}")
    settings["profile"] = name
    return settings


def merge_settings(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    """Return ``base`` updated recursively with ``update``; ``base`` is modified."""
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(base.get(key), dict):
            merge_settings(base[key], value)
        else:
            base[key] = copy.deepcopy(value)
    return base


def parse_value(text: str) -> Any:
    """
    Return a config file value: a JSON literal or else the bare string.

    >>> parse_value("[16, 32]")
    [16, 32]
    >>> parse_value("float64")
    'float64'
    """
    try:
        return json.loads(text)
    except ValueError:
        return text.strip()


def read_config_file(location: str) -> Dict[str, Any]:
    """Return the nested settings of the INI config file at ``location``."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(location) as f:
            parser.read_file(f)
    except OSError as e:
        raise ConfigError(f"cannot read config file {location}: {e}") from e
    except configparser.Error as e:
        raise ConfigError(f"invalid config file {location}: {e}") from e

    settings: Dict[str, Any] = {}
    for section in parser.sections():
        path = SECTIONS.get(section)
        if path is None:
            raise ConfigError(
                f"{location}: unknown section [{section}], expected one of {sorted(SECTIONS)}"
            )
        target = settings
        for part in path:
            target = target.setdefault(part, {})
        for key, text in parser.items(section):
            target[key] = parse_value(text)
    return settings


def expand_overrides(overrides: Optional[Mapping[str, Any]]) -> Dict[str, Any]:
    """
    Return nested settings from dotted ``overrides`` such as
    ``{"train.mask_ratio": 0.5}``. None values are skipped.

    >>> expand_overrides({"model.cnn.blocks": 2, "train.seed": None})
    {'model': {'cnn': {'blocks': 2}}}
    """
    nested: Dict[str, Any] = {}
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        *parents, key = dotted.split(".")
        target = nested
        for part in parents:
            target = target.setdefault(part, {})
        target[key] = value
    return nested


def build_config(settings: Mapping[str, Any]) -> RunConfig:
    """Return a validated RunConfig from nested ``settings``."""
    try:
        return RunConfig.parse_obj(settings)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def load_config(
    location: Optional[str] = None,
    profile: str = DEFAULT_PROFILE,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """
    Return the effective RunConfig: the ``profile`` defaults, updated by the
    config file at ``location`` if any, then by the dotted ``overrides``.
    """
    settings = profile_defaults(profile)
    if location:
        merge_settings(settings, read_config_file(location))
    merge_settings(settings, expand_overrides(overrides))
    config = build_config(settings)
    logger.debug(f"effective configuration: {effective_config_json(config)}")
    return config


def effective_config_json(config: RunConfig, indent: Optional[int] = 2) -> str:
    """Return ``config`` as JSON, the provenance record echoed into artifacts."""
    return config.json(indent=indent)


def config_sidecar_path(location: str) -> str:
    return f"{location}.config.json"


def write_config_sidecar(config: RunConfig, location: str) -> str:
    """Write the effective config next to the artifact at ``location``."""
    sidecar = config_sidecar_path(location)
    with open(sidecar, "w") as f:
        f.write(effective_config_json(config))
        f.write("\n")
    return sidecar
