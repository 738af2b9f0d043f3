#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
Ablation arms: each arm changes one setting of the run configuration, then
pretrains and fine-tunes with the same seeds as every other arm. The
results form a comparison table, written as JSON and as aligned text.
"""

import logging
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence

from pydantic import BaseModel
from pydantic import Extra
from pydantic import Field

from hybridmask.checkpoint import Checkpoint
from hybridmask.config import RunConfig
from hybridmask.config import SkipMode
from hybridmask.config import build_config
from hybridmask.config import merge_settings
from hybridmask.data import DataSource
from hybridmask.errors import ConfigError
from hybridmask.finetune import run_finetune
from hybridmask.model import init_pretrain_params
from hybridmask.pretrain import make_pyramid
from hybridmask.pretrain import run_pretrain
from hybridmask.pretrain import smooth_losses

logger = logging.getLogger(__name__)

# arm name -> settings applied over the run configuration
ARMS: Dict[str, Dict[str, Any]] = {
    "ratio25": {"train": {"mask_ratio": 0.25}},
    "ratio50": {"train": {"mask_ratio": 0.5}},
    "ratio75": {"train": {"mask_ratio": 0.75}},
    "no-skip": {"model": {"decoder": {"skip": SkipMode.NONE.value}}},
    "skip-add": {"model": {"decoder": {"skip": SkipMode.ADD.value}}},
    "skip-concat": {"model": {"decoder": {"skip": SkipMode.CONCAT.value}}},
    "no-bottom-up": {"train": {"bottom_up": False}},
    "scratch": {},
}

# arms fine-tuned without pretraining
NOT_PRETRAINED = {"scratch"}

LOSS_SMOOTHING = 20


class AblationRow(BaseModel):
    class Config:
        extra = Extra.forbid

    arm: str
    mask_ratio: float
    skip: str
    bottom_up: bool
    pretrained: bool
    num_parameters: int = Field(..., description="Parameters of the pretraining model.")
    tokens: Optional[int] = Field(
        None, description="Visible junction cells, hence transformer tokens, per pretraining crop."
    )
    final_pretrain_loss: Optional[float] = Field(
        None, description="Smoothed loss at the last pretraining step, none without pretraining."
    )
    final_dice: Optional[float] = Field(None, description="Last validation Dice, or train Dice without validation split.")


class AblationReport(BaseModel):
    """Machine readable comparison of ablation arms."""

    class Config:
        extra = Extra.forbid

    rows: List[AblationRow] = Field(default_factory=list, description="One row per arm, in run order.")
    config: Dict[str, Any] = Field(default_factory=dict, description="Base run configuration.")

    def to_text(self) -> str:
        return format_table(self.rows)


def arm_config(config: RunConfig, arm: str) -> RunConfig:
    """Return ``config`` with the settings of ``arm`` applied."""
    if arm not in ARMS:
        raise ConfigError(f"unknown ablation arm {arm!r}, expected one of {list(ARMS)}")
    settings = merge_settings(config.dict(), ARMS[arm])
    return build_config(settings)


def parameter_count(config: RunConfig) -> int:
    """Return the parameter count of the pretraining model of ``config``."""
    params = init_pretrain_params(config.model, config.train.crop, config.train.seed)
    return params.num_parameters


def token_count(config: RunConfig) -> int:
    """Return the transformer tokens of one pretraining crop of ``config``."""
    train = config.train
    pyramid = make_pyramid(train.crop, config.model, train.mask_ratio, train.seed, train.bottom_up)
    return pyramid.junction.active_count


def run_arm(config: RunConfig, arm: str, source: DataSource) -> AblationRow:
    """Pretrain and fine-tune one arm and return its table row."""
    arm_cfg = arm_config(config, arm)
    pretrained = arm not in NOT_PRETRAINED
    logger.info(f"ablation arm {arm}: pretraining {'on' if pretrained else 'off'}")
    final_loss = None
    checkpoint = None
    tokens = None
    if pretrained:
        tokens = token_count(arm_cfg)
        result = run_pretrain(arm_cfg, source)
        final_loss = smooth_losses(result.losses, LOSS_SMOOTHING)[-1]
        checkpoint = Checkpoint(params=result.params.state_dict(), step=arm_cfg.train.steps)
    tuned = run_finetune(arm_cfg, source, checkpoint=checkpoint)
    return AblationRow(
        arm=arm,
        mask_ratio=arm_cfg.train.mask_ratio,
        skip=arm_cfg.model.decoder.skip.value,
        bottom_up=arm_cfg.train.bottom_up,
        pretrained=pretrained,
        num_parameters=parameter_count(arm_cfg),
        tokens=tokens,
        final_pretrain_loss=final_loss,
        final_dice=tuned.final_dice,
    )


def run_ablation(config: RunConfig, arms: Sequence[str], source: DataSource) -> AblationReport:
    """Run ``arms`` in order with shared seeds and return the comparison."""
    unknown = [a for a in arms if a not in ARMS]
    if unknown:
        raise ConfigError(f"unknown ablation arms {unknown}, expected some of {list(ARMS)}")
    rows = [run_arm(config, arm, source) for arm in arms]
    return AblationReport(rows=rows, config=config.dict())


def _cell(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


COLUMNS = (
    ("arm", "arm"),
    ("mask_ratio", "ratio"),
    ("skip", "skip"),
    ("bottom_up", "bottom-up"),
    ("pretrained", "pretrained"),
    ("num_parameters", "params"),
    ("tokens", "tokens"),
    ("final_pretrain_loss", "pretrain loss"),
    ("final_dice", "dice"),
)


def format_table(rows: Sequence[AblationRow]) -> str:
    """
    Return ``rows`` as an aligned text table, one line per arm below a
    header line.
    """
    cells = [[title for _, title in COLUMNS]]
    cells += [[_cell(getattr(row, field)) for field, _ in COLUMNS] for row in rows]
    widths = [max(len(line[i]) for line in cells) for i in range(len(COLUMNS))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in cells]
    return "\n".join(lines) + "\n"
