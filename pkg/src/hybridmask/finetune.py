#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
Binary segmentation fine-tuning of the hybrid encoder, from a pretraining
checkpoint or from scratch.

The encoder sees whole, unmasked volumes: the sparse path with every cell
active. A fresh decoder and a one-channel head are trained with binary
cross entropy plus Dice loss, and the Dice coefficient of every split is
logged after each epoch.
"""

import logging
from typing import List
from typing import Optional
from typing import Sequence
from typing import Union

import attr
import numpy as np
from pydantic import BaseModel
from pydantic import Extra
from pydantic import Field

from hybridmask.checkpoint import Checkpoint
from hybridmask.checkpoint import load_checkpoint
from hybridmask.checkpoint import save_checkpoint
from hybridmask.config import ModelConfig
from hybridmask.config import RunConfig
from hybridmask.config import write_config_sidecar
from hybridmask.data import BatchProducer
from hybridmask.data import DataSource
from hybridmask.data import crop_pair
from hybridmask.data import preprocess
from hybridmask.data import split_indices
from hybridmask.errors import DataError
from hybridmask.errors import HybridMaskError
from hybridmask.errors import TrainingError
from hybridmask.model import init_segmentation_params
from hybridmask.model import segment_forward
from hybridmask.model import transfer_encoder
from hybridmask.objectives import dice_metric
from hybridmask.objectives import seg_loss
from hybridmask.optim import AdamWState
from hybridmask.optim import adamw_step
from hybridmask.optim import cosine_lr
from hybridmask.params import ModelParams
from hybridmask.pretrain import annotate
from hybridmask.tensor import no_grad

logger = logging.getLogger(__name__)

SPLIT_TRAIN = "train"
SPLIT_VAL = "val"


class DiceRecord(BaseModel):
    """One line of the fine-tuning Dice log."""

    class Config:
        extra = Extra.forbid

    epoch: int = Field(..., description="One-based epoch.")
    split: str = Field(..., description="train or val.")
    dice: float = Field(..., description="Mean Dice coefficient over the split.")
    loss: float = Field(..., description="Mean segmentation loss over the split.")


@attr.attributes(eq=False)
class FinetuneResult:
    params = attr.ib(repr=False)
    records = attr.ib(factory=list, repr=False)
    train_indices = attr.ib(factory=list)
    val_indices = attr.ib(factory=list)
    transferred = attr.ib(factory=list, repr=False, metadata=dict(help="Names taken from the checkpoint."))

    def dice(self, split: str = SPLIT_TRAIN) -> List[float]:
        return [r.dice for r in self.records if r.split == split]

    @property
    def final_dice(self) -> Optional[float]:
        scores = self.dice(SPLIT_VAL) or self.dice(SPLIT_TRAIN)
        return scores[-1] if scores else None


def prepare_pairs(source: DataSource):
    """Return the labeled pairs of ``source`` with windowed intensities."""
    return [(preprocess(volume), label) for volume, label in source.labeled_pairs()]


def evaluate(params: ModelParams, config: ModelConfig, pairs, crop: Sequence[int], threshold: float):
    """Return the mean Dice and loss of the center crops of ``pairs``."""
    scores, losses = [], []
    with no_grad():
        for volume, label in pairs:
            volume, label = crop_pair(volume, label, crop)
            logits = segment_forward(volume, params, config).output
            losses.append(seg_loss(logits, label.values).item())
            probabilities = 1.0 / (1.0 + np.exp(-logits.numpy().astype(np.float64)))
            scores.append(dice_metric(probabilities > threshold, label.values))
    return float(np.mean(scores)), float(np.mean(losses))


def run_finetune(
    config: RunConfig,
    source: DataSource,
    checkpoint: Optional[Union[str, Checkpoint]] = None,
    dice_log: Optional[str] = None,
    out: Optional[str] = None,
) -> FinetuneResult:
    """
    Fine-tune a segmentation model on the labeled volumes of ``source``.
    With ``checkpoint``, the encoder and transformer start from its
    parameters; otherwise from a fresh initialization.
    """
    tune = config.finetune
    model = config.model
    pairs = prepare_pairs(source)
    if not pairs:
        raise DataError(f"finetune: no labeled volume in {source!r}")
    train_indices, val_indices = split_indices(len(pairs), tune.train_fraction, tune.seed)
    train_pairs = [pairs[i] for i in train_indices]
    val_pairs = [pairs[i] for i in val_indices]

    params = init_segmentation_params(model, tune.crop, tune.seed, tune.precision.value)
    transferred = []
    if checkpoint is not None:
        if isinstance(checkpoint, str):
            checkpoint = load_checkpoint(checkpoint)
        transferred = transfer_encoder(checkpoint.params, params)
        logger.info(f"finetune: {len(transferred)} encoder tensors from the checkpoint")
    state = AdamWState.zeros_like(params)

    def make_batch(step):
        rng = np.random.default_rng([tune.seed, step])
        batch = []
        for _ in range(tune.batch_size):
            volume, label = train_pairs[int(rng.integers(len(train_pairs)))]
            batch.append(crop_pair(volume, label, tune.crop, rng))
        return batch

    records: List[DiceRecord] = []
    log = open(dice_log, "w") if dice_log else None
    batches = iter(BatchProducer(make_batch, tune.steps, tune.prefetch))
    try:
        for epoch in range(1, tune.epochs + 1):
            for step in range((epoch - 1) * tune.steps_per_epoch, epoch * tune.steps_per_epoch):
                batch = next(batches)
                lr = cosine_lr(step, tune.steps, tune.lr, tune.lr_min)
                params.zero_grad()
                try:
                    total = 0
                    for volume, label in batch:
                        logits = segment_forward(volume, params, model).output
                        total = total + seg_loss(logits, label.values)
                    loss = total * (1.0 / len(batch))
                    if not np.isfinite(loss.item()):
                        raise TrainingError(f"non-finite loss {loss.item()}", step=step)
                    loss.backward()
                    adamw_step(params, state, lr, tune.betas, tune.weight_decay)
                except HybridMaskError as e:
                    raise annotate(e, step) from e

            splits = [(SPLIT_TRAIN, train_pairs)] + ([(SPLIT_VAL, val_pairs)] if val_pairs else [])
            for split, split_pairs in splits:
                dice, split_loss = evaluate(params, model, split_pairs, tune.crop, tune.threshold)
                record = DiceRecord(epoch=epoch, split=split, dice=dice, loss=split_loss)
                records.append(record)
                if log:
                    log.write(record.json())
                    log.write("\n")
                    log.flush()
            if epoch % tune.log_every == 0 or epoch == tune.epochs:
                logger.info(f"finetune epoch {epoch}/{tune.epochs}: dice {records[-1].dice:.4f}")
    finally:
        batches.close()
        if log:
            log.close()

    if dice_log:
        write_config_sidecar(config, dice_log)
    if out:
        save_checkpoint(out, params, step=tune.steps, config=config.dict())
    return FinetuneResult(
        params=params,
        records=records,
        train_indices=train_indices,
        val_indices=val_indices,
        transferred=transferred,
    )
