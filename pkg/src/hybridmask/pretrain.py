#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
Masked reconstruction pretraining.

Each step samples crops, masks a random fraction of junction cells,
encodes the visible cells only, decodes with mask embeddings in the masked
cells and regresses the per-block normalized intensities of the masked
blocks. A newline-delimited JSON loss log records every step.
"""

import logging
from typing import List
from typing import Optional
from typing import Sequence

import attr
import numpy as np
from pydantic import BaseModel
from pydantic import Extra
from pydantic import Field

from hybridmask.checkpoint import save_checkpoint
from hybridmask.config import ModelConfig
from hybridmask.config import RunConfig
from hybridmask.config import write_config_sidecar
from hybridmask.data import BatchProducer
from hybridmask.data import DataSource
from hybridmask.data import Volume3D
from hybridmask.data import crop_origin
from hybridmask.data import preprocess
from hybridmask.errors import HybridMaskError
from hybridmask.errors import TrainingError
from hybridmask.masking import MaskPyramid
from hybridmask.masking import build_independent_pyramid
from hybridmask.masking import build_pyramid
from hybridmask.masking import init_junction_mask
from hybridmask.masking import junction_shape
from hybridmask.model import init_pretrain_params
from hybridmask.model import pretrain_forward
from hybridmask.objectives import masked_mse_loss
from hybridmask.objectives import normalize_targets
from hybridmask.optim import AdamWState
from hybridmask.optim import adamw_step
from hybridmask.optim import cosine_lr
from hybridmask.params import ModelParams
from hybridmask.tensor import no_grad

logger = logging.getLogger(__name__)

MASK_SEED_RANGE = 2**31 - 1


class LossRecord(BaseModel):
    """One line of the pretraining loss log."""

    class Config:
        extra = Extra.forbid

    step: int = Field(..., description="Zero-based optimizer step.")
    lr: float = Field(..., description="Learning rate used for this step.")
    loss: float = Field(..., description="Masked reconstruction loss, averaged over the batch.")
    masked_voxels: int = Field(..., description="Voxels carrying a target, summed over the batch.")
    seed: int = Field(..., description="Run seed; the step data derives from (seed, step).")


@attr.attributes(eq=False, frozen=True)
class TrainingSample:
    volume = attr.ib(repr=False, metadata=dict(help="Preprocessed Volume3D crop."))
    source = attr.ib(metadata=dict(help="Index of the volume in the data source."))
    origin = attr.ib(metadata=dict(help="Corner of the crop in the source volume."))
    mask_seed = attr.ib(metadata=dict(help="Seed of the junction mask of this sample."))


@attr.attributes(eq=False)
class PretrainResult:
    params = attr.ib(repr=False)
    state = attr.ib(repr=False)
    records = attr.ib(factory=list, repr=False)
    config = attr.ib(default=None, repr=False)

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.records]


def sample_batch(source: DataSource, step: int, seed: int, batch_size: int, crop: Sequence[int]):
    """
    Return the samples of ``step``. The choice of volumes, crops and mask
    seeds only depends on ``seed`` and ``step``.
    """
    rng = np.random.default_rng([seed, step])
    samples = []
    for _ in range(batch_size):
        index = int(rng.integers(len(source)))
        raw = source.volumes[index]
        origin = crop_origin(raw.shape, crop, rng)
        window = tuple(slice(o, o + c) for o, c in zip(origin, crop))
        volume = preprocess(raw.with_values(raw.values[window]))
        samples.append(
            TrainingSample(
                volume=volume,
                source=index,
                origin=origin,
                mask_seed=int(rng.integers(MASK_SEED_RANGE)),
            )
        )
    return samples


def make_pyramid(
    shape: Sequence[int],
    config: ModelConfig,
    mask_ratio: float,
    seed: int,
    bottom_up: bool = True,
) -> MaskPyramid:
    """
    Return the mask pyramid of a volume of ``shape``: a random junction
    mask replicated to every stage, or with ``bottom_up`` False, stage masks
    sampled independently.
    """
    strides = config.cnn.stage_strides
    grid = junction_shape(shape, strides)
    junction = init_junction_mask(grid, mask_ratio, seed, scale_id=config.cnn.num_stages)
    if bottom_up:
        return build_pyramid(junction, strides, shape)
    return build_independent_pyramid(junction, strides, shape, mask_ratio, seed)


def reconstruction_loss(volume, pyramid: MaskPyramid, params: ModelParams, config: ModelConfig):
    """Return the masked loss, the targets and the forward output for one volume."""
    output = pretrain_forward(volume, pyramid, params, config)
    targets = normalize_targets(volume, pyramid.junction)
    loss = masked_mse_loss(output.output, targets.targets, targets.voxel_mask)
    return loss, targets, output


def annotate(error: HybridMaskError, step: int) -> HybridMaskError:
    """
    Return ``error`` tagged with the loop ``step``, keeping its class. A
    TrainingError tagged with another step, such as the optimizer update
    count, is re-tagged.
    """
    if isinstance(error, TrainingError):
        if error.step == step:
            return error
        return TrainingError(error.detail, step=step)
    try:
        return type(error)(f"step {step}: {error}")
    except TypeError:
        return TrainingError(str(error), step=step)


def smooth_losses(losses: Sequence[float], window: int = 20) -> List[float]:
    """
    Return the trailing moving average of ``losses``.

    >>> smooth_losses([4.0, 2.0, 0.0], window=2)
    [4.0, 3.0, 1.0]
    """
    smoothed = []
    for i in range(len(losses)):
        chunk = losses[max(0, i - window + 1) : i + 1]
        smoothed.append(float(sum(chunk) / len(chunk)))
    return smoothed


def run_pretrain(
    config: RunConfig,
    source: DataSource,
    checkpoint: Optional[str] = None,
    loss_log: Optional[str] = None,
    params: Optional[ModelParams] = None,
) -> PretrainResult:
    """
    Pretrain a model on ``source`` with ``config`` and return the trained
    parameters and the loss records. Write the checkpoint and the loss log
    when their locations are given.
    """
    train = config.train
    model = config.model
    if params is None:
        params = init_pretrain_params(model, train.crop, train.seed, train.precision.value)
    state = AdamWState.zeros_like(params)
    config_dict = config.dict()
    records: List[LossRecord] = []

    def make_batch(step):
        return sample_batch(source, step, train.seed, train.batch_size, train.crop)

    log = open(loss_log, "w") if loss_log else None
    try:
        for step, samples in enumerate(BatchProducer(make_batch, train.steps, train.prefetch)):
            lr = cosine_lr(step, train.steps, train.lr, train.lr_min)
            params.zero_grad()
            try:
                total = 0
                masked_voxels = 0
                for sample in samples:
                    pyramid = make_pyramid(
                        sample.volume.shape, model, train.mask_ratio, sample.mask_seed, train.bottom_up
                    )
                    loss, targets, _output = reconstruction_loss(sample.volume, pyramid, params, model)
                    total = total + loss
                    masked_voxels += targets.masked_voxels
                loss = total * (1.0 / len(samples))
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite loss {value}", step=step)
                loss.backward()
                adamw_step(params, state, lr, train.betas, train.weight_decay)
            except HybridMaskError as e:
                raise annotate(e, step) from e

            record = LossRecord(step=step, lr=lr, loss=value, masked_voxels=masked_voxels, seed=train.seed)
            records.append(record)
            if log:
                log.write(record.json())
                log.write("\n")
                log.flush()
            if step % train.log_every == 0 or step == train.steps - 1:
                logger.info(f"pretrain step {step}/{train.steps}: lr {lr:.3g} loss {value:.5f}")
    finally:
        if log:
            log.close()

    if loss_log:
        write_config_sidecar(config, loss_log)
    if checkpoint:
        save_checkpoint(
            checkpoint,
            params,
            step=train.steps,
            config=config_dict,
            state=state if train.save_optimizer else None,
        )
    return PretrainResult(params=params, state=state, records=records, config=config)


@attr.attributes(eq=False, frozen=True)
class Reconstruction:
    """The three volumes of a reconstruction: input, masked input and prediction."""

    raw = attr.ib(repr=False)
    masked = attr.ib(repr=False)
    prediction = attr.ib(repr=False)
    pyramid = attr.ib(repr=False)


def reconstruct_volume(
    volume: Volume3D,
    params: ModelParams,
    config: ModelConfig,
    crop: Sequence[int],
    mask_ratio: float,
    seed: int,
) -> Reconstruction:
    """
    Return the preprocessed center crop of ``volume``, the crop with its
    masked blocks zeroed, and the crop with its masked blocks replaced by
    the de-normalized prediction.
    """
    raw = preprocess(volume, crop)
    pyramid = make_pyramid(raw.shape, config, mask_ratio, seed)
    visible = pyramid.voxel.bits
    with no_grad():
        output = pretrain_forward(raw, pyramid, params, config)
    targets = normalize_targets(raw, pyramid.junction)
    composed = targets.compose(output.output.numpy(), raw.values)
    return Reconstruction(
        raw=raw,
        masked=raw.with_values(raw.values * visible),
        prediction=raw.with_values(composed),
        pyramid=pyramid,
    )
