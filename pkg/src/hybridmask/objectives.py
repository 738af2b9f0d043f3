#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
Training objectives and metrics: per-block normalized reconstruction
targets, the masked mean squared error, the binary segmentation loss and
the Dice coefficient.
"""

import logging
from typing import Tuple

import attr
import numpy as np

from hybridmask.errors import ConsistencyError
from hybridmask.errors import DataError
from hybridmask.errors import DimensionError
from hybridmask.masking import MaskGrid
from hybridmask.tensor import Function
from hybridmask.tensor import Tensor
from hybridmask.tensor import as_tensor

logger = logging.getLogger(__name__)

TARGET_EPS = 1e-6
DICE_SMOOTH = 1e-5


def block_factors(shape, grid_shape) -> Tuple[int, int, int]:
    """Return the voxel block extents of one junction cell."""
    factors = []
    for axis, extent, cells in zip("DHW", shape, grid_shape):
        if cells < 1 or extent % cells:
            raise DimensionError(
                f"axis {axis}: volume extent {extent} does not split in {cells} junction cells"
            )
        factors.append(extent // cells)
    return tuple(factors)


def _blocks(values: np.ndarray, grid_shape, factors) -> np.ndarray:
    """Return ``values`` as ``[gd, gh, gw, fd * fh * fw]`` blocks."""
    (gd, gh, gw), (fd, fh, fw) = grid_shape, factors
    blocks = values.reshape(gd, fd, gh, fh, gw, fw).transpose(0, 2, 4, 1, 3, 5)
    return blocks.reshape(gd, gh, gw, fd * fh * fw)


def _replicate(cells: np.ndarray, factors) -> np.ndarray:
    fd, fh, fw = factors
    return np.repeat(np.repeat(np.repeat(cells, fd, axis=0), fh, axis=1), fw, axis=2)


@attr.attributes(eq=False, frozen=True)
class NormalizedTargets:
    """
    Reconstruction targets: each masked junction block standardized by its
    own mean and standard deviation. Visible blocks carry no target.
    """

    targets = attr.ib(repr=False, metadata=dict(help="array [D, H, W], zero on visible blocks."))
    mean = attr.ib(repr=False, metadata=dict(help="array of block means, junction grid shape."))
    std = attr.ib(repr=False, metadata=dict(help="array of block standard deviations."))
    voxel_mask = attr.ib(repr=False, metadata=dict(help="bool array [D, H, W], True where a target exists."))
    factors = attr.ib(converter=tuple, metadata=dict(help="Voxel block extents of a junction cell."))

    @property
    def masked_voxels(self) -> int:
        return int(np.count_nonzero(self.voxel_mask))

    def voxel_stats(self) -> Tuple[np.ndarray, np.ndarray]:
        return _replicate(self.mean, self.factors), _replicate(self.std, self.factors)

    def inverse(self, normalized: np.ndarray) -> np.ndarray:
        """Return ``normalized`` values mapped back to intensities on masked blocks, zero elsewhere."""
        mean, std = self.voxel_stats()
        restored = np.asarray(normalized, dtype=np.float64) * (std + TARGET_EPS) + mean
        return np.where(self.voxel_mask, restored, 0.0)

    def compose(self, prediction: np.ndarray, visible: np.ndarray) -> np.ndarray:
        """
        Return the reconstruction shown to a user: the de-normalized
        ``prediction`` on masked blocks and the ``visible`` input elsewhere.
        """
        restored = self.inverse(prediction)
        return np.where(self.voxel_mask, restored, visible).astype(np.float32)


def normalize_targets(volume, junction_mask: MaskGrid, eps: float = TARGET_EPS) -> NormalizedTargets:
    """
    Return the per-block normalized targets of ``volume`` for the masked
    cells of ``junction_mask``. Statistics are in 64-bit floats.
    """
    values = np.asarray(getattr(volume, "values", volume), dtype=np.float64)
    if values.ndim != 3:
        raise DimensionError(f"normalize_targets: volume must be [D, H, W], got {values.shape}")
    grid = junction_mask.shape
    factors = block_factors(values.shape, grid)
    blocks = _blocks(values, grid, factors)
    mean = blocks.mean(axis=-1)
    std = blocks.std(axis=-1)
    masked_cells = ~junction_mask.bits
    voxel_mask = _replicate(masked_cells, factors)
    normalized = (values - _replicate(mean, factors)) / (_replicate(std, factors) + eps)
    targets = np.where(voxel_mask, normalized, 0.0)
    return NormalizedTargets(
        targets=targets, mean=mean, std=std, voxel_mask=voxel_mask, factors=factors
    )


def masked_mse_loss(pred: Tensor, targets, voxel_mask: np.ndarray) -> Tensor:
    """
    Return the mean squared error of ``pred`` over the voxels of
    ``voxel_mask`` only; other voxels contribute exactly zero.
    """
    voxel_mask = np.asarray(voxel_mask, dtype=bool)
    targets = np.asarray(getattr(targets, "data", targets))
    if pred.shape != targets.shape or pred.shape != voxel_mask.shape:
        raise DimensionError(
            f"masked_mse_loss: prediction {pred.shape}, targets {targets.shape} and "
            f"mask {voxel_mask.shape} differ"
        )
    count = int(np.count_nonzero(voxel_mask))
    if count == 0:
        raise ConsistencyError("masked_mse_loss: no masked voxel to reconstruct")
    weight = voxel_mask.astype(pred.dtype)
    diff = (pred - targets.astype(pred.dtype)) * weight
    return (diff * diff).sum() * (1.0 / count)


class BinaryCrossEntropyWithLogits(Function):
    """Mean binary cross entropy of sigmoid probabilities, computed from logits."""

    def forward(self, x, labels):
        self.x, self.labels = x, labels
        loss = np.maximum(x, 0) - x * labels + np.log1p(np.exp(-np.abs(x)))
        return np.asarray(loss.mean(), dtype=x.dtype)

    def backward(self, grad):
        p = 0.5 * (1 + np.tanh(0.5 * self.x))
        return grad * (p - self.labels) / self.x.size, None


def check_binary(labels, name: str = "labels") -> np.ndarray:
    labels = np.asarray(labels)
    if not np.all((labels == 0) | (labels == 1)):
        raise DataError(f"{name} must be binary (0 or 1)")
    return labels


def bce_loss(logits: Tensor, labels) -> Tensor:
    labels = check_binary(labels)
    return BinaryCrossEntropyWithLogits.apply(logits, labels.astype(logits.dtype))


def dice_loss(logits: Tensor, labels, smooth: float = DICE_SMOOTH) -> Tensor:
    """Return one minus the soft Dice of sigmoid probabilities and ``labels``."""
    labels = as_tensor(check_binary(labels).astype(logits.dtype))
    p = logits.sigmoid()
    overlap = (p * labels).sum()
    return 1.0 - (2.0 * overlap + smooth) / (p.sum() + labels.sum() + smooth)


def seg_loss(logits: Tensor, labels) -> Tensor:
    """
    Return the binary cross entropy plus the Dice loss of foreground
    ``logits`` against binary ``labels``.
    """
    labels = np.asarray(getattr(labels, "values", labels))
    if logits.shape != labels.shape:
        raise DimensionError(f"seg_loss: logits {logits.shape} and labels {labels.shape} differ")
    return bce_loss(logits, labels) + dice_loss(logits, labels)


def dice_metric(pred, gt) -> float:
    """
    Return the Dice coefficient of two binary masks, 1.0 when both are
    empty.

    >>> dice_metric(np.array([1, 1, 0, 0]), np.array([1, 0, 1, 0]))
    0.5
    """
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"dice_metric: prediction {pred.shape} and truth {gt.shape} differ")
    total = int(np.count_nonzero(pred)) + int(np.count_nonzero(gt))
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(pred & gt)) / total
