#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
The sparse CNN encoder: a stem convolution, then N stages of depthwise
inverted bottleneck blocks separated by max pooling, all computed on the
active cells of a MaskPyramid.
"""

import logging
from typing import List

from hybridmask.config import CnnConfig
from hybridmask.errors import ConfigError
from hybridmask.errors import DimensionError
from hybridmask.masking import MaskGrid
from hybridmask.masking import MaskPyramid
from hybridmask.params import ModelParams
from hybridmask.params import ParamBuilder
from hybridmask.sparse import SparseFeatureMap
from hybridmask.sparse import sparse_add
from hybridmask.sparse import sparse_conv3d
from hybridmask.sparse import sparse_gelu
from hybridmask.sparse import sparse_linear
from hybridmask.sparse import sparse_max_pool
from hybridmask.sparse import sparse_norm
from hybridmask.sparse import sparsify
from hybridmask.tensor import Tensor
from hybridmask.tensor import as_tensor

logger = logging.getLogger(__name__)

TRACE = False


def stage_prefix(stage: int) -> str:
    return f"encoder.stages.{stage}"


def block_prefix(stage: int, block: int) -> str:
    return f"{stage_prefix(stage)}.blocks.{block}"


def init_cnn_params(builder: ParamBuilder, config: CnnConfig) -> None:
    """Add the encoder parameters to ``builder``."""
    k = config.kernel_size
    builder.conv("encoder.stem", config.channels[0], 1, k)
    for stage, channels in enumerate(config.channels, start=1):
        if stage > 1:
            builder.linear(f"{stage_prefix(stage)}.proj", channels, config.channels[stage - 2])
        hidden = channels * config.expansion
        for block in range(config.blocks):
            prefix = block_prefix(stage, block)
            builder.conv(f"{prefix}.dwconv", channels, channels, k, depthwise=True)
            builder.norm(f"{prefix}.norm", channels)
            builder.linear(f"{prefix}.expand", hidden, channels)
            builder.linear(f"{prefix}.contract", channels, hidden)


def volume_tensor(volume, dtype=None) -> Tensor:
    """Return the ``[D, H, W]`` values of a Volume3D, array or Tensor as a Tensor."""
    values = getattr(volume, "values", volume)
    tensor = as_tensor(values, dtype=dtype)
    if tensor.ndim != 3:
        raise DimensionError(f"volume must be [D, H, W], got shape {tensor.shape}")
    return tensor


def sparse_block(
    input: SparseFeatureMap,
    mask: MaskGrid,
    params: ModelParams,
    prefix: str,
    norm_groups=None,
) -> SparseFeatureMap:
    """
    Depthwise convolution, active-site normalization, pointwise expansion,
    GELU, pointwise contraction, then the residual sum.
    """
    channels = input.channels
    h = sparse_conv3d(
        input,
        mask,
        params[f"{prefix}.dwconv.weight"],
        params[f"{prefix}.dwconv.bias"],
        groups=channels,
    )
    h = sparse_norm(h, params[f"{prefix}.norm.gamma"], params[f"{prefix}.norm.beta"], norm_groups)
    h = sparse_linear(h, params[f"{prefix}.expand.weight"], params[f"{prefix}.expand.bias"])
    h = sparse_gelu(h)
    h = sparse_linear(h, params[f"{prefix}.contract.weight"], params[f"{prefix}.contract.bias"])
    return sparse_add(input, h)


def check_geometry(volume: Tensor, pyramid: MaskPyramid, config: CnnConfig) -> None:
    if list(pyramid.stage_strides) != config.stage_strides:
        raise ConfigError(
            f"pyramid strides {list(pyramid.stage_strides)} do not match the encoder "
            f"strides {config.stage_strides}"
        )
    if tuple(volume.shape) != pyramid.voxel.shape:
        raise DimensionError(
            f"volume shape {tuple(volume.shape)} does not match the voxel mask {pyramid.voxel.shape}"
        )


def encode_cnn(volume, pyramid: MaskPyramid, params: ModelParams, config: CnnConfig):
    """
    Return the sparse features ``[S_1, ..., S_N]`` of ``volume`` under
    ``pyramid``. S_i lives on the active cells of M_i.

    Pooling is strict unless the pyramid was sampled without the bottom-up
    rule, in which case masked cells of a pooling window read as zero.
    """
    x = volume_tensor(volume, dtype=params.dtype)
    check_geometry(x, pyramid, config)
    strict = pyramid.bottom_up
    strides = config.stage_strides

    voxel = pyramid.voxel
    h = sparsify(x.reshape((1,) + voxel.shape), voxel)
    h = sparse_conv3d(h, voxel, params["encoder.stem.weight"], params["encoder.stem.bias"])
    h = sparse_max_pool(h, voxel, pyramid.stage(1), strides[0], strict=strict)

    features: List[SparseFeatureMap] = []
    for stage in range(1, config.num_stages + 1):
        mask = pyramid.stage(stage)
        if stage > 1:
            h = sparse_max_pool(h, pyramid.stage(stage - 1), mask, strides[stage - 1], strict=strict)
            prefix = stage_prefix(stage)
            h = sparse_linear(h, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])
        for block in range(config.blocks):
            h = sparse_block(h, mask, params, block_prefix(stage, block), config.norm_groups)
        if TRACE:
            logger.debug(
                f"encode_cnn: S_{stage} {h.num_active} active of {mask.cells}, {h.channels} channels"
            )
        features.append(h)
    return features


def active_site_counts(features: List[SparseFeatureMap]) -> List[int]:
    """Return the processed active cell count of every stage."""
    return [f.num_active for f in features]
