#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
The hierarchical decoder and the output heads.

The decoder takes the dense features ``S'_1 .. S'_N`` (masked cells
filled with the learned embedding of their scale), projects the junction
features, then walks up the scales: upsample the running decoding, fuse it
with the projected features of the finer scale, repeat. The head maps the
finest decoding to one channel at input resolution.
"""

import logging
from typing import List
from typing import Sequence

from hybridmask import functional as F
from hybridmask.config import ModelConfig
from hybridmask.config import SkipMode
from hybridmask.errors import DimensionError
from hybridmask.params import ModelParams
from hybridmask.params import ParamBuilder
from hybridmask.tensor import Tensor
from hybridmask.tensor import concat

logger = logging.getLogger(__name__)


def mask_embed_name(scale: int) -> str:
    return f"decoder.mask_embed.{scale}"


def projected_scales(config: ModelConfig) -> List[int]:
    """Return the scales whose encoder features enter the decoder."""
    n = config.cnn.num_stages
    if config.decoder.skip == SkipMode.NONE:
        return [n]
    return list(range(1, n + 1))


def init_decoder_params(builder: ParamBuilder, config: ModelConfig, mask_embeds: bool = True):
    """
    Add the decoder parameters to ``builder``; ``mask_embeds`` adds the
    per-scale embeddings that fill masked cells during pretraining.
    """
    channels = config.cnn.channels
    widths = config.decoder_widths
    k = config.cnn.kernel_size
    n = config.cnn.num_stages
    scales = projected_scales(config)
    if mask_embeds:
        for scale in scales:
            builder.embedding(mask_embed_name(scale), (channels[scale - 1],))
    for scale in scales:
        builder.linear(f"decoder.proj.{scale}", widths[scale - 1], channels[scale - 1])
    for scale in range(n - 1, 0, -1):
        width, coarse = widths[scale - 1], widths[scale]
        prefix = f"decoder.up.{scale}"
        builder.conv(f"{prefix}.conv1", width, coarse, k)
        builder.norm(f"{prefix}.norm1", width)
        builder.conv(f"{prefix}.conv2", width, width, k)
        builder.norm(f"{prefix}.norm2", width)
        if config.decoder.skip == SkipMode.CONCAT:
            prefix = f"decoder.fuse.{scale}"
            builder.conv(f"{prefix}.conv1", width, 2 * width, k)
            builder.norm(f"{prefix}.norm1", width)
            builder.conv(f"{prefix}.conv2", width, width, k)
            builder.norm(f"{prefix}.norm2", width)


def init_head_params(builder: ParamBuilder, config: ModelConfig, name: str = "head") -> None:
    builder.linear(name, 1, config.decoder_widths[0])


def conv_norm_gelu(x: Tensor, params: ModelParams, prefix: str, index: int) -> Tensor:
    weight = params[f"{prefix}.conv{index}.weight"]
    x = F.conv3d(x, weight, params[f"{prefix}.conv{index}.bias"], padding=weight.shape[2] // 2)
    x = F.channel_layer_norm(x, params[f"{prefix}.norm{index}.gamma"], params[f"{prefix}.norm{index}.beta"])
    return F.gelu(x)


def upsample_block(x: Tensor, params: ModelParams, scale: int, factor: int) -> Tensor:
    """Two convolutions at the coarse scale then nearest neighbor upsampling."""
    prefix = f"decoder.up.{scale}"
    x = conv_norm_gelu(x, params, prefix, 1)
    x = conv_norm_gelu(x, params, prefix, 2)
    return F.upsample_nearest3d(x, factor)


def fusion_block(x: Tensor, params: ModelParams, scale: int) -> Tensor:
    prefix = f"decoder.fuse.{scale}"
    x = conv_norm_gelu(x, params, prefix, 1)
    return conv_norm_gelu(x, params, prefix, 2)


def project(features: Tensor, params: ModelParams, scale: int) -> Tensor:
    prefix = f"decoder.proj.{scale}"
    return F.channel_linear(features, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def _batched(features: Sequence[Tensor], config: ModelConfig) -> List[Tensor]:
    """Check the scale pyramid of ``features`` and give each a batch axis."""
    n = config.cnn.num_stages
    if len(features) != n:
        raise DimensionError(f"decode: expected {n} scales, got {len(features)}")
    channels = config.cnn.channels
    strides = config.cnn.stage_strides
    batched = []
    for scale, dense in enumerate(features, start=1):
        if dense.ndim == 4:
            dense = dense.reshape((1,) + dense.shape)
        if dense.ndim != 5 or dense.shape[1] != channels[scale - 1]:
            raise DimensionError(
                f"decode: scale {scale} must be [{channels[scale - 1]}, D, H, W], got {dense.shape}"
            )
        if batched:
            finer = batched[-1].shape[2:]
            expected = tuple(e // strides[scale - 1] for e in finer)
            if tuple(dense.shape[2:]) != expected:
                raise DimensionError(
                    f"decode: scale {scale} has extents {tuple(dense.shape[2:])}, "
                    f"expected {expected} from scale {scale - 1}"
                )
        batched.append(dense)
    return batched


def decode(dense_features: Sequence[Tensor], params: ModelParams, config: ModelConfig) -> Tensor:
    """
    Return the finest decoding ``D_1`` ``[1, W_1, D, H, W]`` of the dense
    features ``S'_1 .. S'_N``, each ``[C_i, D_i, H_i, W_i]``.

    The skip mode of ``config`` selects how ``S'_i`` joins the upsampled
    decoding below the junction: concatenated then fused, added, or not at
    all.
    """
    features = _batched(dense_features, config)
    n = config.cnn.num_stages
    strides = config.cnn.stage_strides
    skip = config.decoder.skip

    d = project(features[n - 1], params, n)
    for scale in range(n - 1, 0, -1):
        up = upsample_block(d, params, scale, strides[scale])
        if skip == SkipMode.CONCAT:
            d = fusion_block(concat([up, project(features[scale - 1], params, scale)], axis=1), params, scale)
        elif skip == SkipMode.ADD:
            d = up + project(features[scale - 1], params, scale)
        else:
            d = up
    return d


def skip_addition_decode(dense_features: Sequence[Tensor], params: ModelParams, config: ModelConfig):
    """Return :func:`decode` with additive skip connections."""
    add_config = config.copy(deep=True)
    add_config.decoder.skip = SkipMode.ADD
    return decode(dense_features, params, add_config)


def reconstruct_head(d_1: Tensor, params: ModelParams, stem_stride: int, name: str = "head") -> Tensor:
    """
    Return the one-channel ``[D, H, W]`` output at input resolution: a
    pointwise linear map of ``d_1`` upsampled by the stem stride.
    """
    out = F.channel_linear(d_1, params[f"{name}.weight"], params[f"{name}.bias"])
    out = F.upsample_nearest3d(out, stem_stride)
    return out.reshape(out.shape[2:])
