#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
The hybrid encoder-decoder assembled from its parts, for masked
reconstruction pretraining and for dense segmentation.
"""

import logging
from typing import List
from typing import Mapping
from typing import Optional
from typing import Sequence

import attr
import numpy as np

from hybridmask.cnn import encode_cnn
from hybridmask.cnn import init_cnn_params
from hybridmask.cnn import volume_tensor
from hybridmask.config import ModelConfig
from hybridmask.decoder import decode
from hybridmask.decoder import init_decoder_params
from hybridmask.decoder import init_head_params
from hybridmask.decoder import mask_embed_name
from hybridmask.decoder import projected_scales
from hybridmask.decoder import reconstruct_head
from hybridmask.errors import ConsistencyError
from hybridmask.masking import MaskGrid
from hybridmask.masking import MaskPyramid
from hybridmask.masking import build_pyramid
from hybridmask.masking import junction_shape
from hybridmask.params import ModelParams
from hybridmask.params import ParamBuilder
from hybridmask.params import is_transferable
from hybridmask.sparse import densify
from hybridmask.sparse import densify_with_mask_embedding
from hybridmask.vit import init_vit_params
from hybridmask.vit import patchify
from hybridmask.vit import unpatchify
from hybridmask.vit import vit_encode

logger = logging.getLogger(__name__)

SEG_HEAD = "seg_head"


def init_pretrain_params(
    config: ModelConfig,
    crop: Sequence[int],
    seed: int,
    precision="float32",
) -> ModelParams:
    """
    Return fresh parameters of the pretraining model for volumes of shape
    ``crop``: encoder, transformer, decoder with mask embeddings and the
    reconstruction head.
    """
    builder = ParamBuilder(seed, precision)
    grid = junction_shape(crop, config.cnn.stage_strides)
    init_cnn_params(builder, config.cnn)
    init_vit_params(builder, config.vit, config.cnn.channels[-1], grid)
    init_decoder_params(builder, config, mask_embeds=True)
    init_head_params(builder, config, "head")
    return builder.params


def init_segmentation_params(
    config: ModelConfig,
    crop: Sequence[int],
    seed: int,
    precision="float32",
) -> ModelParams:
    """
    Return fresh parameters of the segmentation model: encoder,
    transformer, decoder without mask embeddings and a one-channel head.
    """
    builder = ParamBuilder(seed, precision)
    grid = junction_shape(crop, config.cnn.stage_strides)
    init_cnn_params(builder, config.cnn)
    init_vit_params(builder, config.vit, config.cnn.channels[-1], grid)
    init_decoder_params(builder, config, mask_embeds=False)
    init_head_params(builder, config, SEG_HEAD)
    return builder.params


def transfer_encoder(pretrained: Mapping[str, np.ndarray], target: ModelParams) -> List[str]:
    """
    Copy every transferable array of ``pretrained``, a name to array
    mapping such as a checkpoint holds, into ``target`` and return the
    copied names. Both sides must hold the same transferable names.
    """
    source = {n: a for n, a in pretrained.items() if is_transferable(n)}
    wanted = {n for n in target if is_transferable(n)}
    if set(source) != wanted:
        raise ConsistencyError(
            f"encoder parameters differ: missing {sorted(wanted - set(source))}, "
            f"unexpected {sorted(set(source) - wanted)}"
        )
    target.load_state_dict(source, strict=False)
    return sorted(source)


@attr.attributes(eq=False, frozen=True)
class HybridOutput:
    """Intermediate and final results of one forward pass."""

    output = attr.ib(repr=False, metadata=dict(help="Tensor [D, H, W] at input resolution."))
    features = attr.ib(repr=False, metadata=dict(help="SparseFeatureMap per scale, S_N from the transformer."))
    tokens = attr.ib(repr=False, metadata=dict(help="TokenSequence leaving the transformer."))
    dense = attr.ib(repr=False, metadata=dict(help="Dense Tensor [C, D, H, W] per scale fed to the decoder."))


def encode(volume, pyramid: MaskPyramid, params: ModelParams, config: ModelConfig):
    """
    Return the sparse features of every scale, the junction ones replaced
    by the transformer output, and the transformer tokens.
    """
    features = encode_cnn(volume, pyramid, params, config.cnn)
    junction = pyramid.junction
    tokens = vit_encode(patchify(features[-1], junction, params), params, config.vit)
    features[-1] = unpatchify(tokens, junction, config.cnn.channels[-1], params)
    return features, tokens


def pretrain_forward(volume, pyramid: MaskPyramid, params: ModelParams, config: ModelConfig):
    """
    Return the HybridOutput of masked reconstruction: masked cells of the
    scales entering the decoder carry their mask embedding.
    """
    features, tokens = encode(volume, pyramid, params, config)
    embedded = set(projected_scales(config))
    dense = []
    for scale, feature_map in enumerate(features, start=1):
        if scale in embedded:
            dense.append(densify_with_mask_embedding(feature_map, params[mask_embed_name(scale)]))
        else:
            dense.append(densify(feature_map))
    d_1 = decode(dense, params, config)
    output = reconstruct_head(d_1, params, config.cnn.stem_stride, "head")
    return HybridOutput(output=output, features=features, tokens=tokens, dense=dense)


def full_pyramid(shape: Sequence[int], config: ModelConfig) -> MaskPyramid:
    """Return the all-active pyramid for volumes of ``shape``."""
    strides = config.cnn.stage_strides
    grid = junction_shape(shape, strides)
    junction = MaskGrid(bits=np.ones(grid, dtype=bool), scale_id=config.cnn.num_stages)
    return build_pyramid(junction, strides, shape)


def dense_encode(volume, params: ModelParams, config: ModelConfig, pyramid: Optional[MaskPyramid] = None):
    """
    Return the dense ``[C, D, H, W]`` features of every scale of an
    unmasked ``volume``: the sparse path with every cell active.
    """
    if pyramid is None:
        pyramid = full_pyramid(volume_tensor(volume).shape, config)
    features, _tokens = encode(volume, pyramid, params, config)
    return [densify(f) for f in features]


def segment_forward(volume, params: ModelParams, config: ModelConfig):
    """Return the HybridOutput whose output holds foreground logits."""
    pyramid = full_pyramid(volume_tensor(volume).shape, config)
    features, tokens = encode(volume, pyramid, params, config)
    dense = [densify(f) for f in features]
    d_1 = decode(dense, params, config)
    output = reconstruct_head(d_1, params, config.cnn.stem_stride, SEG_HEAD)
    return HybridOutput(output=output, features=features, tokens=tokens, dense=dense)
