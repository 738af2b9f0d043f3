#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
The transformer encoder at the junction. Every active junction cell
becomes one token; masked cells produce no token at all, so attention only
ever sees visible content.
"""

import logging

import attr
import numpy as np

from hybridmask import functional as F
from hybridmask.config import VitConfig
from hybridmask.errors import ConsistencyError
from hybridmask.errors import DimensionError
from hybridmask.masking import MaskGrid
from hybridmask.params import ModelParams
from hybridmask.params import ParamBuilder
from hybridmask.sparse import SparseFeatureMap
from hybridmask.tensor import gather_rows

logger = logging.getLogger(__name__)


@attr.attributes(eq=False, frozen=True)
class TokenSequence:
    """
    Tokens of the visible junction cells, in scan order of their cells.
    """

    tokens = attr.ib(
        repr=False,
        metadata=dict(help="Tensor [T, E], one row per token."),
    )

    coords = attr.ib(
        repr=False,
        metadata=dict(help="int array [T, 3] of the junction cell of each token."),
    )

    grid_shape = attr.ib(
        converter=tuple,
        metadata=dict(help="Junction grid extents the coordinates index into."),
    )

    def __attrs_post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] != len(self.coords):
            raise ConsistencyError(
                f"{len(self.coords)} token coordinates for tokens of shape {self.tokens.shape}"
            )

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.tokens.shape[1]

    def replace(self, tokens) -> "TokenSequence":
        return TokenSequence(tokens=tokens, coords=self.coords, grid_shape=self.grid_shape)


def init_vit_params(builder: ParamBuilder, config: VitConfig, channels: int, grid_shape) -> None:
    """
    Add the transformer parameters to ``builder``; ``channels`` is the
    junction width and ``grid_shape`` the junction extents.
    """
    embed = config.embed_dim
    hidden = embed * config.mlp_ratio
    builder.linear("vit.patch_embed", embed, channels)
    builder.embedding("vit.pos_embed", (int(np.prod(grid_shape)), embed))
    for index in range(config.depth):
        prefix = f"vit.blocks.{index}"
        builder.norm(f"{prefix}.norm1", embed)
        builder.linear(f"{prefix}.attn.qkv", 3 * embed, embed)
        builder.linear(f"{prefix}.attn.proj", embed, embed)
        builder.norm(f"{prefix}.norm2", embed)
        builder.linear(f"{prefix}.mlp.fc1", hidden, embed)
        builder.linear(f"{prefix}.mlp.fc2", embed, hidden)
    builder.linear("vit.unpatch", channels, embed)


def patchify(s_n: SparseFeatureMap, m_n: MaskGrid, params: ModelParams) -> TokenSequence:
    """
    Return one token per active junction cell: the projected channel
    vector plus the positional embedding of the cell.
    """
    if not s_n.mask.same_bits(m_n) or s_n.scale_id != m_n.scale_id:
        raise ConsistencyError(
            f"patchify: features at scale {s_n.scale_id} do not live on the junction mask "
            f"M_{m_n.scale_id}"
        )
    pos_embed = params["vit.pos_embed"]
    if pos_embed.shape[0] != m_n.cells:
        raise DimensionError(
            f"patchify: positional table has {pos_embed.shape[0]} cells, junction "
            f"M_{m_n.scale_id} of shape {m_n.shape} has {m_n.cells}"
        )
    tokens = F.linear(s_n.features, params["vit.patch_embed.weight"], params["vit.patch_embed.bias"])
    tokens = tokens + gather_rows(pos_embed, m_n.flat_active_index())
    return TokenSequence(tokens=tokens, coords=m_n.active_coords(), grid_shape=m_n.shape)


def transformer_block(x, params: ModelParams, prefix: str, heads: int):
    embed = x.shape[1]
    h = F.layer_norm(x, params[f"{prefix}.norm1.gamma"], params[f"{prefix}.norm1.beta"])
    qkv = F.linear(h, params[f"{prefix}.attn.qkv.weight"], params[f"{prefix}.attn.qkv.bias"])
    attended = F.multi_head_attention(
        qkv[:, :embed],
        qkv[:, embed : 2 * embed],
        qkv[:, 2 * embed :],
        heads,
        params[f"{prefix}.attn.proj.weight"],
        params[f"{prefix}.attn.proj.bias"],
    )
    x = x + attended
    h = F.layer_norm(x, params[f"{prefix}.norm2.gamma"], params[f"{prefix}.norm2.beta"])
    h = F.gelu(F.linear(h, params[f"{prefix}.mlp.fc1.weight"], params[f"{prefix}.mlp.fc1.bias"]))
    return x + F.linear(h, params[f"{prefix}.mlp.fc2.weight"], params[f"{prefix}.mlp.fc2.bias"])


def vit_encode(tokens: TokenSequence, params: ModelParams, config: VitConfig) -> TokenSequence:
    """Run the pre-norm transformer blocks; coordinates pass through."""
    if tokens.num_tokens == 0:
        raise ConsistencyError("vit_encode: no visible token")
    x = tokens.tokens
    for index in range(config.depth):
        x = transformer_block(x, params, f"vit.blocks.{index}", config.heads)
    return tokens.replace(x)


def unpatchify(
    tokens: TokenSequence,
    m_n: MaskGrid,
    channels: int,
    params: ModelParams,
) -> SparseFeatureMap:
    """Project tokens back to ``channels`` and place them on the active cells of ``m_n``."""
    if tokens.grid_shape != m_n.shape or not np.array_equal(tokens.coords, m_n.active_coords()):
        raise ConsistencyError(
            f"unpatchify: token coordinates do not match the active cells of M_{m_n.scale_id}"
        )
    features = F.linear(tokens.tokens, params["vit.unpatch.weight"], params["vit.unpatch.bias"])
    if features.shape[1] != channels:
        raise DimensionError(
            f"unpatchify: projection yields {features.shape[1]} channels, expected {channels}"
        )
    return SparseFeatureMap(features=features, mask=m_n)
