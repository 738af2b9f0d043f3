#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
Mask-preserving sparse 3D feature maps.

A SparseFeatureMap holds one feature row per active cell of a MaskGrid, in
scan order. Operations compute on active cells only: convolutions are
submanifold (the output active set is the input active set), normalization
statistics are taken over active cells, and pooling maps the active set of
one pyramid level onto the next. Masked cells never erode or leak into
active ones.
"""

import itertools
import logging
from typing import Optional

import attr
import numpy as np

from hybridmask import functional as F
from hybridmask.errors import ConfigError
from hybridmask.errors import ConsistencyError
from hybridmask.errors import DimensionError
from hybridmask.masking import MaskGrid
from hybridmask.masking import upsample_mask
from hybridmask.tensor import Tensor
from hybridmask.tensor import gather_rows
from hybridmask.tensor import scatter_rows

logger = logging.getLogger(__name__)

TRACE = False


@attr.attributes(eq=False, frozen=True)
class SparseFeatureMap:
    """
    Feature rows defined on the active cells of a mask, zero elsewhere.
    """

    features = attr.ib(
        repr=False,
        metadata=dict(help="Tensor [P, C]: one channel vector per active cell, scan order."),
    )

    mask = attr.ib(
        metadata=dict(help="MaskGrid whose active cells carry the feature rows."),
    )

    def __attrs_post_init__(self):
        if self.features.ndim != 2:
            raise DimensionError(
                f"sparse features must be [P, C], got shape {self.features.shape}"
            )
        if self.features.shape[0] != self.mask.active_count:
            raise ConsistencyError(
                f"{self.features.shape[0]} feature rows for {self.mask.active_count} "
                f"active cells of M_{self.mask.scale_id}"
            )

    @property
    def scale_id(self) -> int:
        return self.mask.scale_id

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def num_active(self) -> int:
        return self.features.shape[0]

    @property
    def spatial_shape(self):
        return self.mask.shape

    @property
    def shape(self):
        return self.mask.shape + (self.channels,)

    def coords(self) -> np.ndarray:
        return self.mask.active_coords()

    def replace(self, features: Tensor) -> "SparseFeatureMap":
        return SparseFeatureMap(features=features, mask=self.mask)


def _check_active_set(input: SparseFeatureMap, mask: MaskGrid, op: str) -> None:
    if not input.mask.same_bits(mask):
        raise ConsistencyError(
            f"{op}: active set of the input at scale {input.scale_id} does not match "
            f"the mask M_{mask.scale_id}"
        )


def neighbor_table(mask: MaskGrid, kernel: int) -> np.ndarray:
    """
    Return the ``[P, kernel^3]`` table of neighbor rows for every active cell
    of ``mask``: entry ``[p, o]`` is the row of the cell at kernel offset
    ``o`` (scan order over the kernel cube, centered) or -1 when that cell
    is masked or out of bounds.
    """
    radius = kernel // 2
    index = np.pad(mask.index_volume(), radius, constant_values=-1)
    coords = mask.active_coords() + radius
    offsets = np.array(list(itertools.product(range(kernel), repeat=3))) - radius
    positions = coords[:, None, :] + offsets[None, :, :]
    table = index[positions[..., 0], positions[..., 1], positions[..., 2]]
    if TRACE:
        logger.debug(
            f"neighbor_table: M_{mask.scale_id} {mask.active_count} rows, "
            f"{np.count_nonzero(table >= 0)} active pairs"
        )
    return table


def sparse_conv3d(
    input: SparseFeatureMap,
    mask: MaskGrid,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    padding: Optional[int] = None,
    groups: int = 1,
) -> SparseFeatureMap:
    """
    Return the submanifold convolution of ``input`` with ``weight``
    ``[Cout, Cin / groups, k, k, k]``: the output active set is the input
    active set and each output row equals the dense convolution of the
    zero-filled input evaluated at that cell.
    """
    _check_active_set(input, mask, "sparse_conv3d")
    if weight.ndim != 5:
        raise DimensionError(f"sparse_conv3d: weight must be [Cout, Cin, k, k, k], got {weight.shape}")
    cout, cin_g, k = weight.shape[:3]
    if weight.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ConfigError(f"sparse_conv3d: kernel must be cubic with odd extent, got {weight.shape[2:]}")
    if padding is None:
        padding = k // 2
    if padding != k // 2:
        raise ConfigError(
            f"sparse_conv3d: submanifold convolution needs padding {k // 2} for kernel {k}, "
            f"got {padding}"
        )
    rows, cin = input.features.shape
    taps = k**3
    table = neighbor_table(mask, k)
    gathered = gather_rows(input.features, table.reshape(-1))

    if groups == 1:
        if cin_g != cin:
            raise DimensionError(
                f"sparse_conv3d: channel axis has {cin} input channels, weight expects {cin_g}"
            )
        columns = gathered.reshape(rows, taps * cin)
        # [Cout, Cin, k, k, k] -> [k^3 * Cin, Cout], matching the column layout
        matrix = weight.reshape(cout, cin, taps).transpose(2, 1, 0).reshape(taps * cin, cout)
        out = columns @ matrix
    elif groups == cin:
        if cin_g != 1 or cout != cin:
            raise DimensionError(
                f"sparse_conv3d: depthwise weight must be [{cin}, 1, k, k, k], got {weight.shape}"
            )
        columns = gathered.reshape(rows, taps, cin)
        out = (columns * weight.reshape(cin, taps).transpose(1, 0)).sum(axis=1)
    else:
        raise ConfigError(f"sparse_conv3d: groups must be 1 or {cin}, got {groups}")

    if bias is not None:
        if bias.shape != (cout,):
            raise DimensionError(f"sparse_conv3d: bias must have shape ({cout},), got {bias.shape}")
        out = out + bias
    return SparseFeatureMap(features=out, mask=mask)


def sparse_max_pool(
    input: SparseFeatureMap,
    in_mask: MaskGrid,
    out_mask: MaskGrid,
    window: int,
    strict: bool = True,
) -> SparseFeatureMap:
    """
    Return the max pooling of ``input`` over non-overlapping ``window``^3
    blocks onto the active cells of ``out_mask``.

    With ``strict`` the input mask must be the replication of ``out_mask``,
    so that every pooled window is entirely active. Without it, masked cells
    of a window read as zero; this only serves the ablation that breaks the
    bottom-up rule.
    """
    _check_active_set(input, in_mask, "sparse_max_pool")
    if window < 1:
        raise ConfigError(f"sparse_max_pool: invalid window {window}")
    expected_shape = tuple(e * window for e in out_mask.shape)
    if in_mask.shape != expected_shape:
        raise DimensionError(
            f"sparse_max_pool: input grid {in_mask.shape} is not output grid "
            f"{out_mask.shape} times {window}"
        )
    if strict and not upsample_mask(out_mask, window).same_bits(in_mask):
        raise ConsistencyError(
            f"sparse_max_pool: M_{in_mask.scale_id} is not the replication of "
            f"M_{out_mask.scale_id} by {window}"
        )
    channels = input.channels
    in_index = in_mask.index_volume()
    offsets = np.array(list(itertools.product(range(window), repeat=3)))
    positions = out_mask.active_coords()[:, None, :] * window + offsets[None, :, :]
    table = in_index[positions[..., 0], positions[..., 1], positions[..., 2]]
    gathered = gather_rows(input.features, table.reshape(-1))
    pooled = gathered.reshape(out_mask.active_count, window**3, channels).max(axis=1)
    return SparseFeatureMap(features=pooled, mask=out_mask)


def sparse_norm(
    input: SparseFeatureMap,
    gamma: Tensor,
    beta: Tensor,
    groups: Optional[int] = None,
    eps: float = 1e-6,
) -> SparseFeatureMap:
    """
    Return group normalization of ``input`` with statistics taken over the
    active cells only. ``groups`` defaults to the channel count.
    """
    rows, channels = input.features.shape
    groups = channels if groups is None else groups
    if groups < 1 or channels % groups:
        raise ConfigError(f"sparse_norm: {groups} groups do not divide {channels} channels")
    if rows == 0:
        raise ConsistencyError(f"sparse_norm: no active cell at scale {input.scale_id}")
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(
            f"sparse_norm: gamma/beta must have shape ({channels},), got {gamma.shape}, {beta.shape}"
        )
    x = input.features.reshape(rows, groups, channels // groups)
    mean = x.mean(axis=(0, 2), keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=(0, 2), keepdims=True)
    normalized = (centered / (var + eps) ** 0.5).reshape(rows, channels)
    return input.replace(normalized * gamma + beta)


def sparse_linear(input: SparseFeatureMap, weight: Tensor, bias: Optional[Tensor] = None):
    """Apply a pointwise affine map to the channels of every active cell."""
    return input.replace(F.linear(input.features, weight, bias))


def sparse_gelu(input: SparseFeatureMap) -> SparseFeatureMap:
    return input.replace(F.gelu(input.features))


def sparse_add(a: SparseFeatureMap, b: SparseFeatureMap) -> SparseFeatureMap:
    """Return the sum of two maps sharing one active set."""
    _check_active_set(a, b.mask, "sparse_add")
    return a.replace(a.features + b.features)


def sparsify(dense: Tensor, mask: MaskGrid) -> SparseFeatureMap:
    """
    Return the rows of ``dense`` ``[C, D, H, W]`` at the active cells of
    ``mask``; the rest is discarded.
    """
    if dense.ndim != 4:
        raise DimensionError(f"sparsify: dense input must be [C, D, H, W], got {dense.shape}")
    if tuple(dense.shape[1:]) != mask.shape:
        raise DimensionError(
            f"sparsify: spatial shape {tuple(dense.shape[1:])} does not match mask {mask.shape}"
        )
    channels = dense.shape[0]
    rows = dense.transpose(1, 2, 3, 0).reshape(mask.cells, channels)
    return SparseFeatureMap(features=gather_rows(rows, mask.flat_active_index()), mask=mask)


def densify(input: SparseFeatureMap) -> Tensor:
    """Return ``input`` as a dense ``[C, D, H, W]`` tensor, zero at masked cells."""
    return densify_with_mask_embedding(input, None)


def densify_with_mask_embedding(input: SparseFeatureMap, mask_embed: Optional[Tensor]) -> Tensor:
    """
    Return ``input`` as a dense ``[C, D, H, W]`` tensor where every masked
    cell carries ``mask_embed`` ``[C]``, or zero when ``mask_embed`` is None.
    """
    mask = input.mask
    channels = input.channels
    dense = scatter_rows(input.features, mask.flat_active_index(), mask.cells)
    if mask_embed is not None:
        if mask_embed.shape != (channels,):
            raise DimensionError(
                f"mask embedding must have shape ({channels},), got {mask_embed.shape}"
            )
        if mask.masked_count:
            masked = (~mask.bits).reshape(mask.cells, 1).astype(input.features.dtype)
            dense = dense + Tensor(masked) * mask_embed
    return dense.reshape(mask.shape + (channels,)).transpose(3, 0, 1, 2)


def dense_masked_conv3d(
    input: SparseFeatureMap,
    mask: MaskGrid,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    groups: int = 1,
) -> SparseFeatureMap:
    """
    Return :func:`sparse_conv3d` computed the dense way: zero-fill, run the
    dense convolution, keep the active cells. Slow, used to cross-check the
    gather path.
    """
    _check_active_set(input, mask, "dense_masked_conv3d")
    k = weight.shape[2]
    dense = densify(input).reshape((1,) + (input.channels,) + mask.shape)
    out = F.conv3d(dense, weight, bias, stride=1, padding=k // 2, groups=groups)
    return sparsify(out.reshape(out.shape[1:]), mask)
