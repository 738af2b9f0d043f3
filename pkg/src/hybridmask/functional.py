#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
Neural network primitives on :class:`hybridmask.tensor.Tensor`: 3D
convolution and pooling, affine maps, normalization, activations and
multi-head attention.

Convolution is cross-correlation (no kernel flip) on ``[N, C, D, H, W]``
arrays, as in deep learning frameworks.
"""

import itertools
import math
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from hybridmask.errors import ConfigError
from hybridmask.errors import DimensionError
from hybridmask.tensor import Function
from hybridmask.tensor import Tensor
from hybridmask.tensor import as_tensor

SPATIAL_AXES = ("D", "H", "W")

GELU_SCALE = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int, axis: str) -> int:
    """
    Return the output extent of a convolution along one spatial ``axis``.

    >>> conv_output_extent(96, 3, 1, 1, "D")
    96
    >>> conv_output_extent(7, 3, 2, 0, "H")
    3
    """
    span = extent + 2 * padding - kernel
    if span < 0 or span % stride:
        raise DimensionError(
            f"axis {axis}: extent {extent} with padding {padding} does not fit "
            f"kernel {kernel} at stride {stride}"
        )
    return span // stride + 1


class Conv3d(Function):
    def forward(self, x, w, b, stride, padding, groups):
        p, s = padding, stride
        k = w.shape[2]
        self.stride, self.padding, self.groups = s, p, groups
        self.x_shape = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x
        self.xp_shape = xp.shape
        # [N, Cin, D', H', W', k, k, k]
        windows = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::s, ::s, ::s]
        if groups == 1:
            out = np.tensordot(windows, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
            out = out.transpose(0, 4, 1, 2, 3)
        else:
            out = np.einsum("ncdhwijk,cijk->ncdhw", windows, w[:, 0])
        self.windows, self.w = windows, w
        return np.ascontiguousarray(out + b.reshape(1, -1, 1, 1, 1))

    def backward(self, grad):
        s, p, w = self.stride, self.padding, self.w
        k = w.shape[2]
        _, _, od, oh, ow = grad.shape
        gb = grad.sum(axis=(0, 2, 3, 4))
        gxp = np.zeros(self.xp_shape, dtype=grad.dtype)
        if self.groups == 1:
            gw = np.tensordot(grad, self.windows, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        else:
            gw = np.einsum("ncdhw,ncdhwijk->cijk", grad, self.windows)[:, None]
        for i, j, l in itertools.product(range(k), repeat=3):
            target = (
                slice(None),
                slice(None),
                slice(i, i + s * (od - 1) + 1, s),
                slice(j, j + s * (oh - 1) + 1, s),
                slice(l, l + s * (ow - 1) + 1, s),
            )
            if self.groups == 1:
                contribution = np.tensordot(grad, w[:, :, i, j, l], axes=([1], [0]))
                gxp[target] += contribution.transpose(0, 4, 1, 2, 3)
            else:
                gxp[target] += grad * w[:, 0, i, j, l].reshape(1, -1, 1, 1, 1)
        _, _, d, h, wd = self.x_shape
        gx = gxp[:, :, p : p + d, p : p + h, p : p + wd]
        return gx, gw, gb


def conv3d(
    input: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """
    Return the 3D cross-correlation of ``input`` ``[N, Cin, D, H, W]`` with
    ``weight`` ``[Cout, Cin / groups, k, k, k]`` plus ``bias`` ``[Cout]``.

    ``groups`` is 1 (full convolution) or the channel count (depthwise).
    """
    if input.ndim != 5:
        raise DimensionError(f"conv3d: input must be [N, C, D, H, W], got shape {input.shape}")
    if weight.ndim != 5:
        raise DimensionError(f"conv3d: weight must be [Cout, Cin, k, k, k], got {weight.shape}")
    cout, cin_g, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if weight.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ConfigError(f"conv3d: kernel must be cubic with odd extent, got {weight.shape[2:]}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv3d: invalid stride {stride} or padding {padding}")
    cin = input.shape[1]
    if groups == 1:
        if cin_g != cin:
            raise DimensionError(
                f"conv3d: channel axis C has {cin} input channels, weight expects {cin_g}"
            )
    elif groups == cin:
        if cin_g != 1 or cout != cin:
            raise DimensionError(
                f"conv3d: depthwise weight must be [{cin}, 1, k, k, k], got {weight.shape}"
            )
    else:
        raise ConfigError(f"conv3d: groups must be 1 or {cin}, got {groups}")
    for axis, extent in zip(SPATIAL_AXES, input.shape[2:]):
        conv_output_extent(extent, k, stride, padding, axis)
    if bias is None:
        bias = np.zeros(cout, dtype=input.dtype)
    elif bias.shape != (cout,):
        raise DimensionError(f"conv3d: bias must have shape ({cout},), got {bias.shape}")
    return Conv3d.apply(input, weight, bias, stride=stride, padding=padding, groups=groups)


class MaxPool3d(Function):
    def forward(self, x, window):
        n, c, d, h, w = x.shape
        f = window
        blocks = x.reshape(n, c, d // f, f, h // f, f, w // f, f)
        blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, d // f, h // f, w // f, -1)
        # argmax picks the first maximum in window scan order
        self.index = np.argmax(blocks, axis=-1)[..., None]
        self.blocks_shape, self.window = blocks.shape, f
        return np.take_along_axis(blocks, self.index, axis=-1)[..., 0]

    def backward(self, grad):
        f = self.window
        n, c, od, oh, ow, _ = self.blocks_shape
        gblocks = np.zeros(self.blocks_shape, dtype=grad.dtype)
        np.put_along_axis(gblocks, self.index, grad[..., None], axis=-1)
        gx = gblocks.reshape(n, c, od, oh, ow, f, f, f).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (gx.reshape(n, c, od * f, oh * f, ow * f),)


def max_pool3d(input: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """
    Return the non-overlapping 3D max pooling of ``input`` ``[N, C, D, H, W]``.
    Ties route the gradient to the first index in scan order.
    """
    stride = window if stride is None else stride
    if window != stride:
        raise ConfigError(f"max_pool3d: window {window} must equal stride {stride}")
    if window < 1:
        raise ConfigError(f"max_pool3d: invalid window {window}")
    if input.ndim != 5:
        raise DimensionError(f"max_pool3d: input must be [N, C, D, H, W], got {input.shape}")
    for axis, extent in zip(SPATIAL_AXES, input.shape[2:]):
        if extent % window:
            raise DimensionError(f"max_pool3d: axis {axis} extent {extent} not divisible by {window}")
    if window == 1:
        return input
    return MaxPool3d.apply(input, window=window)


class UpsampleNearest3d(Function):
    def forward(self, x, factor):
        n, c, d, h, w = x.shape
        f = self.factor = factor
        out = np.broadcast_to(
            x[:, :, :, None, :, None, :, None], (n, c, d, f, h, f, w, f)
        )
        return out.reshape(n, c, d * f, h * f, w * f)

    def backward(self, grad):
        n, c, d, h, w = grad.shape
        f = self.factor
        grad = grad.reshape(n, c, d // f, f, h // f, f, w // f, f)
        return (grad.sum(axis=(3, 5, 7)),)


def upsample_nearest3d(input: Tensor, factor: int) -> Tensor:
    """Return ``input`` ``[N, C, D, H, W]`` with each voxel replicated ``factor``^3 times."""
    if factor < 1:
        raise ConfigError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return input
    return UpsampleNearest3d.apply(input, factor=factor)


class Linear(Function):
    def forward(self, x, w, b):
        self.x, self.w = x, w
        return np.matmul(x, w.T) + b

    def backward(self, grad):
        fout, fin = self.w.shape
        g2 = grad.reshape(-1, fout)
        x2 = self.x.reshape(-1, fin)
        return np.matmul(grad, self.w), g2.T @ x2, g2.sum(axis=0)


def linear(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Return the affine map ``input @ weight.T + bias`` over the last axis."""
    if weight.ndim != 2:
        raise DimensionError(f"linear: weight must be [Fout, Fin], got {weight.shape}")
    fout, fin = weight.shape
    if input.shape[-1] != fin:
        raise DimensionError(
            f"linear: trailing axis has {input.shape[-1]} features, weight expects {fin}"
        )
    if bias is None:
        bias = np.zeros(fout, dtype=input.dtype)
    elif bias.shape != (fout,):
        raise DimensionError(f"linear: bias must have shape ({fout},), got {bias.shape}")
    return Linear.apply(input, weight, bias)


def channel_linear(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Apply :func:`linear` pointwise to the channel axis of ``[N, C, D, H, W]``."""
    out = linear(input.transpose(0, 2, 3, 4, 1), weight, bias)
    return out.transpose(0, 4, 1, 2, 3)


def layer_norm(input: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize ``input`` over its last axis to zero mean and unit variance, then scale and shift."""
    features = input.shape[-1]
    if gamma.shape != (features,) or beta.shape != (features,):
        raise DimensionError(
            f"layer_norm: gamma/beta must have shape ({features},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    mean = input.mean(axis=-1, keepdims=True)
    centered = input - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps) ** 0.5 * gamma + beta


def channel_layer_norm(input: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Apply :func:`layer_norm` over the channel axis of ``[N, C, D, H, W]``."""
    out = layer_norm(input.transpose(0, 2, 3, 4, 1), gamma, beta, eps)
    return out.transpose(0, 4, 1, 2, 3)


class Gelu(Function):
    def forward(self, x):
        self.x = x
        self.t = np.tanh(GELU_SCALE * (x + GELU_CUBIC * x**3))
        return 0.5 * x * (1 + self.t)

    def backward(self, grad):
        x, t = self.x, self.t
        du = GELU_SCALE * (1 + 3 * GELU_CUBIC * x * x)
        return (grad * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * du),)


def gelu(input: Tensor) -> Tensor:
    """
    Return the tanh approximation of GELU.

    >>> gelu(Tensor([0.0])).data.tolist()
    [0.0]
    """
    return Gelu.apply(input)


class Softmax(Function):
    def forward(self, x, axis):
        self.axis = axis
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


def softmax(input: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(input, axis=axis)


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    proj_weight: Optional[Tensor] = None,
    proj_bias: Optional[Tensor] = None,
) -> Tensor:
    """
    Return scaled dot-product attention of ``[T, E]`` queries, keys and values
    split in ``heads`` heads, concatenated back to ``[T, E]`` and projected
    by ``proj_weight`` and ``proj_bias`` when provided.
    """
    if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(
            f"multi_head_attention: q, k, v must share one [T, E] shape, "
            f"got {q.shape}, {k.shape}, {v.shape}"
        )
    tokens, embed = q.shape
    if heads < 1 or embed % heads:
        raise ConfigError(f"attention heads {heads} must divide embed dim {embed}")
    head_dim = embed // heads

    def split_heads(t):
        return t.reshape(tokens, heads, head_dim).transpose(1, 0, 2)

    qh, kh, vh = split_heads(q), split_heads(k), split_heads(v)
    scores = (qh @ kh.transpose(0, 2, 1)) * (1.0 / math.sqrt(head_dim))
    weights = softmax(scores, axis=-1)
    out = (weights @ vh).transpose(1, 0, 2).reshape(tokens, embed)
    if proj_weight is not None:
        out = linear(out, proj_weight, proj_bias)
    return out


def sigmoid(input: Tensor) -> Tensor:
    return as_tensor(input).sigmoid()
