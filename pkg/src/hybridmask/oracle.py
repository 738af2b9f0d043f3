#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
Slow reference implementations that the fast paths are checked against.

Nothing here calls the autodiff tensor or the sparse operations: the
oracles compute with plain numpy in 64-bit floats, one obvious step at a
time. They share only parameter names and mask types with the model.
"""

import itertools
import logging
from typing import Callable
from typing import Dict
from typing import List
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import Tuple

import attr
import numpy as np

from hybridmask.errors import ConfigError
from hybridmask.errors import DimensionError
from hybridmask.errors import OracleError

logger = logging.getLogger(__name__)

NORM_EPS = 1e-6
GELU_SCALE = np.sqrt(2.0 / np.pi)


def _f64(value) -> np.ndarray:
    return np.asarray(getattr(value, "data", value), dtype=np.float64)


def brute_force_conv3d(input, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1):
    """
    Return the cross-correlation of ``input`` ``[N, Cin, D, H, W]`` with
    ``weight`` ``[Cout, Cin / groups, k, k, k]``, one output value at a time.
    """
    x, w = _f64(input), _f64(weight)
    if x.ndim != 5 or w.ndim != 5:
        raise DimensionError(f"brute_force_conv3d: input {x.shape} and weight {w.shape} must be 5D")
    n, cin, d, h, wd = x.shape
    cout, cin_g, k = w.shape[:3]
    if groups not in (1, cin) or (groups == 1 and cin_g != cin) or (groups == cin and cin_g != 1):
        raise DimensionError(f"brute_force_conv3d: weight {w.shape} does not fit {cin} channels")
    b = np.zeros(cout) if bias is None else _f64(bias)
    xp = np.zeros((n, cin, d + 2 * padding, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + d, padding : padding + h, padding : padding + wd] = x
    extents = []
    for axis, extent in zip("DHW", (d, h, wd)):
        span = extent + 2 * padding - k
        if span < 0 or span % stride:
            raise DimensionError(f"brute_force_conv3d: axis {axis} does not fit the kernel")
        extents.append(span // stride + 1)
    od, oh, ow = extents

    out = np.zeros((n, cout, od, oh, ow))
    for b_ in range(n):
        for co in range(cout):
            inputs = [co] if groups != 1 else range(cin)
            for z, y, v in itertools.product(range(od), range(oh), range(ow)):
                acc = b[co]
                for ci in inputs:
                    window = xp[b_, ci, z * stride : z * stride + k, y * stride : y * stride + k]
                    window = window[:, :, v * stride : v * stride + k]
                    acc += float(np.sum(window * w[co, 0 if groups != 1 else ci]))
                out[b_, co, z, y, v] = acc
    return out


def _shift_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, depthwise: bool) -> np.ndarray:
    """Same-padding stride-1 convolution of ``x`` ``[C, D, H, W]`` by shifted slices."""
    c, d, h, wd = x.shape
    k = w.shape[2]
    r = k // 2
    xp = np.pad(x, ((0, 0), (r, r), (r, r), (r, r)))
    out = np.zeros((w.shape[0], d, h, wd)) + b.reshape(-1, 1, 1, 1)
    for i, j, l in itertools.product(range(k), repeat=3):
        shifted = xp[:, i : i + d, j : j + h, l : l + wd]
        if depthwise:
            out += w[:, 0, i, j, l].reshape(-1, 1, 1, 1) * shifted
        else:
            out += np.einsum("oc,cdhw->odhw", w[:, :, i, j, l], shifted)
    return out


def _pointwise(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("oc,cdhw->odhw", w, x) + b.reshape(-1, 1, 1, 1)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1 + np.tanh(GELU_SCALE * (x + 0.044715 * x**3)))


def _group_norm(x, gamma, beta, groups, sites, eps):
    """Normalize ``x`` ``[C, D, H, W]`` with statistics over ``sites`` only."""
    c = x.shape[0]
    out = np.zeros_like(x)
    size = c // groups
    for g in range(groups):
        block = x[g * size : (g + 1) * size]
        values = block[:, sites]
        mean = values.mean()
        var = ((values - mean) ** 2).mean()
        out[g * size : (g + 1) * size] = (block - mean) / np.sqrt(var + eps)
    return out * gamma.reshape(-1, 1, 1, 1) + beta.reshape(-1, 1, 1, 1)


def _max_pool(x: np.ndarray, f: int) -> np.ndarray:
    c, d, h, w = x.shape
    if f == 1:
        return x
    return x.reshape(c, d // f, f, h // f, f, w // f, f).max(axis=(2, 4, 6))


def dense_masked_forward(
    volume,
    pyramid,
    params: Mapping,
    config,
    remask: bool = True,
    eps: float = NORM_EPS,
) -> List[np.ndarray]:
    """
    Return the dense ``[C, D, H, W]`` features of every CNN stage, computed
    on the zero-filled masked input.

    With ``remask``, normalization statistics only cover active cells and
    every layer output is multiplied by the mask of its scale. Without it,
    this is a plain dense network on the zero-filled input, whose masked
    cells fill up with values layer after layer.
    """
    x = _f64(getattr(volume, "values", volume))
    if list(pyramid.stage_strides) != list(config.stage_strides):
        raise ConfigError("dense_masked_forward: pyramid and encoder strides differ")
    if x.shape != pyramid.voxel.shape:
        raise DimensionError(f"dense_masked_forward: volume {x.shape} vs mask {pyramid.voxel.shape}")

    def p(name):
        return _f64(params[name])

    def keep(h, mask):
        return h * mask.bits if remask else h

    def sites(mask):
        return mask.bits if remask else np.ones(mask.shape, dtype=bool)

    voxel = pyramid.voxel
    h = keep(x[None] * voxel.bits, voxel)
    h = keep(_shift_conv(h, p("encoder.stem.weight"), p("encoder.stem.bias"), False), voxel)
    h = keep(_max_pool(h, config.stage_strides[0]), pyramid.stage(1))

    outputs = []
    for stage in range(1, config.num_stages + 1):
        mask = pyramid.stage(stage)
        if stage > 1:
            h = keep(_max_pool(h, config.stage_strides[stage - 1]), mask)
            prefix = f"encoder.stages.{stage}.proj"
            h = keep(_pointwise(h, p(f"{prefix}.weight"), p(f"{prefix}.bias")), mask)
        for block in range(config.blocks):
            prefix = f"encoder.stages.{stage}.blocks.{block}"
            channels = h.shape[0]
            groups = config.norm_groups or channels
            y = keep(_shift_conv(h, p(f"{prefix}.dwconv.weight"), p(f"{prefix}.dwconv.bias"), True), mask)
            y = keep(
                _group_norm(y, p(f"{prefix}.norm.gamma"), p(f"{prefix}.norm.beta"), groups, sites(mask), eps),
                mask,
            )
            y = keep(_pointwise(y, p(f"{prefix}.expand.weight"), p(f"{prefix}.expand.bias")), mask)
            y = keep(_gelu(y), mask)
            y = keep(_pointwise(y, p(f"{prefix}.contract.weight"), p(f"{prefix}.contract.bias")), mask)
            h = keep(h + y, mask)
        outputs.append(h)
    return outputs


def nonzero_sites(features: np.ndarray) -> np.ndarray:
    """Return the boolean map of cells where any channel is nonzero."""
    return np.any(np.asarray(features) != 0, axis=0)


def finite_diff_grad(
    fn: Callable[[], float],
    array: np.ndarray,
    h: float = 1e-5,
    indices: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """
    Return central difference estimates of the derivative of ``fn`` with
    respect to the entries of ``array`` at the flat ``indices``, or at
    every entry. ``fn`` reads ``array``, which is perturbed in place and
    restored.
    """
    flat = array.reshape(-1)
    if not np.shares_memory(flat, array):
        raise OracleError("finite_diff_grad needs a contiguous array to perturb in place")
    indices = range(flat.size) if indices is None else indices
    estimates = []
    for index in indices:
        original = flat[index]
        flat[index] = original + h
        upper = fn()
        flat[index] = original - h
        lower = fn()
        flat[index] = original
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise OracleError(f"function is not finite around flat index {index}")
        estimates.append((upper - lower) / (2 * h))
    return np.array(estimates, dtype=np.float64)


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """
    Return ``|a - n| / max(|a|, |n|, floor)`` elementwise.

    >>> relative_error(1.0, 1.0).item()
    0.0
    """
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@attr.attributes(eq=False, frozen=True)
class GradCheck:
    """Outcome of a finite difference check over sampled coordinates."""

    max_rel_error = attr.ib(type=float)
    checked = attr.ib(type=int)
    worst = attr.ib(metadata=dict(help="(name, flat index) of the largest error."))

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def sample_coordinates(arrays: Mapping[str, np.ndarray], count: int, seed: int = 0) -> List[Tuple[str, int]]:
    """Return ``count`` (name, flat index) pairs drawn uniformly over all entries."""
    names = list(arrays)
    sizes = np.array([arrays[n].size for n in names])
    rng = np.random.default_rng(seed)
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(count, total), replace=False)
    bounds = np.cumsum(sizes)
    coords = []
    for pick in sorted(int(p) for p in picks):
        which = int(np.searchsorted(bounds, pick, side="right"))
        start = int(bounds[which - 1]) if which else 0
        coords.append((names[which], pick - start))
    return coords


def check_gradients(
    fn: Callable[[], float],
    arrays: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    count: int = 200,
    h: float = 1e-5,
    seed: int = 0,
) -> GradCheck:
    """
    Compare ``analytic`` gradients with central differences of ``fn`` at
    ``count`` sampled coordinates of ``arrays``.
    """
    worst, worst_error, checked = None, 0.0, 0
    by_name: Dict[str, List[int]] = {}
    for name, index in sample_coordinates(arrays, count, seed):
        by_name.setdefault(name, []).append(index)
    for name, indices in by_name.items():
        numeric = finite_diff_grad(fn, arrays[name], h, indices)
        exact = np.asarray(analytic[name]).reshape(-1)[indices]
        errors = relative_error(exact, numeric)
        checked += len(indices)
        position = int(np.argmax(errors))
        if errors[position] >= worst_error:
            worst_error = float(errors[position])
            worst = (name, int(indices[position]))
    return GradCheck(max_rel_error=worst_error, checked=checked, worst=worst)
