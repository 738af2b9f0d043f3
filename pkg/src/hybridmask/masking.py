#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
Bottom-up hybrid masking.

The mask is drawn once at the junction between the CNN encoder and the
transformer, then replicated backward (nearest neighbor) to the resolution
of every CNN stage and to voxel resolution, so that a pooling window never
mixes masked and unmasked cells.

Stage strides are listed input-first: ``stage_strides[0]`` is the stem
stride from the input volume to stage 1 and ``stage_strides[i]`` is the
stride from stage ``i`` to stage ``i + 1``. The junction grid is the input
shape divided by the product of all strides.
"""

import json
import logging
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import attr
import numpy as np
from pydantic import BaseModel
from pydantic import Extra
from pydantic import Field

from hybridmask.errors import ConfigError
from hybridmask.errors import ConsistencyError
from hybridmask.errors import DimensionError
from hybridmask.errors import FormatError

logger = logging.getLogger(__name__)

AXES = ("D", "H", "W")


def _readonly_bits(bits) -> np.ndarray:
    bits = np.array(bits, dtype=bool)
    if bits.ndim != 3:
        raise DimensionError(f"mask bits must be 3D, got shape {bits.shape}")
    bits.flags.writeable = False
    return bits


@attr.attributes(eq=False, frozen=True)
class MaskGrid:
    """
    A boolean grid of cells at one scale. True marks an active (unmasked)
    cell.
    """

    bits = attr.ib(
        converter=_readonly_bits,
        repr=False,
        metadata=dict(help="Read-only boolean array, True marks an active cell."),
    )

    scale_id = attr.ib(
        type=int,
        default=0,
        metadata=dict(help="Stage index 1..N, 0 for voxel resolution."),
    )

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.bits.shape)

    @property
    def cells(self) -> int:
        return int(self.bits.size)

    @property
    def active_count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def masked_count(self) -> int:
        return self.cells - self.active_count

    @property
    def keep_ratio(self) -> float:
        return self.active_count / self.cells

    def active_coords(self) -> np.ndarray:
        """Return the ``[P, 3]`` coordinates of active cells in scan order."""
        return np.argwhere(self.bits)

    def flat_active_index(self) -> np.ndarray:
        """Return the row-major flat index of each active cell in scan order."""
        return np.flatnonzero(self.bits)

    def index_volume(self) -> np.ndarray:
        """
        Return an int array of the grid shape holding the scan-order row of
        each active cell and -1 at masked cells.
        """
        index = np.full(self.shape, -1, dtype=np.int64)
        index[self.bits] = np.arange(self.active_count)
        return index

    def same_bits(self, other: "MaskGrid") -> bool:
        return self.shape == other.shape and np.array_equal(self.bits, other.bits)

    def with_scale(self, scale_id: int) -> "MaskGrid":
        return MaskGrid(bits=self.bits, scale_id=scale_id)

    def __repr__(self):
        return (
            f"MaskGrid(shape={self.shape}, scale_id={self.scale_id}, "
            f"active={self.active_count}/{self.cells})"
        )


def masked_cell_count(cells: int, mask_ratio: float) -> int:
    """
    Return how many of ``cells`` are masked at ``mask_ratio``, rounding half
    up and keeping at least one active and one masked cell when the ratio is
    strictly between 0 and 1.

    >>> masked_cell_count(216, 0.75)
    162
    >>> masked_cell_count(8, 0.01)
    1
    >>> masked_cell_count(8, 0.0)
    0
    """
    if not 0.0 <= mask_ratio < 1.0:
        raise ConfigError(f"mask ratio must be in [0, 1), got {mask_ratio}")
    if mask_ratio == 0.0:
        return 0
    masked = int(np.floor(mask_ratio * cells + 0.5))
    return min(max(masked, 1), cells - 1)


def init_junction_mask(
    grid_shape: Sequence[int],
    mask_ratio: float,
    seed: int,
    scale_id: int = 0,
) -> MaskGrid:
    """
    Return a junction MaskGrid of ``grid_shape`` with
    ``masked_cell_count(cells, mask_ratio)`` masked cells drawn uniformly
    without replacement from a generator seeded with ``seed``.
    """
    grid_shape = tuple(int(e) for e in grid_shape)
    if len(grid_shape) != 3:
        raise ConfigError(f"junction grid must be 3D, got {grid_shape}")
    cells = int(np.prod(grid_shape))
    if cells < 2:
        raise ConfigError(f"junction grid {grid_shape} needs at least 2 cells")
    masked = masked_cell_count(cells, mask_ratio)
    rng = np.random.default_rng(seed)
    bits = np.ones(cells, dtype=bool)
    bits[rng.permutation(cells)[:masked]] = False
    return MaskGrid(bits=bits.reshape(grid_shape), scale_id=scale_id)


def upsample_mask(mask: MaskGrid, factor: int, scale_id: Optional[int] = None) -> MaskGrid:
    """
    Return ``mask`` with every cell replicated into a ``factor``^3 block.
    """
    if factor < 1:
        raise ConfigError(f"mask upsample factor must be >= 1, got {factor}")
    scale_id = mask.scale_id if scale_id is None else scale_id
    if factor == 1:
        return mask.with_scale(scale_id)
    bits = mask.bits
    for axis in range(3):
        bits = np.repeat(bits, factor, axis=axis)
    return MaskGrid(bits=bits, scale_id=scale_id)


def downsample_mask(mask: MaskGrid, factor: int, scale_id: Optional[int] = None) -> MaskGrid:
    """
    Return the block downsampling of ``mask``: a block of ``factor``^3 cells
    is active if any of its cells is active.
    """
    if factor < 1:
        raise ConfigError(f"mask downsample factor must be >= 1, got {factor}")
    for axis, extent in zip(AXES, mask.shape):
        if extent % factor:
            raise DimensionError(f"mask axis {axis} extent {extent} not divisible by {factor}")
    scale_id = mask.scale_id if scale_id is None else scale_id
    d, h, w = mask.shape
    f = factor
    blocks = mask.bits.reshape(d // f, f, h // f, f, w // f, f)
    return MaskGrid(bits=blocks.any(axis=(1, 3, 5)), scale_id=scale_id)


@attr.attributes(eq=False, frozen=True)
class MaskPyramid:
    """
    The masks of every CNN stage, M_1 (finest) to M_N (the junction), and
    the voxel-level mask of the input volume.
    """

    stages = attr.ib(
        converter=tuple,
        metadata=dict(help="MaskGrid of each stage, M_1 first and the junction M_N last."),
    )

    voxel = attr.ib(
        metadata=dict(help="MaskGrid at input resolution."),
    )

    stage_strides = attr.ib(
        converter=tuple,
        metadata=dict(help="Stem stride then the stride of each stage transition."),
    )

    bottom_up = attr.ib(
        type=bool,
        default=True,
        metadata=dict(help="False when stage masks were sampled independently."),
    )

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def junction(self) -> MaskGrid:
        return self.stages[-1]

    def stage(self, index: int) -> MaskGrid:
        """Return M_index, with index counted from 1."""
        if not 1 <= index <= self.num_stages:
            raise ConfigError(f"stage index {index} outside 1..{self.num_stages}")
        return self.stages[index - 1]

    def upsample_factor(self, index: int) -> int:
        """Return the replication factor from the junction to stage ``index``."""
        return int(np.prod(self.stage_strides[index:], dtype=np.int64))


def junction_shape(input_shape: Sequence[int], stage_strides: Sequence[int]) -> Tuple[int, ...]:
    """
    Return the junction grid shape for ``input_shape`` and ``stage_strides``.

    >>> junction_shape((96, 96, 96), [2, 2, 2, 2])
    (6, 6, 6)
    """
    total = int(np.prod(stage_strides, dtype=np.int64))
    if len(input_shape) != 3:
        raise ConfigError(f"input shape must be 3D, got {tuple(input_shape)}")
    for axis, extent in zip(AXES, input_shape):
        if extent % total:
            raise ConfigError(
                f"input axis {axis} extent {extent} not divisible by the "
                f"cumulative stride {total}"
            )
    return tuple(int(extent) // total for extent in input_shape)


def build_pyramid(
    junction: MaskGrid,
    stage_strides: Sequence[int],
    input_shape: Sequence[int],
) -> MaskPyramid:
    """
    Return the MaskPyramid replicating ``junction`` to every stage and to
    ``input_shape``.
    """
    stage_strides = tuple(int(s) for s in stage_strides)
    if not stage_strides or any(s < 1 for s in stage_strides):
        raise ConfigError(f"invalid stage strides {stage_strides}")
    expected = junction_shape(input_shape, stage_strides)
    if junction.shape != expected:
        raise ConfigError(
            f"junction shape {junction.shape} does not match input {tuple(input_shape)} "
            f"divided by strides {stage_strides}: expected {expected}"
        )
    num_stages = len(stage_strides)
    stages = [junction.with_scale(num_stages)]
    for index in range(num_stages - 1, 0, -1):
        stages.insert(0, upsample_mask(stages[0], stage_strides[index], scale_id=index))
    voxel = upsample_mask(stages[0], stage_strides[0], scale_id=0)
    return MaskPyramid(stages=stages, voxel=voxel, stage_strides=stage_strides)


def build_independent_pyramid(
    junction: MaskGrid,
    stage_strides: Sequence[int],
    input_shape: Sequence[int],
    mask_ratio: float,
    seed: int,
) -> MaskPyramid:
    """
    Return a pyramid whose stage masks above the junction are re-sampled
    independently at ``mask_ratio``, ignoring the junction. The voxel mask
    stays the replication of the junction so that reconstruction targets
    are still defined per junction cell.

    This is the "without bottom-up masking" ablation; such a pyramid fails
    the cross-scale consistency check.
    """
    consistent = build_pyramid(junction, stage_strides, input_shape)
    stages = list(consistent.stages)
    for index in range(1, consistent.num_stages):
        stages[index - 1] = init_junction_mask(
            stages[index - 1].shape, mask_ratio, seed=[seed, index], scale_id=index
        )
    voxel = upsample_mask(junction, int(np.prod(stage_strides)), scale_id=0)
    return MaskPyramid(
        stages=stages, voxel=voxel, stage_strides=consistent.stage_strides, bottom_up=False
    )


def pyramid_violations(pyramid: MaskPyramid) -> List[str]:
    """
    Return a description of every cross-scale inconsistency of
    ``pyramid``: a stage whose block downsampling does not reproduce the
    next stage exactly, or whose blocks mix active and masked cells.
    """
    violations = []
    grids = [pyramid.voxel] + list(pyramid.stages)
    for finer, coarser, stride in zip(grids, grids[1:], pyramid.stage_strides):
        name = f"M_{finer.scale_id}" if finer.scale_id else "voxel mask"
        try:
            down = downsample_mask(finer, stride)
        except DimensionError as e:
            violations.append(f"{name}: {e}")
            continue
        if not down.same_bits(coarser):
            violations.append(f"{name} downsampled by {stride} differs from M_{coarser.scale_id}")
            continue
        if not upsample_mask(coarser, stride).same_bits(finer):
            violations.append(f"{name} has blocks mixing active and masked cells")
    return violations


def check_pyramid(pyramid: MaskPyramid) -> None:
    """Raise a ConsistencyError if ``pyramid`` is not consistent across scales."""
    violations = pyramid_violations(pyramid)
    if violations:
        raise ConsistencyError("; ".join(violations))


################################################################################
# Mask dump format
################################################################################


class MaskDumpHeader(BaseModel):
    """JSON header line of a run-length-encoded mask dump."""

    class Config:
        extra = Extra.forbid

    shape: List[int] = Field(..., description="Grid extents [D, H, W].")
    scale_id: int = Field(..., description="Stage index, 0 for voxel resolution.")
    ratio: float = Field(..., description="Mask ratio the mask was drawn with.")
    seed: int = Field(..., description="Seed the mask was drawn with.")
    first: bool = Field(
        default=True, description="Value of the first run; runs alternate from there."
    )


def encode_runs(bits: np.ndarray) -> Tuple[bool, List[int]]:
    """
    Return the first value and the run lengths of ``bits`` flattened in scan
    order.

    >>> encode_runs(np.array([1, 1, 0, 1], dtype=bool))
    (True, [2, 1, 1])
    """
    flat = np.asarray(bits, dtype=bool).reshape(-1)
    if flat.size == 0:
        return True, []
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    return bool(flat[0]), [int(n) for n in np.diff(bounds)]


def decode_runs(first: bool, runs: Sequence[int], shape: Sequence[int]) -> np.ndarray:
    total = int(np.prod(shape))
    if any(n <= 0 for n in runs) or sum(runs) != total:
        raise FormatError(f"mask runs do not cover {total} cells of shape {tuple(shape)}")
    values = [(first if i % 2 == 0 else not first) for i in range(len(runs))]
    return np.repeat(np.array(values, dtype=bool), runs).reshape(shape)


def dump_mask(mask: MaskGrid, location: str, ratio: float, seed: int) -> None:
    """
    Write ``mask`` at ``location``: a JSON header line then a line of
    comma-separated run lengths.
    """
    first, runs = encode_runs(mask.bits)
    header = MaskDumpHeader(
        shape=list(mask.shape), scale_id=mask.scale_id, ratio=ratio, seed=seed, first=first
    )
    with open(location, "w") as f:
        f.write(header.json())
        f.write("\n")
        f.write(",".join(str(n) for n in runs))
        f.write("\n")


def load_mask(location: str) -> Tuple[MaskGrid, MaskDumpHeader]:
    """Return the MaskGrid and header of the mask dump at ``location``."""
    with open(location) as f:
        lines = f.read().splitlines()
    if len(lines) < 2:
        raise FormatError(f"{location}: mask dump needs a header line and a runs line")
    try:
        header = MaskDumpHeader(**json.loads(lines[0]))
        runs = [int(n) for n in lines[1].split(",") if n]
    except ValueError as e:
        raise FormatError(f"{location}: invalid mask dump: {e}") from e
    bits = decode_runs(header.first, runs, header.shape)
    return MaskGrid(bits=bits, scale_id=header.scale_id), header
