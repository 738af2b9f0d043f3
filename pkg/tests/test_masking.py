#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

import pathlib
import tempfile
from unittest import TestCase

import numpy as np
import pytest

from hybridmask.errors import ConfigError
from hybridmask.errors import ConsistencyError
from hybridmask.errors import DimensionError
from hybridmask.errors import FormatError
from hybridmask.masking import MaskGrid
from hybridmask.masking import build_independent_pyramid
from hybridmask.masking import build_pyramid
from hybridmask.masking import check_pyramid
from hybridmask.masking import decode_runs
from hybridmask.masking import downsample_mask
from hybridmask.masking import dump_mask
from hybridmask.masking import init_junction_mask
from hybridmask.masking import junction_shape
from hybridmask.masking import load_mask
from hybridmask.masking import masked_cell_count
from hybridmask.masking import pyramid_violations
from hybridmask.masking import upsample_mask

DESK_STRIDES = [2, 2, 2, 2]


class TestJunctionMask(TestCase):
    def test_masked_count_is_exact(self):
        for seed in range(10):
            mask = init_junction_mask((6, 6, 6), 0.75, seed)
            assert mask.masked_count == 162
            assert mask.active_count == 54

    def test_same_seed_same_mask(self):
        a = init_junction_mask((4, 4, 4), 0.5, 7)
        b = init_junction_mask((4, 4, 4), 0.5, 7)
        c = init_junction_mask((4, 4, 4), 0.5, 8)
        assert a.same_bits(b)
        assert not a.same_bits(c)

    def test_ratio_zero_keeps_every_cell(self):
        assert init_junction_mask((2, 2, 2), 0.0, 0).active_count == 8

    def test_small_ratio_masks_at_least_one_cell(self):
        mask = init_junction_mask((2, 2, 2), 0.01, 0)
        assert mask.masked_count == 1

    def test_high_ratio_keeps_at_least_one_cell(self):
        assert masked_cell_count(8, 0.99) == 7

    def test_ratio_one_is_rejected(self):
        with pytest.raises(ConfigError):
            init_junction_mask((2, 2, 2), 1.0, 0)
        with pytest.raises(ConfigError):
            init_junction_mask((2, 2, 2), -0.1, 0)

    def test_single_cell_grid_is_rejected(self):
        with pytest.raises(ConfigError):
            init_junction_mask((1, 1, 1), 0.5, 0)

    def test_mask_bits_are_read_only(self):
        mask = init_junction_mask((2, 2, 2), 0.5, 0)
        with pytest.raises(ValueError):
            mask.bits[0, 0, 0] = True

    def test_index_volume_numbers_active_cells_in_scan_order(self):
        bits = np.zeros((1, 2, 2), dtype=bool)
        bits[0, 0, 1] = bits[0, 1, 0] = True
        index = MaskGrid(bits=bits).index_volume()
        assert index.tolist() == [[[-1, 0], [1, -1]]]
        assert MaskGrid(bits=bits).active_coords().tolist() == [[0, 0, 1], [0, 1, 0]]

    def test_mask_grid_must_be_3d(self):
        with pytest.raises(DimensionError):
            MaskGrid(bits=np.ones((2, 2), dtype=bool))


class TestReplication(TestCase):
    def test_upsample_then_downsample_is_identity(self):
        mask = init_junction_mask((3, 2, 4), 0.5, 1)
        up = upsample_mask(mask, 4)
        assert up.shape == (12, 8, 16)
        assert downsample_mask(up, 4).same_bits(mask)

    def test_upsample_keeps_ratio(self):
        mask = init_junction_mask((3, 3, 3), 0.6, 2)
        assert upsample_mask(mask, 2).keep_ratio == mask.keep_ratio

    def test_downsample_is_any_active(self):
        bits = np.zeros((2, 2, 2), dtype=bool)
        bits[1, 1, 1] = True
        assert downsample_mask(MaskGrid(bits=bits), 2).bits.tolist() == [[[True]]]

    def test_downsample_rejects_indivisible_extent(self):
        with pytest.raises(DimensionError):
            downsample_mask(MaskGrid(bits=np.ones((3, 2, 2), dtype=bool)), 2)


class TestPyramid(TestCase):
    def test_junction_shape(self):
        assert junction_shape((32, 32, 32), DESK_STRIDES) == (2, 2, 2)
        assert junction_shape((96, 96, 96), DESK_STRIDES) == (6, 6, 6)

    def test_junction_shape_rejects_indivisible_input(self):
        with pytest.raises(ConfigError) as e:
            junction_shape((32, 30, 32), DESK_STRIDES)
        assert "axis H" in str(e.value)

    def test_pyramid_shapes_and_scales(self):
        junction = init_junction_mask((2, 2, 2), 0.5, 0)
        pyramid = build_pyramid(junction, DESK_STRIDES, (32, 32, 32))
        assert [m.shape for m in pyramid.stages] == [(16,) * 3, (8,) * 3, (4,) * 3, (2,) * 3]
        assert [m.scale_id for m in pyramid.stages] == [1, 2, 3, 4]
        assert pyramid.voxel.shape == (32, 32, 32)
        assert pyramid.voxel.scale_id == 0
        assert pyramid.junction.same_bits(junction)
        assert pyramid.upsample_factor(1) == 8

    def test_pyramid_is_consistent_for_many_seeds(self):
        for seed in range(20):
            junction = init_junction_mask((3, 2, 2), 0.75, seed)
            pyramid = build_pyramid(junction, [2, 2, 2], (24, 16, 16))
            assert pyramid_violations(pyramid) == []
            for stage in range(1, pyramid.num_stages + 1):
                assert pyramid.stage(stage).keep_ratio == junction.keep_ratio

    def test_pyramid_with_mismatched_junction(self):
        junction = init_junction_mask((3, 3, 3), 0.5, 0)
        with pytest.raises(ConfigError):
            build_pyramid(junction, DESK_STRIDES, (32, 32, 32))

    def test_stage_index_is_one_based(self):
        pyramid = build_pyramid(init_junction_mask((2, 2, 2), 0.5, 0), [2, 2], (8, 8, 8))
        with pytest.raises(ConfigError):
            pyramid.stage(0)
        with pytest.raises(ConfigError):
            pyramid.stage(3)

    def test_independent_pyramid_is_flagged_inconsistent(self):
        junction = init_junction_mask((2, 2, 2), 0.5, 3)
        pyramid = build_independent_pyramid(junction, DESK_STRIDES, (32, 32, 32), 0.5, 3)
        assert not pyramid.bottom_up
        assert pyramid.junction.same_bits(junction)
        assert upsample_mask(junction, 16).same_bits(pyramid.voxel)
        assert pyramid_violations(pyramid)
        with pytest.raises(ConsistencyError):
            check_pyramid(pyramid)


class TestMaskDump(TestCase):
    def test_dump_and_load(self):
        mask = init_junction_mask((3, 4, 5), 0.4, 11, scale_id=2)
        with tempfile.TemporaryDirectory() as tmp:
            location = str(pathlib.Path(tmp) / "mask.txt")
            dump_mask(mask, location, 0.4, 11)
            lines = pathlib.Path(location).read_text().splitlines()
            assert lines[0].startswith("{")
            loaded, header = load_mask(location)
        assert loaded.same_bits(mask)
        assert loaded.scale_id == 2
        assert header.seed == 11
        assert header.shape == [3, 4, 5]

    def test_runs_must_cover_the_grid(self):
        with pytest.raises(FormatError):
            decode_runs(True, [2, 1], (2, 2, 1))

    def test_truncated_dump(self):
        with tempfile.TemporaryDirectory() as tmp:
            location = pathlib.Path(tmp) / "mask.txt"
            location.write_text('{"shape": [1, 1, 2]}\n')
            with pytest.raises(FormatError):
                load_mask(str(location))
