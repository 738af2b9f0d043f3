#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

from unittest import TestCase

import numpy as np
import pytest

from hybridmask.errors import ConfigError
from hybridmask.errors import ConsistencyError
from hybridmask.errors import DimensionError
from hybridmask.masking import MaskGrid
from hybridmask.masking import build_pyramid
from hybridmask.masking import init_junction_mask
from hybridmask.oracle import brute_force_conv3d
from hybridmask.sparse import SparseFeatureMap
from hybridmask.sparse import dense_masked_conv3d
from hybridmask.sparse import densify
from hybridmask.sparse import densify_with_mask_embedding
from hybridmask.sparse import neighbor_table
from hybridmask.sparse import sparse_add
from hybridmask.sparse import sparse_conv3d
from hybridmask.sparse import sparse_max_pool
from hybridmask.sparse import sparse_norm
from hybridmask.sparse import sparsify
from hybridmask.tensor import Tensor
from hybridmask.tensor import parameter


def random_map(mask, channels, seed=0, requires_grad=False):
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((mask.active_count, channels))
    return SparseFeatureMap(features=Tensor(features, requires_grad=requires_grad, dtype="float64"), mask=mask)


def f64(array):
    return Tensor(array, dtype="float64")


def pyramid(seed=0, ratio=0.5):
    junction = init_junction_mask((2, 2, 2), ratio, seed)
    return build_pyramid(junction, [2, 2], (8, 8, 8))


class TestSparseFeatureMap(TestCase):
    def test_row_count_must_match_active_cells(self):
        mask = init_junction_mask((2, 2, 2), 0.5, 0)
        with pytest.raises(ConsistencyError):
            SparseFeatureMap(features=Tensor(np.zeros((5, 2))), mask=mask)
        with pytest.raises(DimensionError):
            SparseFeatureMap(features=Tensor(np.zeros(4)), mask=mask)

    def test_densify_and_sparsify(self):
        mask = init_junction_mask((2, 3, 2), 0.5, 1)
        sparse = random_map(mask, 3)
        dense = densify(sparse)
        assert dense.shape == (3, 2, 3, 2)
        assert np.all(dense.data[:, ~mask.bits] == 0)
        assert np.array_equal(sparsify(dense, mask).features.data, sparse.features.data)
        assert sparse.shape == (2, 3, 2, 3)

    def test_mask_embedding_fills_masked_cells_only(self):
        mask = init_junction_mask((2, 2, 2), 0.5, 2)
        sparse = random_map(mask, 2)
        dense = densify_with_mask_embedding(sparse, f64([7.0, -1.0]))
        assert np.all(dense.data[0][~mask.bits] == 7.0)
        assert np.all(dense.data[1][~mask.bits] == -1.0)
        assert np.array_equal(dense.data[:, mask.bits], densify(sparse).data[:, mask.bits])

    def test_mask_embedding_gets_gradient_from_masked_cells(self):
        mask = init_junction_mask((2, 2, 2), 0.25, 2)
        embed = parameter(np.zeros(2), dtype="float64")
        densify_with_mask_embedding(random_map(mask, 2), embed).sum().backward()
        assert embed.grad.tolist() == [2.0, 2.0]


class TestSparseConv(TestCase):
    def test_neighbor_table_marks_masked_and_outside_cells(self):
        bits = np.zeros((1, 1, 3), dtype=bool)
        bits[0, 0, 0] = bits[0, 0, 1] = True
        table = neighbor_table(MaskGrid(bits=bits), 3)
        assert table.shape == (2, 27)
        center = 13
        assert table[0, center] == 0
        assert table[0, center + 1] == 1
        assert table[0, center - 1] == -1
        assert table[1, center + 1] == -1

    def test_full_conv_matches_dense_oracle_at_active_cells(self):
        for seed in range(5):
            mask = pyramid(seed).stage(1)
            sparse = random_map(mask, 3, seed)
            rng = np.random.default_rng(seed + 100)
            weight, bias = rng.standard_normal((4, 3, 3, 3, 3)), rng.standard_normal(4)
            out = sparse_conv3d(sparse, mask, f64(weight), f64(bias))
            dense = brute_force_conv3d(densify(sparse).data[None], weight, bias, padding=1)[0]
            assert out.mask is mask
            assert np.allclose(out.features.data, dense[:, mask.bits].T, atol=1e-12)

    def test_depthwise_conv_matches_dense_fallback(self):
        mask = pyramid(4).stage(1)
        sparse = random_map(mask, 3, 4)
        weight = f64(np.random.default_rng(5).standard_normal((3, 1, 3, 3, 3)))
        fast = sparse_conv3d(sparse, mask, weight, groups=3)
        slow = dense_masked_conv3d(sparse, mask, weight, groups=3)
        assert np.allclose(fast.features.data, slow.features.data, atol=1e-12)

    def test_masked_rows_receive_no_gradient(self):
        mask = pyramid(6).stage(1)
        rng = np.random.default_rng(6)
        dense = parameter(rng.standard_normal((2,) + mask.shape), dtype="float64")
        sparse = sparsify(dense, mask)
        weight = f64(rng.standard_normal((2, 2, 3, 3, 3)))
        sparse_conv3d(sparse, mask, weight).features.sum().backward()
        assert np.all(dense.grad[:, ~mask.bits] == 0)
        assert np.any(dense.grad[:, mask.bits] != 0)

    def test_conv_rejects_foreign_mask(self):
        mask = pyramid(0).stage(1)
        foreign = MaskGrid(bits=~mask.bits, scale_id=1)
        with pytest.raises(ConsistencyError):
            sparse_conv3d(random_map(mask, 2), foreign, f64(np.zeros((2, 2, 3, 3, 3))))

    def test_conv_rejects_other_padding(self):
        mask = pyramid(0).stage(1)
        with pytest.raises(ConfigError):
            sparse_conv3d(random_map(mask, 2), mask, f64(np.zeros((2, 2, 3, 3, 3))), padding=0)


class TestSparsePool(TestCase):
    def test_pool_matches_dense_block_maxima(self):
        p = pyramid(3)
        sparse = random_map(p.stage(1), 2, 3)
        pooled = sparse_max_pool(sparse, p.stage(1), p.stage(2), 2)
        dense = densify(sparse).data
        blocks = dense.reshape(2, 2, 2, 2, 2, 2, 2).max(axis=(2, 4, 6))
        assert pooled.mask is p.stage(2)
        assert np.array_equal(pooled.features.data, blocks[:, p.stage(2).bits].T)

    def test_strict_pool_rejects_mixed_windows(self):
        p = pyramid(3)
        other = init_junction_mask((4, 4, 4), 0.5, 99, scale_id=1)
        with pytest.raises(ConsistencyError):
            sparse_max_pool(random_map(other, 2), other, p.stage(2), 2)

    def test_loose_pool_reads_masked_cells_as_zero(self):
        bits = np.zeros((2, 2, 2), dtype=bool)
        bits[0, 0, 0] = True
        fine = MaskGrid(bits=bits, scale_id=1)
        coarse = MaskGrid(bits=np.ones((1, 1, 1), dtype=bool), scale_id=2)
        sparse = SparseFeatureMap(features=f64([[-3.0]]), mask=fine)
        pooled = sparse_max_pool(sparse, fine, coarse, 2, strict=False)
        assert pooled.features.data.tolist() == [[0.0]]

    def test_pool_rejects_wrong_grid(self):
        p = pyramid(3)
        with pytest.raises(DimensionError):
            sparse_max_pool(random_map(p.stage(1), 2), p.stage(1), p.stage(2), 4)


class TestSparseNorm(TestCase):
    def test_statistics_cover_active_cells_only(self):
        mask = pyramid(2).stage(1)
        sparse = random_map(mask, 4, 2)
        out = sparse_norm(sparse, f64(np.ones(4)), f64(np.zeros(4)))
        assert np.allclose(out.features.data.mean(axis=0), 0, atol=1e-10)
        assert np.allclose(out.features.data.var(axis=0), 1, atol=1e-4)
        assert out.mask is mask

    def test_grouped_statistics(self):
        mask = pyramid(2).stage(1)
        out = sparse_norm(random_map(mask, 4, 2), f64(np.ones(4)), f64(np.zeros(4)), groups=2)
        grouped = out.features.data.reshape(-1, 2, 2)
        assert np.allclose(grouped.mean(axis=(0, 2)), 0, atol=1e-10)

    def test_groups_must_divide_channels(self):
        mask = pyramid(2).stage(1)
        with pytest.raises(ConfigError):
            sparse_norm(random_map(mask, 4), f64(np.ones(4)), f64(np.zeros(4)), groups=3)

    def test_sparse_add_requires_one_active_set(self):
        mask = pyramid(0).stage(2)
        a = random_map(mask, 2)
        b = random_map(MaskGrid(bits=~mask.bits, scale_id=2), 2)
        with pytest.raises(ConsistencyError):
            sparse_add(a, b)
