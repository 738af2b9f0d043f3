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

from hybridmask.errors import ConsistencyError
from hybridmask.errors import DataError
from hybridmask.errors import DimensionError
from hybridmask.masking import MaskGrid
from hybridmask.masking import init_junction_mask
from hybridmask.objectives import bce_loss
from hybridmask.objectives import block_factors
from hybridmask.objectives import dice_loss
from hybridmask.objectives import dice_metric
from hybridmask.objectives import masked_mse_loss
from hybridmask.objectives import normalize_targets
from hybridmask.objectives import seg_loss
from hybridmask.oracle import check_gradients
from hybridmask.tensor import Tensor
from hybridmask.tensor import parameter


class TestTargets(TestCase):
    def test_masked_blocks_are_standardized(self):
        values = np.random.default_rng(0).normal(5.0, 3.0, size=(8, 8, 8))
        mask = init_junction_mask((2, 2, 2), 0.5, 0)
        targets = normalize_targets(values, mask)
        assert targets.factors == (4, 4, 4)
        assert targets.masked_voxels == 4 * 64
        for cell in np.argwhere(~mask.bits):
            z, y, x = cell * 4
            block = targets.targets[z : z + 4, y : y + 4, x : x + 4]
            assert abs(block.mean()) < 1e-10
            assert abs(block.std() - 1.0) < 1e-4
        assert np.all(targets.targets[~targets.voxel_mask] == 0)

    def test_constant_block_does_not_divide_by_zero(self):
        mask = MaskGrid(bits=np.array([True, False]).reshape(1, 1, 2))
        targets = normalize_targets(np.ones((2, 2, 4)), mask)
        assert np.all(np.isfinite(targets.targets))
        assert np.all(targets.targets == 0)

    def test_inverse_restores_masked_intensities(self):
        values = np.random.default_rng(1).normal(0.4, 0.1, size=(8, 8, 8))
        mask = init_junction_mask((2, 2, 2), 0.75, 1)
        targets = normalize_targets(values, mask)
        restored = targets.inverse(targets.targets)
        assert np.allclose(restored[targets.voxel_mask], values[targets.voxel_mask], atol=1e-5)
        composed = targets.compose(targets.targets, values)
        assert np.allclose(composed, values, atol=1e-5)

    def test_block_factors_need_whole_blocks(self):
        with pytest.raises(DimensionError):
            block_factors((8, 8, 9), (2, 2, 2))


class TestMaskedMse(TestCase):
    def test_visible_voxels_contribute_nothing(self):
        mask = np.zeros((2, 2, 2), dtype=bool)
        mask[0] = True
        targets = np.zeros((2, 2, 2))
        pred = parameter(np.ones((2, 2, 2)), dtype="float64")
        loss = masked_mse_loss(pred, targets, mask)
        assert loss.item() == 1.0
        loss.backward()
        assert np.all(pred.grad[1] == 0)
        assert np.all(pred.grad[0] == 0.5)

    def test_visible_prediction_changes_do_not_change_the_loss(self):
        mask = np.zeros((2, 2, 2), dtype=bool)
        mask[1, 1] = True
        targets = np.random.default_rng(2).standard_normal((2, 2, 2))
        pred = np.random.default_rng(3).standard_normal((2, 2, 2))
        other = pred.copy()
        other[~mask] += 100
        a = masked_mse_loss(Tensor(pred, dtype="float64"), targets, mask).item()
        b = masked_mse_loss(Tensor(other, dtype="float64"), targets, mask).item()
        assert a == b

    def test_nothing_to_reconstruct(self):
        with pytest.raises(ConsistencyError):
            masked_mse_loss(Tensor(np.zeros((1, 1, 2))), np.zeros((1, 1, 2)), np.zeros((1, 1, 2), dtype=bool))

    def test_shapes_must_agree(self):
        with pytest.raises(DimensionError):
            masked_mse_loss(Tensor(np.zeros((1, 1, 2))), np.zeros((1, 2, 1)), np.ones((1, 1, 2), dtype=bool))


class TestSegmentation(TestCase):
    def test_bce_of_confident_logits(self):
        labels = np.array([1.0, 0.0])
        good = bce_loss(Tensor([20.0, -20.0], dtype="float64"), labels).item()
        bad = bce_loss(Tensor([-20.0, 20.0], dtype="float64"), labels).item()
        assert good < 1e-8
        assert abs(bad - 20.0) < 1e-6

    def test_labels_must_be_binary(self):
        with pytest.raises(DataError):
            seg_loss(Tensor(np.zeros((2, 2, 2))), np.full((2, 2, 2), 0.5))

    def test_seg_loss_gradient(self):
        rng = np.random.default_rng(4)
        logits = rng.standard_normal((3, 3, 3))
        labels = (rng.random((3, 3, 3)) > 0.5).astype(float)
        tensor = parameter(logits, dtype="float64")
        seg_loss(tensor, labels).backward()

        def value():
            return seg_loss(Tensor(logits, dtype="float64"), labels).item()

        result = check_gradients(value, {"logits": logits}, {"logits": tensor.grad}, count=27)
        assert result.passed(1e-5), result

    def test_dice_loss_is_small_for_a_perfect_prediction(self):
        labels = np.zeros((2, 2, 2))
        labels[0] = 1
        logits = Tensor(np.where(labels == 1, 30.0, -30.0), dtype="float64")
        assert dice_loss(logits, labels).item() < 1e-6

    def test_dice_metric(self):
        assert dice_metric(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
        assert dice_metric(np.ones((2, 2)), np.zeros((2, 2))) == 0.0
        assert dice_metric(np.array([1, 1, 1, 0]), np.array([1, 1, 0, 0])) == 0.8
        with pytest.raises(DimensionError):
            dice_metric(np.zeros(3), np.zeros(4))
