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
from hybridmask.errors import DimensionError
from hybridmask.params import ModelParams
from hybridmask.params import ParamBuilder
from hybridmask.params import decays
from hybridmask.params import is_transferable
from hybridmask.tensor import Tensor


class TestModelParams(TestCase):
    def test_builder_is_deterministic(self):
        first, second = ParamBuilder(3), ParamBuilder(3)
        for builder in (first, second):
            builder.conv("encoder.stem", 4, 1, 3)
            builder.linear("vit.patch_embed", 8, 4)
        for name in first.params:
            assert np.array_equal(first.params[name].data, second.params[name].data)

    def test_builder_shapes_and_dtype(self):
        builder = ParamBuilder(0, "float64")
        builder.conv("a", 4, 4, 3, depthwise=True)
        builder.norm("n", 4)
        builder.embedding("e", (2, 4))
        params = builder.params
        assert params["a.weight"].shape == (4, 1, 3, 3, 3)
        assert params["n.gamma"].data.tolist() == [1.0] * 4
        assert params.dtype == np.float64
        assert all(t.requires_grad for _, t in params.items())
        assert params.num_parameters == 4 * 27 + 4 + 8 + 8

    def test_duplicate_name(self):
        params = ModelParams()
        params.add("x", Tensor([1.0]))
        with pytest.raises(ConsistencyError):
            params.add("x", Tensor([2.0]))

    def test_missing_name_is_a_key_error(self):
        with pytest.raises(KeyError):
            ModelParams()["encoder.stem.weight"]

    def test_state_dict_is_a_copy(self):
        builder = ParamBuilder(0)
        builder.linear("l", 2, 2)
        state = builder.params.state_dict()
        state["l.bias"][:] = 9
        assert not np.any(builder.params["l.bias"].data == 9)

    def test_load_state_dict(self):
        builder = ParamBuilder(0)
        builder.linear("l", 2, 3)
        params = builder.params
        params.load_state_dict({"l.weight": np.ones((2, 3)), "l.bias": np.zeros(2)})
        assert np.all(params["l.weight"].data == 1)
        assert params["l.weight"].dtype == np.float32
        with pytest.raises(ConsistencyError):
            params.load_state_dict({"l.weight": np.ones((2, 3))})
        with pytest.raises(DimensionError):
            params.load_state_dict({"l.weight": np.ones((3, 2))}, strict=False)


class TestNameRules(TestCase):
    def test_transfer_rules(self):
        assert is_transferable("encoder.stages.2.blocks.0.dwconv.weight")
        assert is_transferable("vit.pos_embed")
        assert not is_transferable("decoder.proj.1.weight")
        assert not is_transferable("head.weight")
        assert not is_transferable("seg_head.bias")

    def test_decay_rules(self):
        assert decays("vit.blocks.0.attn.qkv.weight", Tensor(np.zeros((3, 3))))
        assert not decays("vit.blocks.0.attn.qkv.bias", Tensor(np.zeros(3)))
        assert not decays("vit.pos_embed", Tensor(np.zeros((8, 4))))
        assert not decays("decoder.mask_embed.1", Tensor(np.zeros(4)))
