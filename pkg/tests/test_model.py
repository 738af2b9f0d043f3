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

from hybridmask.config import ModelConfig
from hybridmask.errors import ConsistencyError
from hybridmask.masking import build_pyramid
from hybridmask.masking import init_junction_mask
from hybridmask.model import SEG_HEAD
from hybridmask.model import dense_encode
from hybridmask.model import full_pyramid
from hybridmask.model import init_pretrain_params
from hybridmask.model import init_segmentation_params
from hybridmask.model import pretrain_forward
from hybridmask.model import segment_forward
from hybridmask.model import transfer_encoder
from hybridmask.verify import tiny_model_config

CONFIG = tiny_model_config()
CROP = (8, 8, 8)


def volume(seed=0):
    return np.random.default_rng(seed).standard_normal(CROP)


def pyramid(seed=0, ratio=0.5):
    junction = init_junction_mask((2, 2, 2), ratio, seed)
    return build_pyramid(junction, CONFIG.cnn.stage_strides, CROP)


class TestParameters(TestCase):
    def test_pretrain_parameters(self):
        params = init_pretrain_params(CONFIG, CROP, 0, "float64")
        assert params["vit.pos_embed"].shape == (8, 8)
        assert "decoder.mask_embed.1" in params
        assert "decoder.mask_embed.2" in params
        assert params["head.weight"].shape == (1, 4)
        assert SEG_HEAD + ".weight" not in params

    def test_segmentation_parameters(self):
        params = init_segmentation_params(CONFIG, CROP, 0)
        assert f"{SEG_HEAD}.weight" in params
        assert not any(name.startswith("decoder.mask_embed.") for name in params)
        assert "head.weight" not in params

    def test_same_seed_same_parameters(self):
        a = init_pretrain_params(CONFIG, CROP, 4)
        b = init_pretrain_params(CONFIG, CROP, 4)
        for name in a:
            assert np.array_equal(a[name].data, b[name].data)


class TestTransfer(TestCase):
    def test_transfer_copies_encoder_and_transformer_only(self):
        pretrained = init_pretrain_params(CONFIG, CROP, 1)
        target = init_segmentation_params(CONFIG, CROP, 2)
        decoder_before = target["decoder.proj.1.weight"].data.copy()
        names = transfer_encoder(pretrained.state_dict(), target)
        assert "encoder.stem.weight" in names
        assert "vit.pos_embed" in names
        assert not any(name.startswith(("decoder.", "head.")) for name in names)
        for name in names:
            assert np.array_equal(target[name].data, pretrained[name].data)
        assert np.array_equal(target["decoder.proj.1.weight"].data, decoder_before)

    def test_transfer_rejects_other_architecture(self):
        other = ModelConfig(
            cnn={"num_stages": 3, "channels": [4, 8, 16]},
            vit={"embed_dim": 8, "depth": 1, "heads": 2, "mlp_ratio": 2},
        )
        pretrained = init_pretrain_params(other, (16, 16, 16), 1)
        target = init_segmentation_params(CONFIG, CROP, 2)
        with pytest.raises(ConsistencyError):
            transfer_encoder(pretrained.state_dict(), target)


class TestForward(TestCase):
    def test_pretrain_forward_shapes(self):
        params = init_pretrain_params(CONFIG, CROP, 0, "float64")
        p = pyramid(1)
        out = pretrain_forward(volume(1), p, params, CONFIG)
        assert out.output.shape == CROP
        assert out.tokens.num_tokens == p.junction.active_count
        assert [d.shape for d in out.dense] == [(4, 4, 4, 4), (8, 2, 2, 2)]

    def test_masked_cells_carry_the_mask_embedding(self):
        params = init_pretrain_params(CONFIG, CROP, 0, "float64")
        p = pyramid(2)
        out = pretrain_forward(volume(2), p, params, CONFIG)
        embed = params["decoder.mask_embed.1"].data
        masked = out.dense[0].data[:, ~p.stage(1).bits]
        assert np.array_equal(masked, np.repeat(embed[:, None], masked.shape[1], axis=1))

    def test_mask_embedding_receives_gradient(self):
        params = init_pretrain_params(CONFIG, CROP, 0, "float64")
        out = pretrain_forward(volume(3), pyramid(3), params, CONFIG)
        (out.output * out.output).sum().backward()
        assert np.any(params["decoder.mask_embed.1"].grad != 0)
        assert np.any(params["encoder.stem.weight"].grad != 0)

    def test_masked_input_does_not_change_the_encoding(self):
        params = init_pretrain_params(CONFIG, CROP, 0, "float64")
        p = pyramid(4)
        x = volume(4)
        changed = x.copy()
        changed[~p.voxel.bits] = -50.0
        a = pretrain_forward(x, p, params, CONFIG)
        b = pretrain_forward(changed, p, params, CONFIG)
        assert np.array_equal(a.output.data, b.output.data)

    def test_segment_forward_and_dense_encode(self):
        params = init_segmentation_params(CONFIG, CROP, 0, "float64")
        x = volume(5)
        out = segment_forward(x, params, CONFIG)
        assert out.output.shape == CROP
        assert out.tokens.num_tokens == 8
        dense = dense_encode(x, params, CONFIG)
        assert [d.shape for d in dense] == [(4, 4, 4, 4), (8, 2, 2, 2)]
        assert np.array_equal(dense[1].data, out.dense[1].data)

    def test_full_pyramid_is_all_active(self):
        p = full_pyramid(CROP, CONFIG)
        assert p.voxel.active_count == 512
        assert p.junction.keep_ratio == 1.0
