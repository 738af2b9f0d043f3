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
from hybridmask.config import SkipMode
from hybridmask.decoder import decode
from hybridmask.decoder import init_decoder_params
from hybridmask.decoder import init_head_params
from hybridmask.decoder import projected_scales
from hybridmask.decoder import reconstruct_head
from hybridmask.decoder import skip_addition_decode
from hybridmask.errors import DimensionError
from hybridmask.oracle import check_gradients
from hybridmask.params import ParamBuilder
from hybridmask.tensor import Tensor
from hybridmask.tensor import default_dtype
from hybridmask.tensor import no_grad
from hybridmask.tensor import parameter


def model_config(skip=SkipMode.CONCAT, widths=None):
    return ModelConfig(
        cnn={"num_stages": 3, "channels": [4, 8, 16]},
        vit={"embed_dim": 8, "depth": 1, "heads": 2, "mlp_ratio": 2},
        decoder={"skip": skip, "widths": widths},
    )


def decoder_params(config, seed=0):
    builder = ParamBuilder(seed, "float64")
    init_decoder_params(builder, config, mask_embeds=True)
    init_head_params(builder, config, "head")
    return builder.params


def dense_features(config, extent=8, seed=0):
    rng = np.random.default_rng(seed)
    features = []
    for channels in config.cnn.channels:
        features.append(Tensor(rng.standard_normal((channels, extent, extent, extent)), dtype="float64"))
        extent //= 2
    return features


class TestDecoderParams(TestCase):
    def test_concat_decoder_has_fusion_blocks(self):
        params = decoder_params(model_config())
        assert "decoder.fuse.1.conv1.weight" in params
        assert params["decoder.fuse.2.conv1.weight"].shape == (8, 16, 3, 3, 3)
        assert params["decoder.up.2.conv1.weight"].shape == (8, 16, 3, 3, 3)
        assert params["decoder.mask_embed.1"].shape == (4,)

    def test_add_decoder_has_projections_only(self):
        params = decoder_params(model_config(SkipMode.ADD))
        assert "decoder.fuse.1.conv1.weight" not in params
        assert "decoder.proj.1.weight" in params

    def test_decoder_without_skips_projects_the_junction_only(self):
        config = model_config(SkipMode.NONE)
        params = decoder_params(config)
        assert projected_scales(config) == [3]
        assert "decoder.proj.1.weight" not in params
        assert "decoder.mask_embed.1" not in params
        assert "decoder.mask_embed.3" in params

    def test_custom_widths(self):
        params = decoder_params(model_config(widths=[6, 6, 12]))
        assert params["decoder.proj.3.weight"].shape == (12, 16)
        assert params["head.weight"].shape == (1, 6)


class TestDecode(TestCase):
    def test_decode_shapes_for_every_skip_mode(self):
        for skip in SkipMode:
            config = model_config(skip)
            params = decoder_params(config)
            d_1 = decode(dense_features(config), params, config)
            assert d_1.shape == (1, 4, 8, 8, 8)
            out = reconstruct_head(d_1, params, 2)
            assert out.shape == (16, 16, 16)

    def test_skip_addition_decode(self):
        config = model_config(SkipMode.ADD)
        params = decoder_params(config)
        features = dense_features(config, seed=1)
        expected = decode(features, params, config)
        assert np.array_equal(skip_addition_decode(features, params, config).data, expected.data)

    def test_skip_features_reach_the_output(self):
        config = model_config(SkipMode.ADD)
        params = decoder_params(config)
        features = dense_features(config, seed=2)
        changed = list(features)
        changed[0] = Tensor(features[0].data + 1.0)
        assert not np.allclose(decode(features, params, config).data, decode(changed, params, config).data)

    def test_without_skips_only_the_junction_matters(self):
        config = model_config(SkipMode.NONE)
        params = decoder_params(config)
        features = dense_features(config, seed=3)
        changed = list(features)
        changed[0] = Tensor(features[0].data + 1.0)
        assert np.array_equal(decode(features, params, config).data, decode(changed, params, config).data)

    def test_wrong_channels_name_the_scale(self):
        config = model_config()
        features = dense_features(config)
        features[1] = Tensor(np.zeros((5, 4, 4, 4)))
        with pytest.raises(DimensionError) as e:
            decode(features, decoder_params(config), config)
        assert "scale 2" in str(e.value)

    def test_wrong_extent_and_scale_count(self):
        config = model_config()
        features = dense_features(config)
        params = decoder_params(config)
        with pytest.raises(DimensionError):
            decode(features[:2], params, config)
        features[2] = Tensor(np.zeros((16, 3, 3, 3)))
        with pytest.raises(DimensionError):
            decode(features, params, config)


class TestDecodeGradients(TestCase):
    def test_two_stage_decode_matches_finite_differences(self):
        config = ModelConfig(
            cnn={"num_stages": 2, "channels": [4, 8]},
            vit={"embed_dim": 8, "depth": 1, "heads": 2, "mlp_ratio": 2},
        )
        params = decoder_params(config, seed=4)
        arrays = [f.data for f in dense_features(config, extent=4, seed=4)]
        assert [a.shape[1:] for a in arrays] == [(4, 4, 4), (2, 2, 2)]
        features = [parameter(a, dtype="float64") for a in arrays]
        (decode(features, params, config) ** 2).sum().backward()

        named = {"s1": arrays[0], "s2": arrays[1]}
        grads = {"s1": features[0].grad, "s2": features[1].grad}
        for name in ("decoder.proj.2.weight", "decoder.up.1.conv1.weight", "decoder.fuse.1.conv2.weight"):
            named[name] = params[name].data
            grads[name] = params[name].grad

        def value():
            with no_grad(), default_dtype("float64"):
                return (decode([Tensor(a) for a in arrays], params, config) ** 2).sum().item()

        result = check_gradients(value, named, grads, count=100, seed=4)
        assert result.checked == 100
        assert result.passed(1e-4), result
