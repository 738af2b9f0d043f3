#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

import json
import pathlib
import tempfile
from unittest import TestCase

import pytest

from hybridmask.config import CnnConfig
from hybridmask.config import ModelConfig
from hybridmask.config import Precision
from hybridmask.config import RunConfig
from hybridmask.config import SkipMode
from hybridmask.config import build_config
from hybridmask.config import config_sidecar_path
from hybridmask.config import load_config
from hybridmask.config import profile_defaults
from hybridmask.config import read_config_file
from hybridmask.config import write_config_sidecar
from hybridmask.errors import ConfigError

CONFIG_DIR = pathlib.Path(__file__).parent / "data" / "config"


class TestDefaults(TestCase):
    def test_desk_profile_defaults(self):
        config = load_config()
        assert config.profile == "desk"
        assert config.model.cnn.channels == [16, 32, 64, 128]
        assert config.model.cnn.stage_strides == [2, 2, 2, 2]
        assert config.model.cnn.cumulative_stride == 16
        assert config.train.crop == [32, 32, 32]
        assert config.train.mask_ratio == 0.75
        assert config.train.precision == Precision.FLOAT32
        assert config.model.decoder.skip == SkipMode.CONCAT
        assert config.model.decoder_widths == [16, 32, 64, 128]

    def test_full_scale_profile(self):
        config = load_config(profile="full-scale")
        assert config.train.crop == [96, 96, 96]
        assert config.train.batch_size == 8
        assert config.finetune.crop == [96, 96, 96]

    def test_unknown_profile(self):
        with pytest.raises(ConfigError):
            profile_defaults("laptop")

    def test_finetune_steps(self):
        config = load_config(overrides={"finetune.epochs": 3, "finetune.steps_per_epoch": 4})
        assert config.finetune.steps == 12


class TestValidation(TestCase):
    def test_mask_ratio_one_is_invalid(self):
        with pytest.raises(ConfigError) as e:
            load_config(overrides={"train.mask_ratio": 1.0})
        assert "mask_ratio" in str(e.value)

    def test_config_error_is_a_value_error(self):
        with pytest.raises(ValueError):
            load_config(overrides={"train.mask_ratio": -0.5})

    def test_channels_must_match_stages(self):
        with pytest.raises(ValueError):
            CnnConfig(num_stages=3, channels=[8, 16])

    def test_channels_must_increase(self):
        with pytest.raises(ValueError):
            CnnConfig(num_stages=2, channels=[16, 16])

    def test_norm_groups_must_divide_widths(self):
        with pytest.raises(ValueError):
            CnnConfig(num_stages=2, channels=[4, 6], norm_groups=4)

    def test_decoder_widths_must_cover_every_stage(self):
        with pytest.raises(ValueError):
            ModelConfig(decoder={"widths": [8, 16]})

    def test_crop_must_be_divisible_by_cumulative_stride(self):
        with pytest.raises(ConfigError) as e:
            build_config({"train": {"crop": [32, 24, 32]}})
        assert "axis H" in str(e.value)

    def test_unknown_keys_are_rejected(self):
        with pytest.raises(ConfigError):
            build_config({"train": {"mask_rate": 0.5}})

    def test_heads_must_divide_embed_dim(self):
        with pytest.raises(ConfigError):
            build_config({"model": {"vit": {"embed_dim": 10, "heads": 4}}})


class TestConfigFile(TestCase):
    def test_read_config_file(self):
        settings = read_config_file(str(CONFIG_DIR / "tiny.ini"))
        assert settings["model"]["cnn"]["channels"] == [4, 8]
        assert settings["train"]["precision"] == "float64"

    def test_file_then_overrides(self):
        config = load_config(str(CONFIG_DIR / "tiny.ini"), overrides={"train.steps": 7, "train.seed": None})
        assert config.model.cnn.num_stages == 2
        assert config.model.vit.embed_dim == 8
        assert config.train.steps == 7
        assert config.train.seed == 0
        assert config.train.precision == Precision.FLOAT64
        assert config.finetune.train_fraction == 0.5

    def test_unknown_section(self):
        with pytest.raises(ConfigError) as e:
            load_config(str(CONFIG_DIR / "unknown-section.ini"))
        assert "[trainer]" in str(e.value)

    def test_bad_crop_in_file(self):
        with pytest.raises(ConfigError):
            load_config(str(CONFIG_DIR / "bad-crop.ini"))

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            read_config_file(str(CONFIG_DIR / "missing.ini"))

    def test_config_sidecar(self):
        config = load_config(str(CONFIG_DIR / "tiny.ini"))
        with tempfile.TemporaryDirectory() as tmp:
            artifact = str(pathlib.Path(tmp) / "model.ckpt")
            sidecar = write_config_sidecar(config, artifact)
            assert sidecar == config_sidecar_path(artifact)
            stored = json.loads(pathlib.Path(sidecar).read_text())
        assert RunConfig.parse_obj(stored) == config
