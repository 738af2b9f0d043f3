#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

import json
import pathlib
import struct
import tempfile
from unittest import TestCase

import numpy as np
import pytest

from hybridmask.checkpoint import HEADER
from hybridmask.checkpoint import MAGIC
from hybridmask.checkpoint import decode_checkpoint
from hybridmask.checkpoint import encode_checkpoint
from hybridmask.checkpoint import load_checkpoint
from hybridmask.checkpoint import save_checkpoint
from hybridmask.errors import FormatError
from hybridmask.model import init_pretrain_params
from hybridmask.optim import AdamWState
from hybridmask.verify import tiny_model_config

CONFIG = tiny_model_config()
CROP = (8, 8, 8)


def split(data):
    """Return the header fields, the manifest dict and the blob of a checkpoint."""
    magic, version, size = HEADER.unpack_from(data)
    manifest = json.loads(data[HEADER.size : HEADER.size + size])
    return (magic, version), manifest, data[HEADER.size + size :]


def join(version, manifest, blob, magic=MAGIC):
    raw = json.dumps(manifest).encode("utf-8")
    return HEADER.pack(magic, version, len(raw)) + raw + blob


class TestCheckpointFile(TestCase):
    def test_save_and_load_everything(self):
        params = init_pretrain_params(CONFIG, CROP, 0)
        state = AdamWState.zeros_like(params)
        state.exp_avg["head.bias"] += 0.25
        state.step = 12
        with tempfile.TemporaryDirectory() as tmp:
            location = str(pathlib.Path(tmp) / "model.ckpt")
            save_checkpoint(location, params, step=30, config={"train": {"mask_ratio": 0.5}}, state=state)
            loaded = load_checkpoint(location)

        assert loaded.step == 30
        assert loaded.optimizer_step == 12
        assert loaded.config == {"train": {"mask_ratio": 0.5}}
        assert set(loaded.params) == set(params)
        for name, tensor in params.items():
            assert loaded.params[name].dtype == tensor.dtype
            assert np.array_equal(loaded.params[name], tensor.data)
        restored = loaded.optimizer_state()
        assert restored.step == 12
        assert np.all(restored.exp_avg["head.bias"] == 0.25)

        fresh = init_pretrain_params(CONFIG, CROP, 1)
        loaded.restore(fresh)
        assert np.array_equal(fresh["encoder.stem.weight"].data, params["encoder.stem.weight"].data)

    def test_layout(self):
        params = init_pretrain_params(CONFIG, CROP, 0, "float64")
        data = encode_checkpoint(params, step=3)
        (magic, version), manifest, blob = split(data)
        assert data[:8] == b"HYBMASK\x00"
        assert struct.unpack_from("<I", data, 8)[0] == 1
        assert manifest["blob_size"] == len(blob)
        first = manifest["tensors"][0]
        assert first["name"] == "encoder.stem.weight"
        assert first["dtype"] == "<f8"
        assert first["offset"] == 0
        stored = np.frombuffer(blob[: first["nbytes"]], dtype="<f8").reshape(first["shape"])
        assert np.array_equal(stored, params["encoder.stem.weight"].data)

    def test_without_optimizer_state(self):
        loaded = decode_checkpoint(encode_checkpoint(init_pretrain_params(CONFIG, CROP, 0)))
        assert loaded.optimizer_state() is None


class TestCorruptCheckpoints(TestCase):
    def setUp(self):
        self.data = encode_checkpoint(init_pretrain_params(CONFIG, CROP, 0), step=1)
        (_, self.version), self.manifest, self.blob = split(self.data)

    def test_bad_magic(self):
        with pytest.raises(FormatError) as e:
            decode_checkpoint(join(self.version, self.manifest, self.blob, magic=b"SPARKHY\x00"))
        assert "magic" in str(e.value)

    def test_unknown_version(self):
        with pytest.raises(FormatError) as e:
            decode_checkpoint(join(2, self.manifest, self.blob))
        assert "version 2" in str(e.value)

    def test_truncated_blob(self):
        with pytest.raises(FormatError):
            decode_checkpoint(self.data[:-4])

    def test_truncated_header(self):
        with pytest.raises(FormatError):
            decode_checkpoint(self.data[:10])

    def test_entry_size_mismatch_names_the_entry(self):
        self.manifest["tensors"][1]["nbytes"] -= 4
        with pytest.raises(FormatError) as e:
            decode_checkpoint(join(self.version, self.manifest, self.blob), source="broken.ckpt")
        message = str(e.value)
        assert "broken.ckpt" in message
        assert self.manifest["tensors"][1]["name"] in message

    def test_entry_outside_the_blob(self):
        self.manifest["tensors"][-1]["offset"] += 8
        with pytest.raises(FormatError):
            decode_checkpoint(join(self.version, self.manifest, self.blob))

    def test_unsupported_dtype(self):
        self.manifest["tensors"][0]["dtype"] = "<i4"
        with pytest.raises(FormatError):
            decode_checkpoint(join(self.version, self.manifest, self.blob))

    def test_corrupt_manifest(self):
        raw = b"{not json"
        data = HEADER.pack(MAGIC, 1, len(raw)) + raw
        with pytest.raises(FormatError):
            decode_checkpoint(data)

    def test_missing_file(self):
        with pytest.raises(FormatError):
            load_checkpoint("/nonexistent/model.ckpt")
