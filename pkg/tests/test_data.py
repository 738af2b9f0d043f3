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
import time
from unittest import TestCase

import numpy as np
import pytest

from hybridmask.data import BACKGROUND_CEILING
from hybridmask.data import INDEX_NAME
from hybridmask.data import BatchProducer
from hybridmask.data import DataSource
from hybridmask.data import Volume3D
from hybridmask.data import crop_origin
from hybridmask.data import crop_pair
from hybridmask.data import generate_dataset
from hybridmask.data import generate_phantom
from hybridmask.data import phantom_layout
from hybridmask.data import preprocess
from hybridmask.data import read_index
from hybridmask.data import read_volume
from hybridmask.data import sidecar_path
from hybridmask.data import split_indices
from hybridmask.data import write_volume
from hybridmask.errors import DataError
from hybridmask.errors import FormatError

SHAPE = (16, 16, 16)


class TestPhantoms(TestCase):
    def test_same_seed_same_phantom(self):
        a, la = generate_phantom(3, SHAPE)
        b, lb = generate_phantom(3, SHAPE)
        c, _ = generate_phantom(4, SHAPE)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(la.values, lb.values)
        assert not np.array_equal(a.values, c.values)

    def test_label_is_binary_and_covers_bright_organs(self):
        volume, label = generate_phantom(1, (24, 24, 24))
        assert set(np.unique(label.values).tolist()) <= {0.0, 1.0}
        assert 0 < label.values.sum() < label.values.size
        # organ voxels sit far above the background level
        background = volume.values[label.values == 0]
        organs = volume.values[label.values == 1]
        assert np.median(organs) > BACKGROUND_CEILING
        assert np.median(background) < BACKGROUND_CEILING

    def test_phantom_spacing_and_provenance(self):
        volume, label = generate_phantom(0, SHAPE)
        assert volume.spacing_mm == (1.5, 1.5, 1.5)
        assert volume.provenance == "phantom:seed=0"
        assert volume.values.dtype == np.float32

    def test_layout_has_organs_and_vessels(self):
        layout = phantom_layout(2, SHAPE)
        assert 2 <= len(layout.ellipsoids) <= 5
        assert 1 <= len(layout.tubes) <= 3
        intensities = [e.intensity for e in layout.ellipsoids]
        assert len(set(intensities)) == len(intensities)

    def test_too_small_phantom(self):
        with pytest.raises(DataError):
            generate_phantom(0, (8, 8, 8))


class TestPreprocess(TestCase):
    def test_window_and_center_crop(self):
        values = np.full((4, 4, 4), -1000.0)
        values[1:3, 1:3, 1:3] = 1000.0
        out = preprocess(Volume3D(values=values), crop=(2, 2, 2))
        assert out.shape == (2, 2, 2)
        assert np.all(out.values == 1.0)

    def test_random_crop_stays_inside(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            origin = crop_origin((10, 8, 6), (4, 8, 2), rng)
            assert 0 <= origin[0] <= 6 and origin[1] == 0 and 0 <= origin[2] <= 4

    def test_crop_larger_than_volume(self):
        with pytest.raises(DataError):
            crop_origin((8, 8, 8), (16, 8, 8))

    def test_non_finite_volume(self):
        values = np.zeros((4, 4, 4))
        values[0, 0, 0] = np.nan
        with pytest.raises(DataError):
            preprocess(Volume3D(values=values))

    def test_crop_pair_crops_at_the_same_place(self):
        values = np.arange(512.0).reshape(8, 8, 8)
        volume, label = crop_pair(
            Volume3D(values=values), Volume3D(values=values), (4, 4, 4), np.random.default_rng(5)
        )
        assert np.array_equal(volume.values, label.values)

    def test_volume_must_be_3d(self):
        with pytest.raises(DataError):
            Volume3D(values=np.zeros((4, 4)))


class TestRawFiles(TestCase):
    def test_write_and_read_volume(self):
        volume, _ = generate_phantom(0, SHAPE)
        with tempfile.TemporaryDirectory() as tmp:
            location = str(pathlib.Path(tmp) / "v.raw")
            write_volume(volume, location)
            raw = pathlib.Path(location).read_bytes()
            sidecar = pathlib.Path(sidecar_path(location)).read_text()
            loaded = read_volume(location)
        assert len(raw) == 16**3 * 4
        assert sidecar == '{"shape":[16,16,16],"spacing_mm":[1.5,1.5,1.5],"dtype":"f32le"}'
        assert np.array_equal(loaded.values, volume.values)
        assert np.frombuffer(raw, dtype="<f4")[1] == volume.values[0, 0, 1]

    def test_truncated_volume(self):
        with tempfile.TemporaryDirectory() as tmp:
            location = pathlib.Path(tmp) / "v.raw"
            location.write_bytes(b"\x00" * 10)
            pathlib.Path(sidecar_path(str(location))).write_text(
                '{"shape":[2,2,2],"spacing_mm":[1,1,1],"dtype":"f32le"}'
            )
            with pytest.raises(FormatError) as e:
                read_volume(str(location))
        assert "10 bytes" in str(e.value)

    def test_unsupported_dtype(self):
        with tempfile.TemporaryDirectory() as tmp:
            location = pathlib.Path(tmp) / "v.raw"
            location.write_bytes(b"\x00" * 8)
            pathlib.Path(sidecar_path(str(location))).write_text(
                '{"shape":[1,1,1],"spacing_mm":[1,1,1],"dtype":"f64le"}'
            )
            with pytest.raises(FormatError):
                read_volume(str(location))

    def test_missing_sidecar(self):
        with tempfile.TemporaryDirectory() as tmp:
            location = pathlib.Path(tmp) / "v.raw"
            location.write_bytes(b"\x00" * 4)
            with pytest.raises(FormatError):
                read_volume(str(location))


class TestDataset(TestCase):
    def test_generate_and_load_dataset(self):
        with tempfile.TemporaryDirectory() as tmp:
            index = generate_dataset(tmp, 3, SHAPE, 10)
            assert [e.volume for e in index.entries] == [
                "phantom-0000.raw",
                "phantom-0001.raw",
                "phantom-0002.raw",
            ]
            stored = json.loads((pathlib.Path(tmp) / INDEX_NAME).read_text())
            assert stored["provenance"]["seed"] == 10
            assert read_index(tmp) == index
            source = DataSource.from_directory(tmp)
        assert len(source) == 3
        assert source.num_labeled == 3
        expected, _ = generate_phantom(11, SHAPE)
        assert np.array_equal(source.volumes[1].values, expected.values)

    def test_missing_index(self):
        with tempfile.TemporaryDirectory() as tmp:
            with pytest.raises(DataError):
                DataSource.from_directory(tmp)

    def test_source_without_labels(self):
        volume, _ = generate_phantom(0, SHAPE)
        source = DataSource([volume])
        assert source.num_labeled == 0
        with pytest.raises(DataError):
            source.labeled_pairs()

    def test_label_shape_must_match(self):
        volume, _ = generate_phantom(0, SHAPE)
        _, label = generate_phantom(0, (16, 16, 24))
        with pytest.raises(DataError):
            DataSource([volume], [label])

    def test_split_is_deterministic_and_disjoint(self):
        train, val = split_indices(10, 0.6, 3)
        assert (train, val) == split_indices(10, 0.6, 3)
        assert len(train) == 6 and len(val) == 4
        assert sorted(train + val) == list(range(10))

    def test_split_keeps_one_training_item(self):
        train, val = split_indices(3, 0.1, 0)
        assert len(train) == 1 and len(val) == 2


class TestBatchProducer(TestCase):
    def test_batches_do_not_depend_on_prefetch(self):
        def make(step):
            return float(np.random.default_rng([7, step]).random())

        eager = list(BatchProducer(make, 6, prefetch=0))
        threaded = list(BatchProducer(make, 6, prefetch=2))
        assert eager == threaded
        assert list(BatchProducer(make, 6, prefetch=2, start=4)) == eager[4:]

    def test_worker_runs_ahead_by_at_most_prefetch(self):
        made = []

        def make(step):
            made.append(step)
            return step

        producer = iter(BatchProducer(make, 10, prefetch=2))
        assert next(producer) == 0
        time.sleep(0.2)
        # one taken, two queued, one blocked on the full queue
        assert len(made) <= 4
        producer.close()

    def test_worker_errors_reach_the_consumer(self):
        def make(step):
            if step == 2:
                raise DataError("broken volume")
            return step

        with pytest.raises(DataError):
            list(BatchProducer(make, 5, prefetch=1))
