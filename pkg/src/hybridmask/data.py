#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
Volumes, synthetic phantoms and the data pipeline.

A volume on disk is a pair of files: the raw values as little-endian
32-bit floats in row-major ``[D, H, W]`` order (W fastest), and a JSON
sidecar next to it::

    {"shape":[32,32,32],"spacing_mm":[1.5,1.5,1.5],"dtype":"f32le"}

A data directory holds volumes, optional label volumes and an
``index.json`` listing them.
"""

import json
import logging
import os
import queue
import threading
from typing import Any
from typing import Callable
from typing import Dict
from typing import Iterator
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import attr
import numpy as np
from pydantic import BaseModel
from pydantic import Extra
from pydantic import Field
from pydantic import ValidationError

from hybridmask.errors import DataError
from hybridmask.errors import FormatError

logger = logging.getLogger(__name__)

TRACE = False

HU_MIN = -175.0
HU_MAX = 250.0

RAW_DTYPE = "f32le"
RAW_NUMPY_DTYPE = np.dtype("<f4")

INDEX_NAME = "index.json"

# phantom layout
PHANTOM_MIN_EXTENT = 16
PHANTOM_SPACING_MM = (1.5, 1.5, 1.5)
PHANTOM_RANGE = (-200.0, 300.0)
BACKGROUND_LEVEL = -120.0
BACKGROUND_SWING = 30.0
# no background voxel reaches this value, every organ voxel exceeds it
BACKGROUND_CEILING = -40.0
ORGAN_INTENSITIES = (60.0, 80.0, 100.0, 120.0, 140.0, 160.0, 180.0)
VESSEL_INTENSITY = (200.0, 280.0)
NOISE_SIGMA = 4.0


@attr.attributes(eq=False)
class Volume3D:
    """
    A dense 3D scalar field with its voxel spacing.
    """

    values = attr.ib(
        repr=False,
        metadata=dict(help="float32 array [D, H, W]."),
    )

    spacing_mm = attr.ib(
        default=PHANTOM_SPACING_MM,
        converter=lambda s: tuple(float(v) for v in s),
        metadata=dict(help="Voxel spacing in millimeters per axis."),
    )

    provenance = attr.ib(
        default="",
        metadata=dict(help="File path or phantom seed this volume comes from."),
    )

    def __attrs_post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise DataError(f"volume must be 3D, got shape {self.values.shape}")
        if len(self.spacing_mm) != 3:
            raise DataError(f"spacing_mm needs 3 values, got {self.spacing_mm}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.values.shape)

    def with_values(self, values: np.ndarray, provenance: Optional[str] = None) -> "Volume3D":
        return Volume3D(
            values=values,
            spacing_mm=self.spacing_mm,
            provenance=self.provenance if provenance is None else provenance,
        )


################################################################################
# Preprocessing
################################################################################


def window_intensities(values: np.ndarray) -> np.ndarray:
    """
    Return ``values`` clipped to the soft tissue window and mapped to [0, 1].

    >>> window_intensities(np.array([300.0, -175.0, 37.5])).tolist()
    [1.0, 0.0, 0.5]
    """
    values = np.asarray(values, dtype=np.float64)
    clipped = np.clip(values, HU_MIN, HU_MAX)
    return ((clipped - HU_MIN) / (HU_MAX - HU_MIN)).astype(np.float32)


def crop_origin(shape: Sequence[int], crop: Sequence[int], rng=None) -> Tuple[int, ...]:
    """
    Return the corner of a ``crop`` inside ``shape``: random when ``rng``
    is given, centered otherwise.
    """
    if len(crop) != len(shape):
        raise DataError(f"crop {tuple(crop)} and volume {tuple(shape)} differ in rank")
    for axis, extent, size in zip("DHW", shape, crop):
        if size > extent:
            raise DataError(f"crop extent {size} exceeds volume extent {extent} on axis {axis}")
    if rng is None:
        return tuple((extent - size) // 2 for extent, size in zip(shape, crop))
    return tuple(int(rng.integers(0, extent - size + 1)) for extent, size in zip(shape, crop))


def crop_volume(volume: Volume3D, crop: Sequence[int], rng=None) -> Volume3D:
    origin = crop_origin(volume.shape, crop, rng)
    window = tuple(slice(o, o + s) for o, s in zip(origin, crop))
    return volume.with_values(volume.values[window].copy())


def preprocess(raw: Volume3D, crop: Optional[Sequence[int]] = None, rng=None) -> Volume3D:
    """
    Return ``raw`` HU values windowed to [0, 1] and cropped to ``crop``:
    at random with the generator ``rng``, else centered.
    """
    if not np.all(np.isfinite(raw.values)):
        raise DataError(f"volume {raw.provenance or '<memory>'} has non-finite values")
    volume = raw.with_values(window_intensities(raw.values))
    if crop is not None:
        volume = crop_volume(volume, crop, rng)
    return volume


def crop_pair(volume: Volume3D, label: Volume3D, crop: Sequence[int], rng=None):
    """Return ``volume`` and ``label`` cropped at the same place."""
    if volume.shape != label.shape:
        raise DataError(f"volume shape {volume.shape} differs from label shape {label.shape}")
    origin = crop_origin(volume.shape, crop, rng)
    window = tuple(slice(o, o + s) for o, s in zip(origin, crop))
    return (
        volume.with_values(volume.values[window].copy()),
        label.with_values(label.values[window].copy()),
    )


################################################################################
# Phantoms
################################################################################


@attr.attributes(frozen=True)
class Ellipsoid:
    center = attr.ib(converter=tuple, metadata=dict(help="Center in unit cube coordinates."))
    radii = attr.ib(converter=tuple, metadata=dict(help="Semi-axes in unit cube coordinates."))
    intensity = attr.ib(type=float, metadata=dict(help="HU value inside."))

    def occupancy(self, shape: Sequence[int]) -> np.ndarray:
        """Return the boolean array of voxels whose center lies inside."""
        grids = unit_grids(shape)
        inside = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, self.center, self.radii))
        return inside <= 1.0


@attr.attributes(frozen=True)
class Tube:
    anchor = attr.ib(converter=tuple, metadata=dict(help="A point of the axis, in voxels."))
    direction = attr.ib(converter=tuple, metadata=dict(help="Unit vector of the axis."))
    radius = attr.ib(type=float, metadata=dict(help="Radius in voxels."))
    intensity = attr.ib(type=float, metadata=dict(help="HU value inside."))

    def occupancy(self, shape: Sequence[int]) -> np.ndarray:
        points = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"), -1)
        offset = points - np.array(self.anchor)
        distance = np.linalg.norm(np.cross(offset, np.array(self.direction)), axis=-1)
        return distance <= self.radius


@attr.attributes(frozen=True)
class PhantomLayout:
    """The random structures a phantom is rendered from."""

    seed = attr.ib(type=int)
    shape = attr.ib(converter=tuple)
    waves = attr.ib(repr=False, metadata=dict(help="[3, 4] frequencies and phases of the background."))
    ellipsoids = attr.ib(converter=tuple, metadata=dict(help="Labeled organs, drawn first."))
    tubes = attr.ib(converter=tuple, metadata=dict(help="Unlabeled vessels, drawn over the organs."))


def unit_grids(shape: Sequence[int]):
    """Return the voxel center coordinates of ``shape`` scaled to the unit cube."""
    axes = [(np.arange(n, dtype=np.float64) + 0.5) / n for n in shape]
    return np.meshgrid(*axes, indexing="ij")


def phantom_layout(seed: int, shape: Sequence[int]) -> PhantomLayout:
    """Return the random layout of the phantom ``seed`` for ``shape``."""
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or min(shape) < PHANTOM_MIN_EXTENT:
        raise DataError(f"phantom shape must be at least {PHANTOM_MIN_EXTENT}^3, got {shape}")
    rng = np.random.default_rng(seed)
    waves = np.concatenate(
        [rng.uniform(0.5, 2.0, size=(3, 3)), rng.uniform(0, 2 * np.pi, size=(3, 1))], axis=1
    )
    count = int(rng.integers(2, 6))
    intensities = rng.permutation(ORGAN_INTENSITIES)[:count]
    ellipsoids = [
        Ellipsoid(
            center=rng.uniform(0.3, 0.7, size=3),
            radii=rng.uniform(0.13, 0.22, size=3),
            intensity=float(intensity),
        )
        for intensity in intensities
    ]
    tubes = []
    for _ in range(int(rng.integers(1, 4))):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        anchor = rng.uniform(0.2, 0.8, size=3) * np.array(shape)
        radius = max(1.0, float(rng.uniform(0.03, 0.05)) * min(shape))
        tubes.append(
            Tube(
                anchor=anchor,
                direction=direction,
                radius=radius,
                intensity=float(rng.uniform(*VESSEL_INTENSITY)),
            )
        )
    return PhantomLayout(seed=seed, shape=shape, waves=waves, ellipsoids=ellipsoids, tubes=tubes)


def render_phantom(layout: PhantomLayout) -> Tuple[Volume3D, Volume3D]:
    grids = unit_grids(layout.shape)
    field = sum(
        np.cos(2 * np.pi * (fz * grids[0] + fy * grids[1] + fx * grids[2]) + phase)
        for fz, fy, fx, phase in layout.waves
    ) / len(layout.waves)
    values = BACKGROUND_LEVEL + BACKGROUND_SWING * field
    label = np.zeros(layout.shape, dtype=bool)
    for ellipsoid in layout.ellipsoids:
        inside = ellipsoid.occupancy(layout.shape)
        values[inside] = ellipsoid.intensity
        label |= inside
    for tube in layout.tubes:
        values[tube.occupancy(layout.shape)] = tube.intensity
    noise = np.random.default_rng([layout.seed, 1]).normal(0.0, NOISE_SIGMA, size=layout.shape)
    values = np.clip(values + noise, *PHANTOM_RANGE)
    provenance = f"phantom:seed={layout.seed}"
    return (
        Volume3D(values=values, spacing_mm=PHANTOM_SPACING_MM, provenance=provenance),
        Volume3D(values=label, spacing_mm=PHANTOM_SPACING_MM, provenance=f"{provenance}:label"),
    )


def generate_phantom(seed: int, shape: Sequence[int] = (32, 32, 32)) -> Tuple[Volume3D, Volume3D]:
    """
    Return a synthetic CT-like volume in HU and its binary organ label.

    The volume is a smooth background with two to five ellipsoid organs of
    distinct intensities, one to three vessels crossing them and a little
    Gaussian noise. The label is the union of the organs.
    """
    return render_phantom(phantom_layout(seed, shape))


################################################################################
# Raw volume files
################################################################################


class VolumeSidecar(BaseModel):
    """JSON sidecar of a raw volume file."""

    class Config:
        extra = Extra.forbid

    shape: List[int] = Field(..., description="Extents [D, H, W].")
    spacing_mm: List[float] = Field(..., description="Voxel spacing per axis, millimeters.")
    dtype: str = Field(RAW_DTYPE, description="Always f32le: little-endian 32-bit floats.")

    def to_json(self) -> str:
        return json.dumps(
            {"shape": self.shape, "spacing_mm": self.spacing_mm, "dtype": self.dtype},
            separators=(",", ":"),
        )


def sidecar_path(location: str) -> str:
    """
    >>> sidecar_path("data/phantom-0001.raw")
    'data/phantom-0001.json'
    """
    return os.path.splitext(location)[0] + ".json"


def write_volume(volume: Volume3D, location: str) -> None:
    """Write ``volume`` as raw floats at ``location`` plus its sidecar."""
    sidecar = VolumeSidecar(shape=list(volume.shape), spacing_mm=list(volume.spacing_mm))
    with open(location, "wb") as f:
        f.write(np.ascontiguousarray(volume.values, dtype=RAW_NUMPY_DTYPE).tobytes(order="C"))
    with open(sidecar_path(location), "w") as f:
        f.write(sidecar.to_json())


def read_volume(location: str) -> Volume3D:
    """Return the Volume3D stored at ``location`` with its sidecar."""
    side = sidecar_path(location)
    try:
        with open(side) as f:
            sidecar = VolumeSidecar.parse_raw(f.read())
    except OSError as e:
        raise FormatError(f"{location}: cannot read sidecar {side}: {e}") from e
    except ValidationError as e:
        raise FormatError(f"{side}: invalid sidecar: {e}") from e
    if sidecar.dtype != RAW_DTYPE:
        raise FormatError(f"{side}: unsupported dtype {sidecar.dtype!r}, expected {RAW_DTYPE!r}")
    if len(sidecar.shape) != 3 or len(sidecar.spacing_mm) != 3:
        raise FormatError(f"{side}: shape and spacing_mm need 3 values each")
    try:
        with open(location, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise FormatError(f"cannot read volume {location}: {e}") from e
    expected = int(np.prod(sidecar.shape)) * RAW_NUMPY_DTYPE.itemsize
    if len(raw) != expected:
        raise FormatError(
            f"{location}: {len(raw)} bytes, sidecar shape {sidecar.shape} needs {expected}"
        )
    values = np.frombuffer(raw, dtype=RAW_NUMPY_DTYPE).reshape(sidecar.shape)
    return Volume3D(
        values=values.astype(np.float32), spacing_mm=sidecar.spacing_mm, provenance=location
    )


################################################################################
# Data index
################################################################################


class IndexEntry(BaseModel):
    class Config:
        extra = Extra.forbid

    volume: str = Field(..., description="Volume file, relative to the index directory.")
    label: Optional[str] = Field(None, description="Label file, relative to the index directory.")
    shape: List[int] = Field(..., description="Extents [D, H, W] of the volume and label.")


class DataIndex(BaseModel):
    """The ``index.json`` of a data directory."""

    class Config:
        extra = Extra.forbid

    entries: List[IndexEntry] = Field(default_factory=list)
    provenance: Dict[str, Any] = Field(
        default_factory=dict, description="Settings the data was generated with."
    )


def write_index(index: DataIndex, directory: str) -> str:
    location = os.path.join(directory, INDEX_NAME)
    with open(location, "w") as f:
        f.write(index.json(indent=2))
        f.write("\n")
    return location


def read_index(directory: str) -> DataIndex:
    location = os.path.join(directory, INDEX_NAME)
    try:
        with open(location) as f:
            return DataIndex.parse_raw(f.read())
    except OSError as e:
        raise DataError(f"cannot read data index {location}: {e}") from e
    except ValidationError as e:
        raise FormatError(f"{location}: invalid data index: {e}") from e


def generate_dataset(directory: str, count: int, shape: Sequence[int], seed: int) -> DataIndex:
    """
    Write ``count`` phantom volume and label pairs to ``directory`` with
    their index. Phantom ``i`` uses the seed ``seed + i``.
    """
    if count < 1:
        raise DataError(f"count must be >= 1, got {count}")
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create data directory {directory}: {e}") from e
    index = DataIndex(provenance=dict(count=count, shape=list(shape), seed=seed))
    for i in range(count):
        volume, label = generate_phantom(seed + i, shape)
        name = f"phantom-{i:04d}"
        volume_name, label_name = f"{name}.raw", f"{name}-label.raw"
        try:
            write_volume(volume, os.path.join(directory, volume_name))
            write_volume(label, os.path.join(directory, label_name))
        except OSError as e:
            raise DataError(f"cannot write phantom {name} to {directory}: {e}") from e
        index.entries.append(IndexEntry(volume=volume_name, label=label_name, shape=list(volume.shape)))
        logger.debug(f"generate_dataset: wrote {name}")
    write_index(index, directory)
    return index


class DataSource:
    """
    An ordered collection of raw volumes with optional labels, in memory.
    """

    def __init__(self, volumes: Sequence[Volume3D], labels: Optional[Sequence[Optional[Volume3D]]] = None):
        if not volumes:
            raise DataError("empty data source")
        labels = list(labels) if labels is not None else [None] * len(volumes)
        if len(labels) != len(volumes):
            raise DataError(f"{len(labels)} labels for {len(volumes)} volumes")
        for volume, label in zip(volumes, labels):
            if label is not None and label.shape != volume.shape:
                raise DataError(
                    f"label shape {label.shape} differs from volume shape {volume.shape} "
                    f"for {volume.provenance}"
                )
        self.volumes = list(volumes)
        self.labels = labels

    def __len__(self):
        return len(self.volumes)

    def __repr__(self):
        return f"DataSource({len(self)} volumes, {self.num_labeled} labeled)"

    @property
    def num_labeled(self) -> int:
        return sum(label is not None for label in self.labels)

    def labeled_pairs(self) -> List[Tuple[Volume3D, Volume3D]]:
        pairs = [(v, l) for v, l in zip(self.volumes, self.labels) if l is not None]
        if not pairs:
            raise DataError("data source has no labeled volume")
        return pairs

    @classmethod
    def from_directory(cls, directory: str) -> "DataSource":
        """Load every volume and label listed in the index of ``directory``."""
        index = read_index(directory)
        if not index.entries:
            raise DataError(f"data index of {directory} lists no volume")
        volumes, labels = [], []
        for entry in index.entries:
            volume = read_volume(os.path.join(directory, entry.volume))
            if list(volume.shape) != entry.shape:
                raise FormatError(
                    f"{entry.volume}: shape {list(volume.shape)} differs from index shape {entry.shape}"
                )
            volumes.append(volume)
            labels.append(read_volume(os.path.join(directory, entry.label)) if entry.label else None)
        return cls(volumes, labels)

    @classmethod
    def from_phantoms(cls, count: int, shape: Sequence[int], seed: int = 0) -> "DataSource":
        pairs = [generate_phantom(seed + i, shape) for i in range(count)]
        return cls([v for v, _ in pairs], [l for _, l in pairs])


def split_indices(count: int, train_fraction: float, seed: int) -> Tuple[List[int], List[int]]:
    """
    Return a deterministic (train, validation) split of ``range(count)``.
    At least one item trains; the validation split may be empty.

    >>> split_indices(5, 1.0, 0)
    ([0, 1, 2, 3, 4], [])
    """
    if train_fraction >= 1.0:
        return list(range(count)), []
    order = np.random.default_rng(seed).permutation(count)
    cut = max(1, int(np.floor(train_fraction * count + 0.5)))
    return sorted(int(i) for i in order[:cut]), sorted(int(i) for i in order[cut:])


################################################################################
# Batch producer
################################################################################


class _Failure:
    def __init__(self, error: BaseException):
        self.error = error


class BatchProducer:
    """
    Iterate over ``make_batch(step)`` for ``steps`` steps. With ``prefetch``
    above zero, a worker thread builds up to ``prefetch`` batches ahead on
    a bounded queue. ``make_batch`` must draw its randomness from the step
    only, so that the batches do not depend on thread timing.
    """

    def __init__(self, make_batch: Callable[[int], Any], steps: int, prefetch: int = 2, start: int = 0):
        self.make_batch = make_batch
        self.steps = steps
        self.start = start
        self.prefetch = prefetch
        self._stop = threading.Event()

    def __iter__(self) -> Iterator[Any]:
        if self.prefetch <= 0:
            for step in range(self.start, self.steps):
                yield self.make_batch(step)
            return

        ready: "queue.Queue" = queue.Queue(maxsize=self.prefetch)
        worker = threading.Thread(target=self._produce, args=(ready,), daemon=True)
        worker.start()
        try:
            for _ in range(self.start, self.steps):
                item = ready.get()
                if isinstance(item, _Failure):
                    raise item.error
                yield item
        finally:
            self._stop.set()
            # unblock a worker waiting on a full queue
            while worker.is_alive():
                try:
                    ready.get_nowait()
                except queue.Empty:
                    worker.join(timeout=0.05)

    def _produce(self, ready: "queue.Queue") -> None:
        for step in range(self.start, self.steps):
            if self._stop.is_set():
                return
            try:
                item = self.make_batch(step)
            except Exception as e:
                ready.put(_Failure(e))
                return
            while not self._stop.is_set():
                try:
                    ready.put(item, timeout=0.05)
                    break
                except queue.Full:
                    continue
            if TRACE:
                logger.debug(f"BatchProducer: step {step} ready")
