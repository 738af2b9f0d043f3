#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
Single file checkpoints of model parameters and optimizer state.

Layout, all integers little-endian::

    offset 0   8 bytes   magic b"HYBMASK\x00"
    offset 8   uint32    format version
    offset 12  uint64    manifest length L in bytes
    offset 20  L bytes   UTF-8 JSON manifest
    offset 20+L          blob: every tensor, raw row-major little-endian

Each manifest entry gives the name, shape, dtype (``<f4`` or ``<f8``),
byte offset from the start of the blob and byte size of one tensor.
"""

import json
import logging
import struct
from typing import Any
from typing import Dict
from typing import List
from typing import Optional

import attr
import numpy as np
from pydantic import BaseModel
from pydantic import Extra
from pydantic import Field
from pydantic import ValidationError

from hybridmask.errors import FormatError
from hybridmask.optim import AdamWState
from hybridmask.params import ModelParams

logger = logging.getLogger(__name__)

MAGIC = b"HYBMASK\x00"
FORMAT_VERSION = 1
HEADER = struct.Struct("<8sIQ")

GROUP_PARAM = "param"
GROUP_EXP_AVG = "optim.exp_avg"
GROUP_EXP_AVG_SQ = "optim.exp_avg_sq"
GROUPS = (GROUP_PARAM, GROUP_EXP_AVG, GROUP_EXP_AVG_SQ)

DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class TensorEntry(BaseModel):
    """Where one tensor lives in the blob."""

    class Config:
        extra = Extra.forbid

    name: str = Field(..., description="Parameter name, unique within its group.")
    group: str = Field(GROUP_PARAM, description="param, optim.exp_avg or optim.exp_avg_sq.")
    shape: List[int] = Field(..., description="Extents, row-major.")
    dtype: str = Field(..., description="<f4 or <f8.")
    offset: int = Field(..., description="Byte offset from the start of the blob.")
    nbytes: int = Field(..., description="Byte size.")

    @property
    def key(self) -> str:
        return self.name if self.group == GROUP_PARAM else f"{self.group}.{self.name}"


class CheckpointManifest(BaseModel):
    """The JSON directory of a checkpoint file."""

    class Config:
        extra = Extra.forbid

    format_version: int = Field(FORMAT_VERSION)
    step: int = Field(0, description="Training steps completed.")
    optimizer_step: int = Field(0, description="AdamW updates applied.")
    blob_size: int = Field(..., description="Byte size of the blob following the manifest.")
    config: Dict[str, Any] = Field(default_factory=dict, description="Effective run configuration.")
    tensors: List[TensorEntry] = Field(default_factory=list)


@attr.attributes(eq=False)
class Checkpoint:
    """The arrays and metadata loaded from a checkpoint file."""

    params = attr.ib(repr=False, metadata=dict(help="name -> parameter array."))
    step = attr.ib(default=0)
    config = attr.ib(factory=dict, repr=False, metadata=dict(help="Effective run configuration."))
    exp_avg = attr.ib(factory=dict, repr=False)
    exp_avg_sq = attr.ib(factory=dict, repr=False)
    optimizer_step = attr.ib(default=0)

    def restore(self, params: ModelParams, strict: bool = True) -> None:
        params.load_state_dict(self.params, strict=strict)

    def optimizer_state(self) -> Optional[AdamWState]:
        if not self.exp_avg:
            return None
        return AdamWState(
            exp_avg={n: a.copy() for n, a in self.exp_avg.items()},
            exp_avg_sq={n: a.copy() for n, a in self.exp_avg_sq.items()},
            step=self.optimizer_step,
        )


def _dtype_code(array: np.ndarray) -> str:
    if array.dtype == np.float32:
        return "<f4"
    if array.dtype == np.float64:
        return "<f8"
    raise FormatError(f"cannot store arrays of dtype {array.dtype}")


def encode_checkpoint(
    params: ModelParams,
    step: int = 0,
    config: Optional[Dict[str, Any]] = None,
    state: Optional[AdamWState] = None,
) -> bytes:
    """Return the bytes of a checkpoint of ``params`` and optional optimizer ``state``."""
    arrays = [(GROUP_PARAM, name, tensor.data) for name, tensor in params.items()]
    if state is not None:
        arrays += [(GROUP_EXP_AVG, n, a) for n, a in state.exp_avg.items()]
        arrays += [(GROUP_EXP_AVG_SQ, n, a) for n, a in state.exp_avg_sq.items()]

    entries, chunks, offset = [], [], 0
    for group, name, array in arrays:
        code = _dtype_code(array)
        raw = np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes(order="C")
        entries.append(
            TensorEntry(
                name=name, group=group, shape=list(array.shape), dtype=code, offset=offset, nbytes=len(raw)
            )
        )
        chunks.append(raw)
        offset += len(raw)

    manifest = CheckpointManifest(
        step=step,
        optimizer_step=state.step if state is not None else 0,
        blob_size=offset,
        config=config or {},
        tensors=entries,
    )
    manifest_bytes = manifest.json().encode("utf-8")
    return HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest_bytes)) + manifest_bytes + b"".join(chunks)


def save_checkpoint(
    location: str,
    params: ModelParams,
    step: int = 0,
    config: Optional[Dict[str, Any]] = None,
    state: Optional[AdamWState] = None,
) -> None:
    """Write a checkpoint file at ``location``."""
    data = encode_checkpoint(params, step=step, config=config, state=state)
    with open(location, "wb") as f:
        f.write(data)
    logger.info(f"saved checkpoint {location}: {len(params)} tensors, step {step}")


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    """Return the Checkpoint encoded in ``data``."""
    if len(data) < HEADER.size:
        raise FormatError(f"{source}: truncated header, {len(data)} bytes")
    magic, version, manifest_size = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{source}: not a hybridmask checkpoint (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"{source}: checkpoint format version {version}, this library reads {FORMAT_VERSION}"
        )
    start = HEADER.size + manifest_size
    if start > len(data):
        raise FormatError(f"{source}: truncated manifest, {manifest_size} bytes declared")
    try:
        manifest = CheckpointManifest.parse_obj(
            json.loads(data[HEADER.size : start].decode("utf-8"))
        )
    except (ValueError, ValidationError) as e:
        raise FormatError(f"{source}: corrupt manifest: {e}") from e
    if manifest.format_version != version:
        raise FormatError(f"{source}: manifest version {manifest.format_version} differs from header")

    blob = memoryview(data)[start:]
    if len(blob) != manifest.blob_size:
        raise FormatError(
            f"{source}: blob holds {len(blob)} bytes, manifest declares {manifest.blob_size}"
        )

    groups = {group: {} for group in GROUPS}
    for entry in manifest.tensors:
        if entry.group not in groups:
            raise FormatError(f"{source}: entry {entry.name}: unknown group {entry.group!r}")
        dtype = DTYPES.get(entry.dtype)
        if dtype is None:
            raise FormatError(f"{source}: entry {entry.key}: unsupported dtype {entry.dtype!r}")
        if any(n < 0 for n in entry.shape):
            raise FormatError(f"{source}: entry {entry.key}: negative extent in {entry.shape}")
        expected = int(np.prod(entry.shape, dtype=np.int64)) * dtype.itemsize
        if entry.nbytes != expected:
            raise FormatError(
                f"{source}: entry {entry.key}: {entry.nbytes} bytes for shape {entry.shape}, "
                f"expected {expected}"
            )
        if entry.offset < 0 or entry.offset + entry.nbytes > len(blob):
            raise FormatError(
                f"{source}: entry {entry.key}: bytes {entry.offset}..{entry.offset + entry.nbytes} "
                f"outside the {len(blob)} byte blob"
            )
        if entry.name in groups[entry.group]:
            raise FormatError(f"{source}: entry {entry.key}: duplicate name")
        raw = blob[entry.offset : entry.offset + entry.nbytes]
        array = np.frombuffer(raw, dtype=dtype).reshape(entry.shape)
        groups[entry.group][entry.name] = array.astype(dtype.newbyteorder("="), copy=True)

    return Checkpoint(
        params=groups[GROUP_PARAM],
        step=manifest.step,
        config=manifest.config,
        exp_avg=groups[GROUP_EXP_AVG],
        exp_avg_sq=groups[GROUP_EXP_AVG_SQ],
        optimizer_step=manifest.optimizer_step,
    )


def load_checkpoint(location: str) -> Checkpoint:
    """Return the Checkpoint stored at ``location``."""
    try:
        with open(location, "rb") as f:
            data = f.read()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {location}: {e}") from e
    return decode_checkpoint(data, source=location)
