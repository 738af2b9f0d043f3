#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
Named parameter tensors of the hybrid model and their initialization.

Parameter names are dotted paths such as ``encoder.stages.2.blocks.0.dwconv.weight``
or ``vit.blocks.1.attn.qkv.bias``. Names are stable: they key the
checkpoint manifest and select which tensors a fine-tuning model takes
from a pretraining checkpoint.
"""

import logging
from typing import Dict
from typing import Iterable
from typing import Iterator
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np

from hybridmask.errors import ConsistencyError
from hybridmask.errors import DimensionError
from hybridmask.tensor import Tensor
from hybridmask.tensor import parameter
from hybridmask.tensor import resolve_dtype

logger = logging.getLogger(__name__)

# taken from a pretraining checkpoint into a fine-tuning model
TRANSFER_PREFIXES = ("encoder.", "vit.")

# never transferred, even if a prefix above matched
TRANSFER_EXCLUDED = ("decoder.mask_embed.", "head.")

EMBED_STD = 0.02


class ModelParams:
    """
    An ordered mapping of parameter name to leaf Tensor requiring gradients.
    """

    def __init__(self, tensors: Optional[Mapping[str, Tensor]] = None):
        self._tensors: Dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self):
        return f"ModelParams({len(self)} tensors, {self.num_parameters} values)"

    def get(self, name: str) -> Optional[Tensor]:
        return self._tensors.get(name)

    def names(self):
        return list(self._tensors)

    def items(self) -> Iterable[Tuple[str, Tensor]]:
        return self._tensors.items()

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._tensors:
            raise ConsistencyError(f"duplicate parameter name {name!r}")
        self._tensors[name] = tensor
        return tensor

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self._tensors.values())).dtype

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Return a copy of every parameter array, keyed by name."""
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        """
        Copy the arrays of ``state`` into the parameters of the same name.
        With ``strict``, both name sets must be equal.
        """
        if strict:
            missing = sorted(set(self._tensors) - set(state))
            unexpected = sorted(set(state) - set(self._tensors))
            if missing or unexpected:
                raise ConsistencyError(
                    f"parameter names differ: missing {missing}, unexpected {unexpected}"
                )
        for name, array in state.items():
            if name not in self._tensors:
                continue
            tensor = self._tensors[name]
            array = np.asarray(array)
            if array.shape != tensor.shape:
                raise DimensionError(
                    f"parameter {name}: stored shape {array.shape} does not match {tensor.shape}"
                )
            tensor.data = array.astype(tensor.dtype, copy=True)

    def filtered(self, prefixes: Sequence[str], excluded: Sequence[str] = ()) -> Dict[str, Tensor]:
        return {
            name: t
            for name, t in self._tensors.items()
            if name.startswith(tuple(prefixes)) and not name.startswith(tuple(excluded))
        }


def is_transferable(name: str) -> bool:
    """
    Return True if a pretrained parameter ``name`` is reused when
    fine-tuning.

    >>> is_transferable("encoder.stem.weight")
    True
    >>> is_transferable("decoder.mask_embed.1")
    False
    """
    return name.startswith(TRANSFER_PREFIXES) and not name.startswith(TRANSFER_EXCLUDED)


def decays(name: str, tensor: Tensor) -> bool:
    """
    Return True if weight decay applies: matrices and kernels, not biases,
    norm affines or embeddings.
    """
    return tensor.ndim >= 2 and "embed" not in name.rsplit(".", 1)[-1]


class ParamBuilder:
    """
    Create parameters in a fixed order from one seeded generator.
    Weights follow a uniform law bounded by one over the square root of the
    fan-in; norms start as identity; embeddings are small normal values.
    """

    def __init__(self, seed: int, precision="float32", params: Optional[ModelParams] = None):
        self.rng = np.random.default_rng(seed)
        self.dtype = resolve_dtype(precision)
        self.params = params if params is not None else ModelParams()

    def _add(self, name: str, array: np.ndarray) -> Tensor:
        return self.params.add(name, parameter(array.astype(self.dtype), dtype=self.dtype))

    def _uniform(self, shape, fan_in: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return self.rng.uniform(-bound, bound, size=shape)

    def conv(self, name: str, cout: int, cin: int, kernel: int, depthwise: bool = False) -> None:
        cin_g = 1 if depthwise else cin
        fan_in = cin_g * kernel**3
        self._add(f"{name}.weight", self._uniform((cout, cin_g, kernel, kernel, kernel), fan_in))
        self._add(f"{name}.bias", self._uniform((cout,), fan_in))

    def linear(self, name: str, fout: int, fin: int) -> None:
        self._add(f"{name}.weight", self._uniform((fout, fin), fin))
        self._add(f"{name}.bias", self._uniform((fout,), fin))

    def norm(self, name: str, features: int) -> None:
        self._add(f"{name}.gamma", np.ones(features))
        self._add(f"{name}.beta", np.zeros(features))

    def embedding(self, name: str, shape) -> None:
        self._add(name, self.rng.normal(0.0, EMBED_STD, size=shape))
