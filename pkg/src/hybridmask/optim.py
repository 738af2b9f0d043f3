#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
AdamW with decoupled weight decay and the cosine learning rate schedule.
"""

import logging
import math
from typing import Dict
from typing import Optional
from typing import Sequence

import attr
import numpy as np

from hybridmask.errors import ConsistencyError
from hybridmask.errors import TrainingError
from hybridmask.params import ModelParams
from hybridmask.params import decays

logger = logging.getLogger(__name__)

ADAM_EPS = 1e-8


@attr.attributes(eq=False)
class AdamWState:
    """First and second moment estimates of every parameter, and the step count."""

    exp_avg = attr.ib(factory=dict, repr=False, metadata=dict(help="name -> first moment array."))
    exp_avg_sq = attr.ib(factory=dict, repr=False, metadata=dict(help="name -> second moment array."))
    step = attr.ib(default=0, metadata=dict(help="Number of updates applied."))

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamWState":
        return cls(
            exp_avg={n: np.zeros_like(t.data) for n, t in params.items()},
            exp_avg_sq={n: np.zeros_like(t.data) for n, t in params.items()},
        )


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    """
    Return the cosine annealed learning rate of ``step`` out of ``total``.

    >>> round(cosine_lr(0, 200, 1e-4, 1e-6), 12)
    0.0001
    >>> cosine_lr(200, 200, 1e-4, 1e-6)
    1e-06
    >>> round(cosine_lr(100, 200, 1e-4, 1e-6), 12)
    5.05e-05
    """
    if total <= 0:
        return lr_max
    step = min(max(step, 0), total)
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / total))


def adamw_step(
    params: ModelParams,
    state: AdamWState,
    lr: float,
    betas: Sequence[float] = (0.9, 0.95),
    weight_decay: float = 0.05,
    grads: Optional[Dict[str, np.ndarray]] = None,
    eps: float = ADAM_EPS,
) -> AdamWState:
    """
    Apply one AdamW update to ``params`` in place and return ``state``.

    ``grads`` defaults to the ``grad`` of each parameter; a parameter
    without gradient is left untouched. Weight decay only applies to
    matrices and kernels.
    """
    grads = grads if grads is not None else {n: t.grad for n, t in params.items()}
    step = state.step + 1
    for name, grad in grads.items():
        if grad is not None and not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient for parameter {name}", step=step)

    beta1, beta2 = betas
    bias1 = 1 - beta1**step
    bias2 = 1 - beta2**step
    for name, tensor in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        if name not in state.exp_avg:
            state.exp_avg[name] = np.zeros_like(tensor.data)
            state.exp_avg_sq[name] = np.zeros_like(tensor.data)
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        if m.shape != tensor.shape:
            raise ConsistencyError(
                f"optimizer state of {name} has shape {m.shape}, parameter has {tensor.shape}"
            )
        grad = grad.astype(tensor.dtype, copy=False)
        m *= beta1
        m += (1 - beta1) * grad
        v *= beta2
        v += (1 - beta2) * grad * grad
        if lr == 0:
            continue
        data = tensor.data
        if weight_decay and decays(name, tensor):
            data *= 1 - lr * weight_decay
        data -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
    state.step = step
    return state
