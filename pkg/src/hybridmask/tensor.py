#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
A small dense N-dimensional tensor with reverse-mode automatic
differentiation, backed by numpy arrays.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` working on plain numpy arrays and a ``backward`` returning the
gradient with respect to each input. ``Function.apply`` records the
function as the ``creator`` of its output tensor, which builds the tape
that :meth:`Tensor.backward` walks in reverse topological order.

Arrays are row-major with the last axis fastest. Training runs in 32-bit
floats; 64-bit is available for verification work::

    >>> with default_dtype("float64"):
    ...     x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> loss = (x * x).sum()
    >>> loss.backward()
    >>> x.grad.tolist()
    [2.0, 4.0, 6.0]
"""

import logging
import threading
from contextlib import contextmanager
from typing import Any
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np

from hybridmask.errors import ConfigError
from hybridmask.errors import DimensionError
from hybridmask.errors import UsageError

logger = logging.getLogger(__name__)

TRACE = False

PRECISIONS = {
    "float32": np.dtype(np.float32),
    "float64": np.dtype(np.float64),
}

_local = threading.local()


def resolve_dtype(precision: Union[str, np.dtype, type]) -> np.dtype:
    """
    Return the numpy float dtype for a ``precision`` given as "float32",
    "float64" or a numpy dtype.
    """
    if isinstance(precision, str):
        try:
            return PRECISIONS[precision]
        except KeyError:
            raise ConfigError(
                f"Unknown precision: {precision!r}, expected one of {sorted(PRECISIONS)}"
            )
    dtype = np.dtype(precision)
    if dtype not in PRECISIONS.values():
        raise ConfigError(f"Unsupported tensor dtype: {dtype}")
    return dtype


def get_default_dtype() -> np.dtype:
    return getattr(_local, "dtype", PRECISIONS["float32"])


@contextmanager
def default_dtype(precision):
    """
    Use ``precision`` as the dtype of new tensors created in this thread
    from non-float data, for the duration of the ``with`` block.
    """
    previous = get_default_dtype()
    _local.dtype = resolve_dtype(precision)
    try:
        yield _local.dtype
    finally:
        _local.dtype = previous


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """
    Disable tape recording in this thread. Outputs of operations run inside
    the block never require gradients.
    """
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """
    Sum ``grad`` over the axes that numpy broadcasting added or stretched so
    that the result has ``shape``.
    """
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """
    Base class of differentiable operations.

    ``forward`` receives the ``data`` arrays of the input tensors and keyword
    arguments, and returns the output array. ``backward`` receives the
    gradient of the loss with respect to the output and returns one gradient
    array (or None) per input tensor.
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__}.backward")

    @classmethod
    def apply(cls, *inputs: Any, **kwargs: Any) -> "Tensor":
        dtype = next(
            (t.dtype for t in inputs if isinstance(t, Tensor)), get_default_dtype()
        )
        tensors = tuple(as_tensor(t, dtype=dtype) for t in inputs)
        func = cls(*tensors)
        data = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
        return Tensor(
            data,
            requires_grad=requires_grad,
            creator=func if requires_grad else None,
        )


class Tensor:
    """
    A float array with an optional gradient and the operation that made it.
    """

    # let numpy defer to our reflected operators
    __array_priority__ = 1000

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        creator: Optional[Function] = None,
        dtype: Optional[Union[str, np.dtype]] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in PRECISIONS.values():
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        else:
            dtype = resolve_dtype(dtype)
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.creator = creator
        self.grad: Optional[np.ndarray] = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """
        Populate ``grad`` on every tensor requiring gradients that this
        scalar tensor depends on, then clear the tape.

        Gradients accumulate into leaf tensors across calls; call
        :meth:`zero_grad` between optimization steps.
        """
        if self.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that does not require gradients")

        order = self._topological_order()
        if TRACE:
            logger.debug(f"backward: {len(order)} tape nodes")

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            func = node.creator
            if func is None:
                node.grad = grad if node.grad is None else node.grad + grad
                continue
            node.grad = grad
            for inp, inp_grad in zip(func.inputs, func.backward(grad)):
                if inp_grad is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + inp_grad
                else:
                    grads[key] = inp_grad

        for node in order:
            node.creator = None

    def _topological_order(self) -> List["Tensor"]:
        """
        Return the tensors of the tape reachable from this tensor, inputs
        before outputs.
        """
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for inp in node.creator.inputs:
                    if inp.requires_grad and id(inp) not in visited:
                        stack.append((inp, False))
        return order

    # arithmetic

    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise UsageError("Tensor powers support scalar exponents only")
        return PowScalar.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return Matmul.apply(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # reductions and shape

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def max(self, axis: int, keepdims: bool = False) -> "Tensor":
        return Max.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    # element-wise

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def tanh(self) -> "Tensor":
        return Tanh.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def sqrt(self) -> "Tensor":
        return PowScalar.apply(self, exponent=0.5)


def as_tensor(value: Any, dtype=None) -> Tensor:
    """
    Return ``value`` as a Tensor. Constants (scalars and arrays) become
    tensors that do not require gradients, with ``dtype`` when provided.
    """
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), requires_grad=False, dtype=dtype)


def parameter(data: np.ndarray, dtype=None) -> Tensor:
    """Return a leaf tensor requiring gradients."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """
    Return the rows of ``x`` (indexed along axis 0) selected by the integer
    array ``index``. Negative entries select an all-zero row.
    """
    return GatherRows.apply(x, index=np.asarray(index, dtype=np.int64))


def scatter_rows(x: Tensor, index: np.ndarray, num_rows: int) -> Tensor:
    """
    Return a tensor of ``num_rows`` rows, zero everywhere except at the
    unique row positions ``index`` which receive the rows of ``x``.
    """
    return ScatterRows.apply(x, index=np.asarray(index, dtype=np.int64), num_rows=num_rows)


################################################################################
# Element-wise arithmetic
################################################################################


class Add(Function):
    def forward(self, x, y):
        self.shapes = x.shape, y.shape
        return x + y

    def backward(self, grad):
        x_shape, y_shape = self.shapes
        return unbroadcast(grad, x_shape), unbroadcast(grad, y_shape)


class Sub(Function):
    def forward(self, x, y):
        self.shapes = x.shape, y.shape
        return x - y

    def backward(self, grad):
        x_shape, y_shape = self.shapes
        return unbroadcast(grad, x_shape), unbroadcast(-grad, y_shape)


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return (
            unbroadcast(grad * self.y, self.x.shape),
            unbroadcast(grad * self.x, self.y.shape),
        )


class Div(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        gx = grad / self.y
        gy = -grad * self.x / (self.y * self.y)
        return unbroadcast(gx, self.x.shape), unbroadcast(gy, self.y.shape)


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class PowScalar(Function):
    def forward(self, x, exponent):
        self.x, self.exponent = x, exponent
        return x**exponent

    def backward(self, grad):
        p = self.exponent
        return (grad * p * self.x ** (p - 1),)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return (grad * (1 - self.out * self.out),)


class Sigmoid(Function):
    def forward(self, x):
        # tanh form is stable for large |x|
        self.out = 0.5 * (1 + np.tanh(0.5 * x))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1 - self.out),)


class Matmul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return np.matmul(x, y)

    def backward(self, grad):
        gx = np.matmul(grad, np.swapaxes(self.y, -1, -2))
        gy = np.matmul(np.swapaxes(self.x, -1, -2), grad)
        return unbroadcast(gx, self.x.shape), unbroadcast(gy, self.y.shape)


################################################################################
# Reductions
################################################################################


def _expand_reduced(grad, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(grad.reshape((1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        grad = np.expand_dims(grad, axes)
    return np.broadcast_to(grad, shape)


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.sum(x, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        return (_expand_reduced(grad, self.shape, self.axis, self.keepdims).copy(),)


class Mean(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        out = np.mean(x, axis=axis, keepdims=keepdims)
        self.count = x.size // max(out.size, 1)
        return out

    def backward(self, grad):
        expanded = _expand_reduced(grad, self.shape, self.axis, self.keepdims)
        return (expanded / self.count,)


class Max(Function):
    """
    Maximum along one axis. The gradient goes to the first maximal element
    in scan order.
    """

    def forward(self, x, axis, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        self.index = np.expand_dims(np.argmax(x, axis=axis), axis)
        out = np.take_along_axis(x, self.index, axis=axis)
        return out if keepdims else np.squeeze(out, axis=axis)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        gx = np.zeros(self.shape, dtype=grad.dtype)
        np.put_along_axis(gx, self.index, grad, axis=self.axis)
        return (gx,)


################################################################################
# Shape and indexing
################################################################################


class Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, x, axes=None):
        self.axes = axes if axes is not None else tuple(reversed(range(x.ndim)))
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, x, index):
        self.shape, self.index = x.shape, index
        return np.array(x[index])

    def backward(self, grad):
        gx = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(gx, self.index, grad)
        return (gx,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class GatherRows(Function):
    def forward(self, x, index):
        self.shape, self.index = x.shape, index
        self.missing = index < 0
        out = x[np.where(self.missing, 0, index)]
        if self.missing.any():
            out[self.missing] = 0
        return out

    def backward(self, grad):
        gx = np.zeros(self.shape, dtype=grad.dtype)
        present = ~self.missing
        # sequential accumulation keeps the reduction order fixed
        np.add.at(gx, self.index[present], grad[present])
        return (gx,)


class ScatterRows(Function):
    def forward(self, x, index, num_rows):
        self.index = index
        out = np.zeros((num_rows,) + x.shape[1:], dtype=x.dtype)
        out[index] = x
        return out

    def backward(self, grad):
        return (grad[self.index],)
