"""Forward and backward rules for every operation kind the tape can record.

Each kernel works on plain numpy arrays. ``forward`` returns the output array
plus whatever it wants to keep for the backward pass; ``backward`` receives the
upstream gradient and returns one gradient per input (``None`` for inputs that
have no derivative, such as index lists carried in attributes).
"""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np

from rankseg.errors import DegenerateEmbeddingError, ShapeError

L2_NORM_FLOOR = 1e-12
LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


class OpKind(str, Enum):
    ADD = "add"
    SUB = "sub"
    ELEMENTWISE_MUL = "elementwise_mul"
    SCALAR_MUL = "scalar_mul"
    MATMUL = "matmul"
    TRANSPOSE = "transpose"
    RESHAPE = "reshape"
    CONCAT = "concat"
    GATHER_ROWS = "gather_rows"
    REDUCE_SUM = "reduce_sum"
    REDUCE_MEAN = "reduce_mean"
    SIGMOID = "sigmoid"
    EXP = "exp"
    LOG = "log"
    SOFTMAX_LAST_DIM = "softmax_last_dim"
    LAYER_NORM_LAST_DIM = "layer_norm_last_dim"
    GELU = "gelu"
    L2_NORMALIZE_LAST_DIM = "l2_normalize_last_dim"
    ADD_ROW = "add_row"
    MUL_ROW = "mul_row"
    POWER = "power"
    CLAMP = "clamp"


Arrays = Sequence[np.ndarray]
Attrs = Mapping[str, Any]
ForwardFn = Callable[[Arrays, Attrs], tuple[np.ndarray, Any]]
BackwardFn = Callable[[np.ndarray, Arrays, np.ndarray, Any, Attrs], list[np.ndarray | None]]


@dataclass(frozen=True, slots=True)
class Kernel:
    kind: OpKind
    arity: int | None
    forward: ForwardFn
    backward: BackwardFn


KERNELS: dict[OpKind, Kernel] = {}


def _register(kind: OpKind, arity: int | None) -> Callable[[type], type]:
    def decorator(cls: type) -> type:
        KERNELS[kind] = Kernel(kind=kind, arity=arity, forward=cls.forward, backward=cls.backward)
        return cls

    return decorator


def _mismatch(kind: OpKind, a: np.ndarray, b: np.ndarray) -> ShapeError:
    return ShapeError(f"{kind.value}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def _check_elementwise(kind: OpKind, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise _mismatch(kind, a, b)


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Collapse a gradient back onto a 0-d operand that was used as a scalar."""

    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)


def _row_operand(kind: OpKind, x: np.ndarray, row: np.ndarray) -> None:
    if x.ndim < 1 or row.shape != (x.shape[-1],):
        raise _mismatch(kind, x, row)


def _axis_of(x: np.ndarray, attrs: Attrs, kind: OpKind) -> int | None:
    axis = attrs.get("axis")
    if axis is None:
        return None
    axis = int(axis)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{kind.value}: axis {axis} out of range for shape {list(x.shape)}")
    return axis % x.ndim


@_register(OpKind.ADD, 2)
class _Add:
    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        a, b = arrays
        _check_elementwise(OpKind.ADD, a, b)
        return a + b, None

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        a, b = arrays
        return [_reduce_to(grad, a.shape), _reduce_to(grad, b.shape)]


@_register(OpKind.SUB, 2)
class _Sub:
    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        a, b = arrays
        _check_elementwise(OpKind.SUB, a, b)
        return a - b, None

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        a, b = arrays
        return [_reduce_to(grad, a.shape), _reduce_to(-grad, b.shape)]


@_register(OpKind.ELEMENTWISE_MUL, 2)
class _Mul:
    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        a, b = arrays
        _check_elementwise(OpKind.ELEMENTWISE_MUL, a, b)
        return a * b, None

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        a, b = arrays
        return [_reduce_to(grad * b, a.shape), _reduce_to(grad * a, b.shape)]


@_register(OpKind.SCALAR_MUL, 1)
class _ScalarMul:
    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        if "value" not in attrs:
            raise ShapeError("scalar_mul: missing 'value' attribute")
        (x,) = arrays
        return x * x.dtype.type(attrs["value"]), None

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        return [grad * grad.dtype.type(attrs["value"])]


@_register(OpKind.MATMUL, 2)
class _Matmul:
    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        a, b = arrays
        if a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0]:
            return a @ b, None
        if a.ndim == 3 and b.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1]:
            return np.matmul(a, b), None
        raise _mismatch(OpKind.MATMUL, a, b)

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        a, b = arrays
        return [np.matmul(grad, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), grad)]


def matmul_flops(a_shape: tuple[int, ...], b_shape: tuple[int, ...]) -> int:
    batch = a_shape[0] if len(a_shape) == 3 else 1
    return 2 * batch * a_shape[-2] * a_shape[-1] * b_shape[-1]


@_register(OpKind.TRANSPOSE, 1)
class _Transpose:
    @staticmethod
    def _axes(x: np.ndarray, attrs: Attrs) -> tuple[int, ...]:
        axes = attrs.get("axes")
        if axes is None:
            return tuple(reversed(range(x.ndim)))
        axes = tuple(int(axis) for axis in axes)
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError(f"transpose: axes {list(axes)} invalid for shape {list(x.shape)}")
        return axes

    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        (x,) = arrays
        axes = _Transpose._axes(x, attrs)
        return np.ascontiguousarray(np.transpose(x, axes)), axes

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        return [np.ascontiguousarray(np.transpose(grad, np.argsort(saved)))]


@_register(OpKind.RESHAPE, 1)
class _Reshape:
    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        (x,) = arrays
        shape = tuple(int(extent) for extent in attrs.get("shape", ()))
        if math.prod(shape) != x.size or any(extent <= 0 for extent in shape):
            raise ShapeError(f"reshape: cannot view shape {list(x.shape)} as {list(shape)}")
        return x.reshape(shape), None

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        return [grad.reshape(arrays[0].shape)]


@_register(OpKind.CONCAT, None)
class _Concat:
    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        if not arrays:
            raise ShapeError("concat: no inputs")
        axis = int(attrs.get("axis", 0))
        first = arrays[0]
        if not -first.ndim <= axis < first.ndim:
            raise ShapeError(f"concat: axis {axis} out of range for shape {list(first.shape)}")
        axis %= first.ndim
        for other in arrays[1:]:
            if other.ndim != first.ndim or any(
                other.shape[dim] != first.shape[dim] for dim in range(first.ndim) if dim != axis
            ):
                raise _mismatch(OpKind.CONCAT, first, other)
        return np.concatenate(arrays, axis=axis), axis

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        sizes = np.cumsum([array.shape[saved] for array in arrays])[:-1]
        return list(np.split(grad, sizes, axis=saved))


@_register(OpKind.GATHER_ROWS, 1)
class _GatherRows:
    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        (x,) = arrays
        indices = np.asarray(attrs.get("indices", ()), dtype=np.int64)
        if x.ndim < 1 or indices.ndim != 1:
            raise ShapeError(f"gather_rows: needs 1-d indices over shape {list(x.shape)}")
        if indices.size and (indices.min() < 0 or indices.max() >= x.shape[0]):
            raise ShapeError(f"gather_rows: index out of range for {x.shape[0]} rows")
        return x[indices], indices

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        result = np.zeros_like(arrays[0])
        np.add.at(result, saved, grad)
        return [result]


@_register(OpKind.REDUCE_SUM, 1)
class _ReduceSum:
    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        (x,) = arrays
        axis = _axis_of(x, attrs, OpKind.REDUCE_SUM)
        return np.asarray(np.sum(x, axis=axis), dtype=x.dtype), axis

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        (x,) = arrays
        expanded = grad if saved is None else np.expand_dims(grad, saved)
        return [np.broadcast_to(expanded, x.shape).copy()]


@_register(OpKind.REDUCE_MEAN, 1)
class _ReduceMean:
    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        (x,) = arrays
        axis = _axis_of(x, attrs, OpKind.REDUCE_MEAN)
        count = x.size if axis is None else x.shape[axis]
        if count == 0:
            raise ShapeError(f"reduce_mean: empty reduction over shape {list(x.shape)}")
        return np.asarray(np.mean(x, axis=axis), dtype=x.dtype), (axis, count)

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        (x,) = arrays
        axis, count = saved
        expanded = grad if axis is None else np.expand_dims(grad, axis)
        return [np.broadcast_to(expanded / x.dtype.type(count), x.shape).copy()]


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    exp_x = np.exp(x[~positive])
    out[~positive] = exp_x / (1.0 + exp_x)
    return out


@_register(OpKind.SIGMOID, 1)
class _Sigmoid:
    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        return stable_sigmoid(arrays[0]), None

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        return [grad * out * (1.0 - out)]


@_register(OpKind.EXP, 1)
class _Exp:
    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        return np.exp(arrays[0]), None

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        return [grad * out]


@_register(OpKind.LOG, 1)
class _Log:
    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        return np.log(arrays[0]), None

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        return [grad / arrays[0]]


def stable_softmax(x: np.ndarray) -> np.ndarray:
    shifted = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return shifted / np.sum(shifted, axis=-1, keepdims=True)


@_register(OpKind.SOFTMAX_LAST_DIM, 1)
class _Softmax:
    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        (x,) = arrays
        if x.ndim < 1 or x.shape[-1] == 0:
            raise ShapeError(f"softmax_last_dim: empty last axis in shape {list(x.shape)}")
        return stable_softmax(x), None

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        return [out * (grad - np.sum(grad * out, axis=-1, keepdims=True))]


@_register(OpKind.LAYER_NORM_LAST_DIM, 3)
class _LayerNorm:
    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        x, gain, bias = arrays
        _row_operand(OpKind.LAYER_NORM_LAST_DIM, x, gain)
        _row_operand(OpKind.LAYER_NORM_LAST_DIM, x, bias)
        eps = x.dtype.type(attrs.get("eps", LAYER_NORM_EPS))
        centred = x - np.mean(x, axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(np.mean(centred * centred, axis=-1, keepdims=True) + eps)
        normed = centred * inv_std
        return normed * gain + bias, (normed, inv_std)

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        x, gain, _ = arrays
        normed, inv_std = saved
        lead = tuple(range(x.ndim - 1))
        grad_normed = grad * gain
        grad_x = inv_std * (
            grad_normed
            - np.mean(grad_normed, axis=-1, keepdims=True)
            - normed * np.mean(grad_normed * normed, axis=-1, keepdims=True)
        )
        return [grad_x, np.sum(grad * normed, axis=lead), np.sum(grad, axis=lead)]


@_register(OpKind.GELU, 1)
class _Gelu:
    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        (x,) = arrays
        tanh_u = np.tanh(_GELU_C * (x + _GELU_K * x**3))
        return 0.5 * x * (1.0 + tanh_u), tanh_u

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        (x,) = arrays
        tanh_u = saved
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * x**2)
        return [grad * (0.5 * (1.0 + tanh_u) + 0.5 * x * (1.0 - tanh_u**2) * du)]


@_register(OpKind.L2_NORMALIZE_LAST_DIM, 1)
class _L2Normalize:
    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        (x,) = arrays
        if x.ndim < 1:
            raise ShapeError("l2_normalize_last_dim: needs at least one axis")
        norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
        if np.any(norm < L2_NORM_FLOOR):
            raise DegenerateEmbeddingError(
                f"l2_normalize_last_dim: row norm below {L2_NORM_FLOOR:g}"
            )
        return x / norm, norm

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        return [(grad - out * np.sum(grad * out, axis=-1, keepdims=True)) / saved]


@_register(OpKind.ADD_ROW, 2)
class _AddRow:
    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        x, row = arrays
        _row_operand(OpKind.ADD_ROW, x, row)
        return x + row, None

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        row = arrays[1]
        return [grad, grad.reshape(-1, row.shape[0]).sum(axis=0)]


@_register(OpKind.MUL_ROW, 2)
class _MulRow:
    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        x, row = arrays
        _row_operand(OpKind.MUL_ROW, x, row)
        return x * row, None

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        x, row = arrays
        return [grad * row, (grad * x).reshape(-1, row.shape[0]).sum(axis=0)]


@_register(OpKind.POWER, 1)
class _Power:
    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        if "exponent" not in attrs:
            raise ShapeError("power: missing 'exponent' attribute")
        (x,) = arrays
        return np.power(x, x.dtype.type(attrs["exponent"])), None

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        (x,) = arrays
        exponent = x.dtype.type(attrs["exponent"])
        if exponent == 0:
            return [np.zeros_like(x)]
        return [grad * exponent * np.power(x, exponent - 1)]


@_register(OpKind.CLAMP, 1)
class _Clamp:
    @staticmethod
    def forward(arrays: Arrays, attrs: Attrs) -> tuple[np.ndarray, Any]:
        (x,) = arrays
        low, high = attrs.get("min"), attrs.get("max")
        if low is None and high is None:
            raise ShapeError("clamp: needs a 'min' or 'max' attribute")
        inside = np.ones(x.shape, dtype=bool)
        if low is not None:
            inside &= x > low
        if high is not None:
            inside &= x < high
        return np.clip(x, low, high).astype(x.dtype, copy=False), inside

    @staticmethod
    def backward(grad, arrays, out, saved, attrs):
        return [grad * saved]


__all__ = ["KERNELS", "Kernel", "OpKind", "matmul_flops", "stable_sigmoid", "stable_softmax"]
