"""Dense tensors with reverse-mode automatic differentiation.

Operations run eagerly on numpy arrays. While a :class:`Tape` is active, every
operation that touches a tensor requiring gradients is appended to the tape in
execution order, which is already a topological order; :func:`backward` replays
it in reverse.
"""

from __future__ import annotations

import contextvars
import logging
from collections.abc import Iterator, Mapping, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any

import numpy as np

from rankseg.errors import NonFiniteError, PrecisionError, TapeError
from rankseg.kernels import KERNELS, OpKind, matmul_flops

logger = logging.getLogger(__name__)

PRECISIONS: dict[str, type[np.floating]] = {"float64": np.float64, "float32": np.float32}

_default_dtype: contextvars.ContextVar[type[np.floating]] = contextvars.ContextVar(
    "rankseg_default_dtype", default=np.float64
)
_active_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "rankseg_active_tape", default=None
)


def resolve_precision(name: str) -> type[np.floating]:
    try:
        return PRECISIONS[str(name).lower()]
    except KeyError as exc:
        raise PrecisionError(f"Unknown precision {name!r}; expected float64 or float32") from exc


def default_dtype() -> type[np.floating]:
    return _default_dtype.get()


@contextmanager
def precision(name: str) -> Iterator[type[np.floating]]:
    """Set the dtype of newly created tensors for the current context."""

    dtype = resolve_precision(name)
    token = _default_dtype.set(dtype)
    try:
        yield dtype
    finally:
        _default_dtype.reset(token)


class Tensor:
    """A dense real array that may carry a gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data: Any, requires_grad: bool = False, *, dtype: Any = None) -> None:
        self.data = np.array(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> Tensor:
        tensor = cls.__new__(cls)
        tensor.data = array
        tensor.requires_grad = requires_grad
        tensor.grad = None
        return tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype.name}{flag})"

    def __add__(self, other: Tensor | float) -> Tensor:
        return add(self, _as_tensor(other, self))

    def __radd__(self, other: float) -> Tensor:
        return add(_as_tensor(other, self), self)

    def __sub__(self, other: Tensor | float) -> Tensor:
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other: float) -> Tensor:
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    def __rmul__(self, other: float) -> Tensor:
        return scalar_mul(self, float(other))

    def __neg__(self) -> Tensor:
        return scalar_mul(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def _as_tensor(value: Tensor | float, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.dtype)


@dataclass(slots=True)
class TapeNode:
    kind: OpKind
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict[str, Any]
    saved: Any


class Tape:
    """Ordered record of differentiable operations for one execution context."""

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []
        self.consumed = False
        self.matmul_flops = 0
        self._produced: set[int] = set()
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> Tape:
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc_info: object) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: TapeNode) -> None:
        if self.consumed:
            raise TapeError("Cannot record on a tape that has already been consumed")
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def produced(self, tensor: Tensor) -> bool:
        return id(tensor) in self._produced


def active_tape() -> Tape | None:
    return _active_tape.get()


@contextmanager
def no_tape() -> Iterator[None]:
    """Run operations without recording them, even inside an active tape."""

    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


def forward(
    kind: OpKind | str, inputs: Sequence[Tensor], attrs: Mapping[str, Any] | None = None
) -> Tensor:
    """Evaluate one operation and record it on the active tape when needed."""

    kind = OpKind(kind)
    kernel = KERNELS[kind]
    if kernel.arity is not None and len(inputs) != kernel.arity:
        raise TapeError(f"{kind.value}: expected {kernel.arity} inputs, got {len(inputs)}")
    options = dict(attrs or {})
    arrays = [tensor.data for tensor in inputs]
    with np.errstate(all="ignore"):
        out, saved = kernel.forward(arrays, options)
    out = np.asarray(out)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{kind.value}: non-finite output")

    tape = _active_tape.get()
    if tape is not None and kind is OpKind.MATMUL:
        tape.matmul_flops += matmul_flops(arrays[0].shape, arrays[1].shape)
    tracked = tape is not None and any(tensor.requires_grad for tensor in inputs)
    result = Tensor._wrap(out, requires_grad=tracked)
    if tracked:
        tape.record(TapeNode(kind, tuple(inputs), result, options, saved))
    return result


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every leaf tensor reachable from ``loss``."""

    if tape.consumed:
        raise TapeError("Tape already consumed")
    if loss.data.size != 1:
        raise TapeError(f"Loss must be a scalar, got shape {list(loss.shape)}")
    if not tape.produced(loss):
        raise TapeError("Loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        upstream = grads.pop(id(node.output), None)
        if upstream is None:
            continue
        kernel = KERNELS[node.kind]
        arrays = [tensor.data for tensor in node.inputs]
        with np.errstate(all="ignore"):
            input_grads = kernel.backward(
                upstream, arrays, node.output.data, node.saved, node.attrs
            )
        for tensor, grad in zip(node.inputs, input_grads, strict=True):
            if grad is None or not tensor.requires_grad:
                continue
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError(f"{node.kind.value}: non-finite gradient")
            key = id(tensor)
            grads[key] = grads[key] + grad if key in grads else grad
            owners[key] = tensor

    for key, grad in grads.items():
        leaf = owners[key]
        if leaf is loss:
            continue
        grad = np.asarray(grad, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = grad.copy() if leaf.grad is None else leaf.grad + grad

    tape.consumed = True
    tape.nodes.clear()
    logger.debug("Backward pass populated %d leaf gradients", len(grads))


def add(a: Tensor, b: Tensor) -> Tensor:
    return forward(OpKind.ADD, [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return forward(OpKind.SUB, [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return forward(OpKind.ELEMENTWISE_MUL, [a, b])


def scalar_mul(x: Tensor, value: float) -> Tensor:
    return forward(OpKind.SCALAR_MUL, [x], {"value": value})


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return forward(OpKind.MATMUL, [a, b])


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    return forward(OpKind.TRANSPOSE, [x], {"axes": axes})


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return forward(OpKind.RESHAPE, [x], {"shape": tuple(shape)})


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return forward(OpKind.CONCAT, list(tensors), {"axis": axis})


def gather_rows(x: Tensor, indices: Sequence[int] | np.ndarray) -> Tensor:
    return forward(OpKind.GATHER_ROWS, [x], {"indices": np.asarray(indices, dtype=np.int64)})


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    return forward(OpKind.REDUCE_SUM, [x], {"axis": axis})


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    return forward(OpKind.REDUCE_MEAN, [x], {"axis": axis})


def sigmoid(x: Tensor) -> Tensor:
    return forward(OpKind.SIGMOID, [x])


def exp(x: Tensor) -> Tensor:
    return forward(OpKind.EXP, [x])


def log(x: Tensor) -> Tensor:
    return forward(OpKind.LOG, [x])


def softmax(x: Tensor) -> Tensor:
    return forward(OpKind.SOFTMAX_LAST_DIM, [x])


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float | None = None) -> Tensor:
    attrs = {} if eps is None else {"eps": eps}
    return forward(OpKind.LAYER_NORM_LAST_DIM, [x, gain, bias], attrs)


def gelu(x: Tensor) -> Tensor:
    return forward(OpKind.GELU, [x])


def l2_normalize(x: Tensor) -> Tensor:
    return forward(OpKind.L2_NORMALIZE_LAST_DIM, [x])


def add_row(x: Tensor, row: Tensor) -> Tensor:
    return forward(OpKind.ADD_ROW, [x, row])


def mul_row(x: Tensor, row: Tensor) -> Tensor:
    return forward(OpKind.MUL_ROW, [x, row])


def power(x: Tensor, exponent: float) -> Tensor:
    return forward(OpKind.POWER, [x], {"exponent": exponent})


def clamp(x: Tensor, low: float | None = None, high: float | None = None) -> Tensor:
    return forward(OpKind.CLAMP, [x], {"min": low, "max": high})


__all__ = [
    "OpKind",
    "PRECISIONS",
    "Tape",
    "TapeNode",
    "Tensor",
    "active_tape",
    "add",
    "add_row",
    "backward",
    "clamp",
    "concat",
    "default_dtype",
    "exp",
    "forward",
    "gather_rows",
    "gelu",
    "l2_normalize",
    "layer_norm",
    "log",
    "matmul",
    "mul",
    "mul_row",
    "no_tape",
    "power",
    "precision",
    "reduce_mean",
    "reduce_sum",
    "reshape",
    "resolve_precision",
    "scalar_mul",
    "sigmoid",
    "softmax",
    "sub",
    "transpose",
]
