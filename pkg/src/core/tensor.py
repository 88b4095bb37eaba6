"""Dense tensors over numpy with a tape for reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` of the
calling thread when at least one input requires a gradient. Outside a tape
nothing is recorded, so inference is tape-free and a model can be shared
read-only between threads.

Broadcasting is limited to scalar-with-tensor and a 1-d row vector over the
last axis of a tensor; every other shape mix raises :class:`DimensionError`.
"""
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from src.core.errors import ContractError, DimensionError

Number = Union[int, float]

_state = threading.local()


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    previous = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        self.data: np.ndarray = np.array(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.name = ""
        return out

    @property
    def shape(self) -> tuple[int, ...]:
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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


@dataclass
class TapeRecord:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of executed operations.

    Records are appended in forward execution order, which is a topological
    order of the graph. ``backward`` replays them in reverse, visiting each
    record once. With ``retain=False`` the tape is cleared after backward.
    """

    def __init__(self, retain: bool = False):
        self.records: list[TapeRecord] = []
        self.retain = retain

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1 or loss.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.records:
            raise ContractError("backward called on an empty tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced: set[int] = set()
        for record in reversed(self.records):
            produced.add(id(record.output))
            grad_out = grads.pop(id(record.output), None)
            if grad_out is None:
                continue
            input_grads = record.backward(grad_out)
            for tensor, grad_in in zip(record.inputs, input_grads):
                if grad_in is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad_in
                else:
                    grads[key] = grad_in

        leaves: dict[int, Tensor] = {}
        for record in self.records:
            for tensor in record.inputs:
                if tensor.requires_grad and id(tensor) not in produced:
                    leaves.setdefault(id(tensor), tensor)

        for key, tensor in leaves.items():
            if tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)
            grad = grads.get(key)
            if grad is not None:
                tensor.grad = tensor.grad + grad.astype(tensor.data.dtype, copy=False)

        if not self.retain:
            self.clear()


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    tape = tape if tape is not None else current_tape()
    if tape is None:
        raise ContractError("backward called without an active tape")
    tape.backward(loss)


def _result(
    op: str,
    data: np.ndarray,
    inputs: tuple[Tensor, ...],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    tape = current_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=needs_grad)
    if needs_grad:
        tape.records.append(TapeRecord(op, inputs, out, backward_fn))
    return out


def _lift(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else get_default_dtype()
    return Tensor._wrap(np.asarray(value, dtype=dtype))


def _broadcast_kind(a: tuple, b: tuple, op: str) -> None:
    if a == b or a == () or b == ():
        return
    if len(b) == 1 and len(a) >= 1 and a[-1] == b[0]:
        return
    if len(a) == 1 and len(b) >= 1 and b[-1] == a[0]:
        return
    raise DimensionError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum(), dtype=grad.dtype)
    return grad.reshape(-1, shape[0]).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_kind(a.shape, b.shape, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_kind(a.shape, b.shape, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_kind(a.shape, b.shape, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _broadcast_kind(a.shape, b.shape, "div")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result("div", out, (a, b), backward)


def scale(x: Tensor, factor: Number) -> Tensor:
    factor = x.dtype.type(factor)

    def backward(g):
        return (g * factor,)

    return _result("scale", x.data * factor, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim not in (2, 3) or a.ndim != b.ndim:
        raise DimensionError(f"matmul: unsupported shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result("matmul", a.data @ b.data, (a, b), backward)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result("transpose", np.transpose(x.data, axes), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape

    def backward(g):
        return (g.reshape(original),)

    return _result("reshape", x.data.reshape(tuple(shape)), (x,), backward)


def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    original = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, original).copy(),)

    return _result("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _result("exp", out, (x,), backward)


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    return _result("log", np.log(x.data), (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _result("sqrt", out, (x,), backward)


def absolute(x: Tensor) -> Tensor:
    def backward(g):
        return (g * np.sign(x.data),)

    return _result("abs", np.abs(x.data), (x,), backward)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def backward(g):
        return (g * positive,)

    return _result("relu", np.where(positive, x.data, x.dtype.type(0)), (x,), backward)


def _sigmoid(values: np.ndarray) -> np.ndarray:
    half = values.dtype.type(0.5)
    return half * (1 + np.tanh(half * values))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)

    def backward(g):
        return (g * out * (1 - out),)

    return _result("sigmoid", out, (x,), backward)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        return (g * (s + x.data * s * (1 - s)),)

    return _result("silu", x.data * s, (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1 + t)

    def backward(g):
        d_inner = _GELU_C * (1 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1 + t) + 0.5 * v * (1 - t**2) * d_inner),)

    return _result("gelu", out.astype(v.dtype, copy=False), (x,), backward)


def _softmax_np(values: np.ndarray, axis: int) -> np.ndarray:
    shifted = values - values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_np(values: np.ndarray, axis: int) -> np.ndarray:
    shifted = values - values.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _check_axis(x: Tensor, axis: int) -> None:
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"axis {axis} out of range for shape {x.shape}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_axis(x, axis)
    out = _softmax_np(x.data, axis)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result("softmax", out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_axis(x, axis)
    out = _log_softmax_np(x.data, axis)

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", out, (x,), backward)


def rms_norm(x: Tensor, gamma: Tensor, eps: float = 1e-6) -> Tensor:
    if gamma.ndim != 1 or gamma.shape[0] != x.shape[-1]:
        raise DimensionError(f"rms_norm: gamma shape {gamma.shape} does not match input shape {x.shape}")
    inv_rms = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    inv_rms = inv_rms.astype(x.dtype, copy=False)
    normed = x.data * inv_rms

    def backward(g):
        d_normed = g * gamma.data
        d_x = inv_rms * (d_normed - normed * (d_normed * normed).mean(axis=-1, keepdims=True))
        d_gamma = (g * normed).reshape(-1, gamma.shape[0]).sum(axis=0)
        return d_x, d_gamma

    return _result("rms_norm", normed * gamma.data, (x, gamma), backward)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    if mask.shape != x.shape:
        raise DimensionError(f"masked_fill: mask shape {mask.shape} does not match {x.shape}")

    def backward(g):
        return (np.where(mask, 0, g).astype(g.dtype, copy=False),)

    return _result("masked_fill", np.where(mask, x.dtype.type(value), x.data), (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _result("embedding", table.data[ids], (table,), backward)


def select(x: Tensor, index: int) -> Tensor:
    """Row ``index`` of the first axis."""

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[index] = g
        return (grad,)

    return _result("select", x.data[index], (x,), backward)


def pick(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather ``x[rows[i], cols[i]]`` into a vector."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, (rows, cols), g)
        return (grad,)

    return _result("pick", x.data[rows, cols], (x,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("stack needs at least one tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mixed shapes {sorted(shapes)}")

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result("stack", np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def repeat(x: Tensor, repeats: int, axis: int = 0) -> Tensor:
    """Repeat each slice along ``axis`` ``repeats`` times (interleaved)."""
    shape = x.shape

    def backward(g):
        split_shape = shape[:axis] + (shape[axis], repeats) + shape[axis + 1:]
        return (g.reshape(split_shape).sum(axis=axis + 1),)

    return _result("repeat", np.repeat(x.data, repeats, axis=axis), (x,), backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    if x.ndim != 1:
        raise DimensionError(f"l2_normalize expects a vector, got shape {x.shape}")
    return x / sqrt(sum(x * x) + eps)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=get_default_dtype()), requires_grad=requires_grad)


def ones(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=get_default_dtype()), requires_grad=requires_grad)
