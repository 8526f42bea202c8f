"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a tape node (op tag, input tensors,
saved forward values). ``backward`` walks the tape in reverse topological
order and dispatches to the rule registered in ``BACKWARD_RULES`` for each
op tag. Tensors have rank at most 3; the leading axis of a rank-3 tensor is
a batch axis.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

MAX_RANK = 3

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (inference only)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "inputs", "saved", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the maximum rank {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self.inputs: tuple[Tensor, ...] = ()
        self.saved: dict = {}
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, op: str, inputs: Sequence[Tensor], **saved) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        out.op = op
        out.inputs = tuple(inputs)
        out.saved = saved
    else:
        out.op = None
        out.inputs = ()
        out.saved = {}
    return out


# ---------------------------------------------------------------------------
# broadcasting


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    # Allowed: equal shapes, or one side broadcasts into the other without
    # the other side growing (scalar, trailing vector, column, batch-shared).
    try:
        out = np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a} and {b}") from None
    if out != a and out != b:
        raise ShapeError(f"{op}: shapes {a} and {b} would both need expanding")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# forward operations


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    return _record(a.data + b.data, "add", (a, b))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    return _record(a.data - b.data, "sub", (a, b))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    return _record(a.data * b.data, "mul", (a, b))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    out = a.data / b.data
    return _record(out, "div", (a, b), out=out)


def scale(a: Tensor, factor: float) -> Tensor:
    return _record(a.data * float(factor), "scale", (a,), factor=float(factor))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _record(np.where(mask, a.data, 0.0), "relu", (a,), mask=mask)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; a rank-2 right operand is shared across a batch."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    return _record(np.matmul(a.data, b.data), "matmul", (a, b))


def permute10(a: Tensor) -> Tensor:
    """Swap the last two axes (rows and columns of every matrix in a batch)."""
    if a.ndim < 2:
        raise ShapeError(f"permute10 needs rank >= 2, got shape {a.shape}")
    return _record(np.swapaxes(a.data, -1, -2).copy(), "permute10", (a,))


def softmax_rows(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return _record(out, "softmax_rows", (a,), out=out)


def rowwise_mean_std(a: Tensor, eps: float) -> tuple[Tensor, Tensor]:
    """Mean and eps-padded population std along the last axis.

    Both results drop the reduced axis: an ``m x n`` input gives two length-``m``
    tensors.
    """
    n = a.shape[-1]
    mean = a.data.mean(axis=-1)
    centered = a.data - mean[..., None]
    std = np.sqrt((centered * centered).sum(axis=-1) / n + eps)
    mean_t = _record(mean, "row_mean", (a,), n=n)
    std_t = _record(std, "row_std", (a,), centered=centered, std=std, n=n)
    return mean_t, std_t


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(tuple(shape))
    if out.ndim > MAX_RANK:
        raise ShapeError(f"reshape to rank {out.ndim} exceeds the maximum rank {MAX_RANK}")
    return _record(out, "reshape", (a,), shape=a.shape)


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis``, dropping that axis."""
    out = np.take(a.data, index, axis=axis)
    return _record(np.array(out), "take", (a,), index=index, axis=axis % a.ndim)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    return _record(a.data[..., start:stop].copy(), "slice_last", (a,), start=start, stop=stop)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    widths = [p.shape[-1] for p in parts]
    heads = {p.shape[:-1] for p in parts}
    if len(heads) != 1:
        raise ShapeError(f"concat_last: leading shapes differ: {sorted(heads)}")
    return _record(np.concatenate([p.data for p in parts], axis=-1), "concat_last", tuple(parts), widths=widths)


def tensor_sum(a: Tensor) -> Tensor:
    return _record(np.array(a.data.sum()), "sum", (a,))


def tensor_mean(a: Tensor) -> Tensor:
    return _record(np.array(a.data.mean()), "mean", (a,))


# ---------------------------------------------------------------------------
# backward rules: rule(grad_out, node) -> one gradient (or None) per input


def _add_back(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_back(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_back(g, node):
    a, b = node.inputs
    ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
    gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
    return ga, gb


def _div_back(g, node):
    a, b = node.inputs
    ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
    gb = _unbroadcast(-g * node.saved["out"] / b.data, b.shape) if b.requires_grad else None
    return ga, gb


def _scale_back(g, node):
    return (g * node.saved["factor"],)


def _relu_back(g, node):
    return (np.where(node.saved["mask"], g, 0.0),)


def _matmul_back(g, node):
    a, b = node.inputs
    ga = gb = None
    if a.requires_grad:
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
    if b.requires_grad:
        if a.ndim == 3 and b.ndim == 2:
            # shared weight: fold the batch into the row axis instead of summing B products
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
    return ga, gb


def _permute10_back(g, node):
    return (np.swapaxes(g, -1, -2),)


def _softmax_back(g, node):
    y = node.saved["out"]
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _row_mean_back(g, node):
    n = node.saved["n"]
    return (np.repeat(g[..., None] / n, n, axis=-1),)


def _row_std_back(g, node):
    s = node.saved
    return ((g / (s["n"] * s["std"]))[..., None] * s["centered"],)


def _reshape_back(g, node):
    return (g.reshape(node.saved["shape"]),)


def _take_back(g, node):
    (a,) = node.inputs
    full = np.zeros(a.shape)
    idx = [slice(None)] * a.ndim
    idx[node.saved["axis"]] = node.saved["index"]
    full[tuple(idx)] = g
    return (full,)


def _slice_last_back(g, node):
    (a,) = node.inputs
    full = np.zeros(a.shape)
    full[..., node.saved["start"]:node.saved["stop"]] = g
    return (full,)


def _concat_back(g, node):
    bounds = np.cumsum([0] + node.saved["widths"])
    return tuple(g[..., lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))


def _sum_back(g, node):
    (a,) = node.inputs
    return (np.full(a.shape, float(g)),)


def _mean_back(g, node):
    (a,) = node.inputs
    return (np.full(a.shape, float(g) / a.size),)


BACKWARD_RULES: dict[str, Callable] = {
    "add": _add_back,
    "sub": _sub_back,
    "mul": _mul_back,
    "div": _div_back,
    "scale": _scale_back,
    "relu": _relu_back,
    "matmul": _matmul_back,
    "permute10": _permute10_back,
    "softmax_rows": _softmax_back,
    "row_mean": _row_mean_back,
    "row_std": _row_std_back,
    "reshape": _reshape_back,
    "take": _take_back,
    "slice_last": _slice_last_back,
    "concat_last": _concat_back,
    "sum": _sum_back,
    "mean": _mean_back,
}


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every reachable tensor that requires grad."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    pending = {id(loss): np.ones(loss.shape)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        # rules may hand back aliased arrays; grads are never mutated in place
        node.grad = g if node.grad is None else node.grad + g
        if node.op is None:
            continue
        grads = BACKWARD_RULES[node.op](g, node)
        for parent, pg in zip(node.inputs, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
