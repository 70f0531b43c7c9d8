"""Dense float64 tensors with tape-based reverse-mode gradients.

Operations executed inside an active :class:`Graph` whose inputs require a
gradient are recorded on the tape; ``Graph.backward`` then replays the tape
once, in exact reverse order. Outside a graph the same functions are plain
numpy computations, which is what inference uses.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "GraphError",
    "NonFiniteError",
    "Tensor",
    "Graph",
    "active_graph",
    "tensor",
    "custom_op",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "relu",
    "softmax",
    "log_softmax",
    "log_sum_exp",
    "embedding",
    "concat",
    "split",
    "reshape",
    "transpose",
    "sum",
    "mean",
]


class DimensionError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Row-major float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}{tag}, requires_grad={self.requires_grad})"

    # operator sugar, mostly for tests and small expressions
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward", "op")

    def __init__(self, out, inputs, backward, op):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.op = op


_local = threading.local()


def active_graph() -> Graph | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Graph:
    """Tape of operations for one forward pass.

    Graphs are thread-confined: the active graph is tracked per thread, so
    separate threads may run independent passes concurrently.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False
        self._next_id = 0
        self.trace: list[str] | None = None

    def __enter__(self) -> Graph:
        if self._consumed:
            raise GraphError("graph already consumed by backward; start a new forward pass")
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def _record(self, out: Tensor, inputs: Sequence[Tensor], backward, op: str) -> None:
        if self._consumed:
            raise GraphError("cannot record on a consumed graph")
        out.node_id = self._next_id
        self._next_id += 1
        self.nodes.append(_Node(out, tuple(inputs), backward, op))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if self._consumed:
            raise GraphError("backward called twice on the same graph")
        self._consumed = True
        if grad is None:
            if loss.data.size != 1:
                raise DimensionError(f"backward needs a scalar loss or explicit grad, got shape {list(loss.shape)}")
            grad = np.ones_like(loss.data)
        loss.grad = np.asarray(grad, dtype=np.float64) if loss.grad is None else loss.grad + grad
        for node in reversed(self.nodes):
            if self.trace is not None:
                self.trace.append(node.op)
            g = node.out.grad
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                inp.grad = ig if inp.grad is None else inp.grad + ig
        self.nodes = []


def _finish(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.isfinite(out_data).all() and all(np.isfinite(t.data).all() for t in inputs):
        raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        g = active_graph()
        if g is not None:
            g._record(out, inputs, backward, op)
    return out


def custom_op(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str = "custom") -> Tensor:
    """Record an op whose backward maps the output grad to one grad per input."""
    return _finish(np.asarray(out_data, dtype=np.float64), inputs, backward, op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _finish(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _finish(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _finish(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul"
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _finish(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    A 2-D right operand is shared across all leading axes of ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return _finish(ad @ bd, (a, b), backward, "matmul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _finish(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    if x.shape[dim] == 0:
        raise DimensionError("softmax over an empty dimension")
    y = _softmax_np(x.data, dim)

    def backward(g):
        return (y * (g - (g * y).sum(axis=dim, keepdims=True)),)

    return _finish(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, dim: int = -1) -> Tensor:
    if x.shape[dim] == 0:
        raise DimensionError("log_softmax over an empty dimension")
    m = x.data.max(axis=dim, keepdims=True)
    shifted = x.data - m
    out = shifted - np.log(np.exp(shifted).sum(axis=dim, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=dim, keepdims=True),)

    return _finish(out, (x,), backward, "log_softmax")


def _lse_np(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def log_sum_exp(x: Tensor, dim: int = -1) -> Tensor:
    """log(sum(exp(x))) along ``dim``; ``-inf`` entries contribute nothing."""
    if x.shape[dim] == 0:
        raise DimensionError("log_sum_exp over an empty dimension")
    out = _lse_np(x.data, dim)

    keep = list(x.shape)
    keep[dim] = 1

    def backward(g):
        with np.errstate(invalid="ignore"):
            w = np.exp(x.data - np.reshape(out, keep))
        w = np.nan_to_num(w)
        return (w * np.reshape(g, keep),)

    return _finish(out, (x,), backward, "log_sum_exp")


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table``."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding ids out of range [0, {table.shape[0]})")
    rows = table.shape[0]

    def backward(g):
        gt = np.zeros((rows,) + g.shape[idx.ndim:], dtype=np.float64)
        np.add.at(gt, idx, g)
        return (gt,)

    return _finish(table.data[idx], (table,), backward, "embedding")


def concat(parts: Sequence[Tensor], dim: int = 0) -> Tensor:
    if not parts:
        raise DimensionError("concat of an empty list")
    sizes = [p.shape[dim] for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=dim)
    except ValueError as e:
        raise DimensionError(f"concat: {[list(p.shape) for p in parts]} along dim {dim}: {e}") from None
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=dim))

    return _finish(data, tuple(parts), backward, "concat")


def split(x: Tensor, sizes: Sequence[int], dim: int = 0) -> list[Tensor]:
    if int(np.sum(sizes)) != x.shape[dim]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover extent {x.shape[dim]}")
    outs = []
    start = 0
    for n in sizes:
        sl = [slice(None)] * x.ndim
        sl[dim] = slice(start, start + n)
        sl = tuple(sl)

        def backward(g, sl=sl):
            full = np.zeros_like(x.data)
            full[sl] = g
            return (full,)

        outs.append(_finish(x.data[sl], (x,), backward, "split"))
        start += n
    return outs


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {list(old)} to {list(shape)}") from None
    return _finish(data, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _finish(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def sum(x: Tensor, dim: int | None = None) -> Tensor:  # noqa: A001
    shape = x.shape
    if dim is None:
        return _finish(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    return _finish(
        x.data.sum(axis=dim),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, dim), shape).copy(),),
        "sum",
    )


def mean(x: Tensor, dim: int | None = None) -> Tensor:
    n = x.data.size if dim is None else x.shape[dim]
    return scale(sum(x, dim), 1.0 / n)
