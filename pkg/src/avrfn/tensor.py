"""Dense double-precision tensors with define-by-run reverse-mode autodiff.

Feature maps use the axis order ``(batch, height, width, channels)``.  Matrices
(covariances, Newton-Schulz iterates) are plain 2-D or batched 3-D tensors.

Every operation that produces a tensor from inputs requiring gradients records
its parents and a backward rule on the output.  ``backward`` topologically sorts
the recorded graph from the loss and replays the rules in reverse order.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Skip graph recording in the current thread (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array plus gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64, copy=True, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        data = np.asarray(data, dtype=np.float64)
        if not np.isfinite(data).all():
            raise FloatingPointError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out.data = data if data.flags.c_contiguous else data.copy(order="C")
        out.grad = None
        out.name = None
        out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        out._op = op
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", as_tensor(other), self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", as_tensor(other), self)

    def __neg__(self):
        return elementwise("mul", self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def mT(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axes, keepdims)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------------


def elementwise(op_tag: str, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Apply ``add``, ``sub``, ``mul`` or ``div`` with numpy broadcasting.

    The network itself only broadcasts scalars, per-channel vectors and
    per-sample channel vectors of shape ``(n, 1, 1, c)``; general broadcasting
    comes for free and the gradient is summed back to each operand's shape.
    """
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch for {op_tag}: {a.shape} vs {b.shape}") from None
    ad, bd = a.data, b.data

    if op_tag == "add":
        data = ad + bd

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    elif op_tag == "sub":
        data = ad - bd

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    elif op_tag == "mul":
        data = ad * bd

        def bw(g):
            ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
            gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
            return ga, gb

    elif op_tag == "div":
        if np.any(bd == 0):
            raise ZeroDivisionError("elementwise division by zero")
        data = ad / bd

        def bw(g):
            ga = _unbroadcast(g / bd, a.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * ad / (bd * bd), b.shape) if b.requires_grad else None
            return ga, gb

    else:
        raise ValueError(f"unknown elementwise op {op_tag!r}")

    assert data.shape == out_shape
    return Tensor._from_op(data, (a, b), bw, op_tag)


def power(x: Tensor, exponent: float) -> Tensor:
    xd = x.data
    if float(exponent) != int(exponent) and np.any(xd < 0):
        raise ValueError("fractional power of a negative value")
    if exponent < 0 and np.any(xd == 0):
        raise ZeroDivisionError("negative power of zero")
    data = xd ** exponent

    def bw(g):
        return (g * exponent * xd ** (exponent - 1),)

    return Tensor._from_op(data, (x,), bw, "pow")


def sqrt(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd < 0):
        raise ValueError("sqrt of negative value")
    data = np.sqrt(xd)

    def bw(g):
        return (g * 0.5 / data,)

    return Tensor._from_op(data, (x,), bw, "sqrt")


# -- matrix ops -----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors, or batched over a leading axis.

    Backward: ``dA = dC @ B^T`` and ``dB = A^T @ dC``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    data = ad @ bd

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(data, (a, b), bw, "matmul")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""

    def bw(g):
        return (np.swapaxes(g, -1, -2),)

    return Tensor._from_op(np.swapaxes(x.data, -1, -2), (x,), bw, "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    data = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(src),)

    return Tensor._from_op(data, (x,), bw, "reshape")


def eye(n: int, batch: Optional[int] = None) -> Tensor:
    e = np.eye(n)
    if batch is not None:
        e = np.broadcast_to(e, (batch, n, n))
    return Tensor(e)


def matrix_view(x: Tensor, rows: int, cols: int) -> Tensor:
    """Reinterpret a tensor as a ``rows x cols`` matrix (no copy of semantics)."""
    if rows * cols != x.size:
        raise ValueError(f"cannot view {x.size} elements as {rows}x{cols}")
    return reshape(x, (rows, cols))


# -- reductions -----------------------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"invalid axis {ax} for {ndim}-D tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(op_tag: str, x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """``sum``/``mean`` over ``axes``, or ``trace`` over the last two axes."""
    x = as_tensor(x)
    if op_tag == "trace":
        if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
            raise ValueError(f"trace needs square matrices, got {x.shape}")
        n = x.shape[-1]
        data = np.trace(x.data, axis1=-2, axis2=-1)

        def bw(g):
            return (np.asarray(g)[..., None, None] * np.eye(n),)

        return Tensor._from_op(data, (x,), bw, "trace")

    ax = _norm_axes(axes, x.ndim)
    src = x.shape
    if op_tag == "sum":
        data = x.data.sum(axis=ax, keepdims=keepdims)
        scale = 1.0
    elif op_tag == "mean":
        data = x.data.mean(axis=ax, keepdims=keepdims)
        count = int(np.prod([src[a] for a in ax])) if ax else 1
        scale = 1.0 / count
    else:
        raise ValueError(f"unknown reduction {op_tag!r}")

    def bw(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g * scale, src).copy(),)

    return Tensor._from_op(data, (x,), bw, op_tag)


def trace(x: Tensor) -> Tensor:
    return reduce("trace", x)


# -- channel concat / split -----------------------------------------------------


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    if len(parts) == 1:
        return parts[0]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ValueError(f"spatial mismatch in concat: {parts[0].shape} vs {p.shape}")
    widths = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0] + widths)
    data = np.concatenate([p.data for p in parts], axis=-1)

    def bw(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return Tensor._from_op(data, parts, bw, "concat")


def split_channels(x: Tensor, widths: Sequence[int]) -> list:
    if sum(widths) != x.shape[-1]:
        raise ValueError(f"widths {list(widths)} do not sum to {x.shape[-1]} channels")
    out = []
    start = 0
    for w in widths:
        out.append(channel_slice(x, start, start + w))
        start += w
    return out


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    src = x.shape

    def bw(g):
        full = np.zeros(src)
        full[..., start:stop] = g
        return (full,)

    return Tensor._from_op(x.data[..., start:stop], (x,), bw, "slice")


# -- activations ------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), bw, "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        return (g * s * (1.0 - s),)

    return Tensor._from_op(s, (x,), bw, "sigmoid")


# -- backward -----------------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    ``loss`` must be a scalar unless an explicit output gradient is given.
    Leaf gradients accumulate across calls; reset them with ``zero_grad``.
    Leaves not connected to ``loss`` are left untouched.
    """
    if grad is None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != loss.shape:
            raise ValueError("output gradient shape mismatch")
    if not loss.requires_grad:
        return

    order = _topo_order(loss)
    grads = {id(loss): grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
