"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records a :class:`Node` holding its parents and
a closure mapping the output gradient to parent gradients. Nodes carry a
monotonically increasing sequence number, so creation order is already a
topological order of the graph and :meth:`Tensor.backward` simply walks the
reachable nodes in reverse sequence order.

Storage is float32 by default. Inside :func:`shadow_precision` new tensors are
created as float64, which is what the finite-difference tests use.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "shadow_precision",
    "default_dtype",
    "topological_nodes",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "reshape",
    "transpose",
    "concat",
    "sum",
    "mean",
    "softmax",
    "log_softmax",
    "norm_along",
    "mse",
]


class NonFiniteError(FloatingPointError):
    """Raised as soon as an operation produces NaN or Inf."""

    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by op '{op}'")
        self.op = op


_local = threading.local()
_seq = itertools.count()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextlib.contextmanager
def shadow_precision():
    """Create new tensors in float64 while the context is active."""
    prev = default_dtype()
    _local.dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _local.dtype = prev


class Node:
    __slots__ = ("op", "parents", "backward", "seq")

    def __init__(self, op: str, parents: Sequence["Tensor"], backward: Callable, seq: int):
        self.op = op
        self.parents = tuple(parents)
        self.backward = backward
        self.seq = seq

    def __repr__(self) -> str:
        return f"Node({self.op!r}, seq={self.seq})"


class Tensor:
    """n-dimensional array with optional gradient tracking."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dtype = default_dtype() if dtype is None else dtype
        self.data = np.array(data, dtype=dtype, copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        return t

    # -- basic properties -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autograd ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every ``requires_grad`` leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")

        grads = {id(self): grad}
        for node, out in topological_nodes(self)[::-1]:
            g = grads.pop(id(out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._node is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
        if self._node is None:
            self.grad = grad.copy() if self.grad is None else self.grad + grad

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def topological_nodes(root: Tensor) -> list:
    """Return ``(node, output_tensor)`` pairs reachable from ``root``, inputs first."""
    seen = set()
    found = []
    stack = [root]
    while stack:
        t = stack.pop()
        if t._node is None or id(t) in seen:
            continue
        seen.add(id(t))
        found.append((t._node, t))
        stack.extend(t._node.parents)
    found.sort(key=lambda pair: pair[0].seq)
    return found


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=dtype if dtype is not None else default_dtype()))


def _pair(a, b) -> tuple:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a.dtype)
    b = _as_tensor(b)
    return _as_tensor(a, b.dtype), b


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(op)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    parents = tuple(parents)
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, requires_grad=track)
    if track:
        out._node = Node(op, parents, backward, next(_seq))
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


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * a.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out > 0, g / (2 * out), 0).astype(out.dtype),)

    return _result(out, (a,), backward, "sqrt")


# -- shape manipulation ----------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and int(np.prod(shape)) != a.size:
        raise ValueError(f"cannot reshape {a.shape} ({a.size} elements) to {shape}")
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if not axes else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ValueError(f"concat mismatch along axis {axis}: {ref} vs {t.shape}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


# -- reductions ------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        return (_expand_reduced(g, shape, axis, keepdims).copy(),)

    return _result(
        np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum"
    )


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    count = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def backward(g):
        return (_expand_reduced(g / count, shape, axis, keepdims).copy(),)

    return _result(
        np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), backward, "mean"
    )


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


def norm_along(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the zero vector gets a zero subgradient."""
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1)
        return (np.where(n > 0, g * a.data / safe, 0).astype(a.dtype, copy=False),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _result(out, (a,), backward, "norm_along")


def mse(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    k = 2.0 / diff.size

    def backward(g):
        return g * k * diff, -g * k * diff

    return _result(np.asarray((diff * diff).mean()), (a, b), backward, "mse")
