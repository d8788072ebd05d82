"""Dense float64 arrays with a tape-style reverse-mode gradient recorder.

Arrays are plain ``numpy.ndarray`` objects in float64.  A :class:`Tensor`
wraps one array together with the rule that propagates gradients back to the
tensors it was computed from.  The graph is rebuilt on every forward pass, so
variable-length sequences need no special handling.

Example::

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> loss = (w @ w).sum()
    >>> grads = backward(loss)
    >>> grads[w]
    array([[4., 4.],
           [4., 4.]])
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference passes)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


class Tensor:
    """A node of the computation graph.

    ``parents`` are the input tensors and ``backward_fn`` maps the upstream
    gradient to one gradient per parent (``None`` where no gradient flows).
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = tensor(a)
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a) -> Tensor:
    a = tensor(a)
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


_ELEMENTWISE = {"add": add, "mul": mul, "sub": sub, "sigmoid": sigmoid, "tanh": tanh}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch by name: ``elementwise("sigmoid", x)``, ``elementwise("mul", a, b)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "mul", "sub"):
        a, b = operands
        a, b = tensor(a), tensor(b)
        if a.shape != b.shape:
            raise ShapeError(f"{op}: operand shapes differ {a.shape} vs {b.shape}")
        return fn(a, b)
    (a,) = operands
    return fn(a)


# ------------------------------------------------------------------- linear


def _matmul_backward(a: Tensor, b: Tensor):
    def backward(g):
        if b.ndim == 1:
            ga = np.multiply.outer(g, b.data)
            gb = np.tensordot(a.data, g, axes=(tuple(range(a.ndim - 1)), tuple(range(g.ndim))))
        else:
            ga = g @ b.data.T
            if a.ndim == 1:
                gb = np.outer(a.data, g)
            else:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return backward


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape ``(..., k)`` and ``b`` of shape ``(k,)`` or ``(k, n)``."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 1 or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), _matmul_backward(a, b))


def ordered_matmul(a, b) -> Tensor:
    """``matmul`` that accumulates over ``k`` in the same order for every row.

    BLAS may round a row differently depending on where it sits in the
    batch; here each output row is bit-identical under any reordering of the
    leading axes, at the cost of a Python loop over ``k``.
    """
    a, b = tensor(a), tensor(b)
    if a.ndim < 1 or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"ordered_matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = np.zeros(a.shape[:-1] + b.shape[1:])
    for k in range(b.shape[0]):
        if b.ndim == 1:
            out += a.data[..., k] * b.data[k]
        else:
            out += a.data[..., k, None] * b.data[k]
    return _make(out, (a, b), _matmul_backward(a, b))


# ---------------------------------------------------------------- reductions


def tsum(a, axis=None) -> Tensor:
    a = tensor(a)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), backward)


def sorted_sum(a, axis: int = -1) -> Tensor:
    """Sum along ``axis`` after sorting, so the result ignores input order bit for bit."""
    a = tensor(a)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(np.sort(a.data, axis=axis).sum(axis=axis), (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / count)


def softmax(a, axis: int = -1, order_free: bool = False) -> Tensor:
    """Max-shifted softmax; ``order_free`` sums the denominator in sorted order."""
    a = tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ValueError("softmax of an empty input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    denom = np.sort(e, axis=axis).sum(axis=axis, keepdims=True) if order_free else e.sum(axis=axis, keepdims=True)
    y = e / denom

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ValueError("log_softmax of an empty input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward)


# ------------------------------------------------------------------ indexing


def getitem(a, index) -> Tensor:
    a = tensor(a)

    def backward(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward)


def take_rows(table, ids) -> Tensor:
    """Gather rows of a 2-D ``table``; duplicate ids accumulate gradient."""
    table = tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        full = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], (table,), backward)


def pick(a, ids) -> Tensor:
    """``out[..., ] = a[..., ids[...]]`` along the last axis."""
    a = tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    out = np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0]

    def backward(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.put_along_axis(full, ids[..., None], g[..., None], axis=-1)
        return (full,)

    return _make(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward)


# ------------------------------------------------------------------ backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(root)/d(.) to every reachable leaf with ``requires_grad``.

    Leaf gradients are accumulated into ``leaf.grad`` (so several roots can
    be summed by calling this repeatedly) and returned as a mapping keyed by
    the leaf tensor.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=DTYPE)}
    leaves: dict[Tensor, np.ndarray] = {}
    if not root.requires_grad:
        return leaves
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


# ------------------------------------------------------- finite differences


def numeric_grad(f: Callable[[], float], array: np.ndarray, index, h: float = 1e-5) -> float:
    """Central difference of ``f`` w.r.t. ``array[index]`` (array mutated in place, then restored)."""
    old = array[index]
    array[index] = old + h
    fp = f()
    array[index] = old - h
    fm = f()
    array[index] = old
    return (fp - fm) / (2.0 * h)


def relative_error(analytic: float, numeric: float, floor: float = 1e-5) -> float:
    """``|a - n| / max(|a| + |n|, floor)``.

    Below the floor the comparison is effectively absolute; central-difference
    round-off at h=1e-5 is around 1e-10 for O(10) losses.
    """
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), floor)


def gradcheck(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Max relative error of every coordinate of every param (small tensors only)."""
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    backward(out)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        for idx in np.ndindex(*p.shape):
            num = numeric_grad(lambda: float(f().data), p.data, idx, h)
            worst = max(worst, relative_error(float(analytic[idx]), num))
    return worst
