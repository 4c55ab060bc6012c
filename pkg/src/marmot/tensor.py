"""Dense float64 arrays with reverse-mode differentiation.

Every tensor produced by an operation keeps a reference to its parents and a
closure that maps the output gradient to parent gradients. ``backward`` walks
that graph in reverse topological order and accumulates into the ``grad``
slots of leaf tensors that have ``requires_grad`` set.

Gradients accumulate across calls until :func:`reset_grads` (or
``Tensor.zero_grad``) is called. Training relies on this to sum per-example
gradients inside a mini-batch.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

NEG_INF = -np.inf


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
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
    def producer(self):
        """The closure that created this tensor, or None for leaves."""
        return self._backward

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a constant")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
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


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return Tensor._from_op(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc
    return Tensor._from_op(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    return Tensor._from_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return Tensor._from_op(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {x.shape}")
    return Tensor._from_op(x.data.T, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (x,), _back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing with a scatter gradient."""
    out = x.data[index]

    def _back(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return Tensor._from_op(np.array(out), (x,), _back)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows ``table[ids]``; the gradient scatter-adds back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row ids out of range [0, {table.shape[0]}): {ids.tolist()}")

    def _back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._from_op(table.data[ids], (table,), _back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"cannot concatenate shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._from_op(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def relu(x: Tensor) -> Tensor:
    # gradient at exactly 0 is 0
    active = x.data > 0
    return Tensor._from_op(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def masked_fill(x: Tensor, blocked: np.ndarray, value: float = NEG_INF) -> Tensor:
    """Replace entries where ``blocked`` is true by ``value`` (no gradient flows there)."""
    blocked = np.asarray(blocked, dtype=bool)
    if blocked.shape != x.shape:
        raise ShapeError(f"mask shape {blocked.shape} does not match {x.shape}")
    keep = ~blocked
    return Tensor._from_op(np.where(blocked, value, x.data), (x,), lambda g: (g * keep,))


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax_array(x: np.ndarray, axis: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Sentinel-aware softmax on a plain array.

    Entries equal to -inf are excluded from the normalising sum and come out
    as exactly 0. A slice with no finite entry yields all zeros; the second
    return value flags those slices.
    """
    allowed = x > NEG_INF
    shifted = np.where(allowed, x, 0.0)
    peak = np.max(np.where(allowed, x, NEG_INF), axis=axis, keepdims=True)
    empty = ~np.any(allowed, axis=axis, keepdims=True)
    peak = np.where(empty, 0.0, peak)
    e = np.where(allowed, np.exp(shifted - peak), 0.0)
    # sorted, strictly sequential sum: the normaliser then depends neither on
    # entry order nor on how many exact zeros (blocked entries) are present
    total = np.take(np.cumsum(np.sort(e, axis=axis), axis=axis), [-1], axis=axis)
    out = np.divide(e, total, out=np.zeros_like(e), where=total > 0)
    return out, np.squeeze(empty, axis=axis)


def softmax(x: Tensor, axis: int = -1, return_empty: bool = False):
    axis = _check_axis(x, axis)
    y, empty = softmax_array(x.data, axis)

    def _back(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    out = Tensor._from_op(y, (x,), _back)
    return (out, empty) if return_empty else out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    peak = np.max(x.data, axis=axis, keepdims=True)
    shifted = x.data - peak
    logz = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - logz
    probs = np.exp(out)
    return Tensor._from_op(
        out, (x,), lambda g: (g - probs * np.sum(g, axis=axis, keepdims=True),)
    )


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """``weights @ values`` for attention, invariant to the order of the keys.

    Each output entry sums its terms ``w_ij * v_jc`` sequentially in sorted
    order. Permuting the keys (rows of ``values`` together with columns of
    ``weights``) therefore leaves the result unchanged bit for bit, and so
    does adding keys whose weight is exactly zero.
    """
    if weights.ndim != 2 or values.ndim != 2 or weights.shape[1] != values.shape[0]:
        raise ShapeError(f"weighted_sum shape mismatch: {weights.shape} @ {values.shape}")
    terms = weights.data[:, :, None] * values.data[None, :, :]
    out = np.cumsum(np.sort(terms, axis=1), axis=1)[:, -1, :]
    return Tensor._from_op(out, (weights, values), lambda g: (g @ values.data.T, weights.data.T @ g))


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def reset_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator (numpy's default bit generator).

    PCG64 output for a given seed is fixed by numpy's stream-compatibility
    policy, so identical seeds reproduce the same draws across platforms.
    """
    return np.random.Generator(np.random.PCG64(seed))


def derive_seeds(seed: int, count: int) -> list[int]:
    """Independent child seeds for parallel runs derived from one master seed."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]
