"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray and, while gradients are enabled, records the
operation that produced it together with a vector-Jacobian closure. ``grad``
walks the recorded graph backwards from a scalar loss. The op set is
deliberately small: affine algebra, rectifier, reductions, indexing, exp/log,
plus the composites (softmax, cross-entropy, layer norm) the models need.

Stop-gradient semantics: ``stop_gradient(x)`` contributes its value to any
downstream computation but no gradient flows through it. ``straight_through``
is the complementary trick: the forward value is replaced while the backward
pass behaves as the identity on the original input.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import NumericError, UsageError

Array = np.ndarray

_grad_enabled = True
_node_counter = itertools.count()


@contextmanager
def no_grad():
    """Disable graph recording inside the context (inference mode)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``g`` over the axes numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """Array value on the gradient tape."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_vjp", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], tuple] | None = None
        self._seq = next(_node_counter)

    # construction -----------------------------------------------------------

    @staticmethod
    def _make(data: Array, parents: tuple["Tensor", ...], vjp, op: str) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.op = op
            out._parents = parents
            out._vjp = vjp
        return out

    # basic protocol ---------------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self.op!r}{flag})"

    # operators ---------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# primitive ops ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._make(out, (a, b), vjp, "add")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return Tensor._make(out, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return Tensor._make(out, (a, b), vjp, "div")


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    if isinstance(exponent, Tensor):
        raise UsageError("power supports scalar exponents only")
    out = a.data ** exponent

    def vjp(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor._make(out, (a,), vjp, "power")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (0.5 / out),), "sqrt")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise UsageError("matmul requires operands with at least 2 dimensions")
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb

    return Tensor._make(out, (a, b), vjp, "matmul")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape),)

    return Tensor._make(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.data.size / max(out.size, 1)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / denom,)

    return Tensor._make(out, (a,), vjp, "mean")


def reshape(a, *shape) -> Tensor:
    a = _as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.data.shape),), "reshape")


def transpose(a, *axes) -> Tensor:
    a = _as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return Tensor._make(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(Ellipsis), type(None))) for i in items)


def take(a, index) -> Tensor:
    """Indexing/gather; integer-array indices accumulate on the backward pass."""
    a = _as_tensor(a)
    out = a.data[index]
    basic = _is_basic_index(index)

    def vjp(g):
        buf = np.zeros_like(a.data)
        if basic:
            buf[index] += g
        else:
            np.add.at(buf, index, g)
        return (buf,)

    return Tensor._make(out, (a,), vjp, "take")


def stop_gradient(a) -> Tensor:
    """Value passes through, gradient does not."""
    return _as_tensor(a).detach()


def straight_through(a, value) -> Tensor:
    """Forward the entries of ``value`` while backward acts as identity on ``a``.

    ``value`` is treated as a constant: its producers receive no gradient.
    """
    a = _as_tensor(a)
    data = value.data if isinstance(value, Tensor) else np.asarray(value)
    if data.shape != a.data.shape:
        raise UsageError(
            f"straight_through shapes differ: {a.data.shape} vs {data.shape}"
        )
    return Tensor._make(data.copy(), (a,), lambda g: (g,), "straight_through")


# composites -------------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a - Tensor(a.data.max(axis=axis, keepdims=True))
    e = exp(shifted)
    return e / sum_(e, axis=axis, keepdims=True)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a - Tensor(a.data.max(axis=axis, keepdims=True))
    return shifted - log(sum_(exp(shifted), axis=axis, keepdims=True))


def cross_entropy(logits, targets: Array, axis: int = -1) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` along the last axis."""
    logits = _as_tensor(logits)
    if axis not in (-1, logits.data.ndim - 1):
        raise UsageError("cross_entropy expects class axis last")
    targets = np.asarray(targets)
    ls = log_softmax(logits, axis=-1)
    flat = reshape(ls, (-1, logits.data.shape[-1]))
    rows = np.arange(flat.data.shape[0])
    picked = take(flat, (rows, targets.reshape(-1)))
    return neg(mean(picked))


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    a = _as_tensor(a)
    mu = mean(a, axis=-1, keepdims=True)
    centered = a - mu
    variance = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(variance, eps), -0.5)
    return add(mul(mul(centered, inv), gain), bias)


# backward pass ----------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _first_non_finite(nodes: Iterable[Tensor]) -> Tensor | None:
    bad = [n for n in nodes if not np.all(np.isfinite(n.data))]
    if not bad:
        return None
    return min(bad, key=lambda n: n._seq)


def grad(loss: Tensor, params: Sequence[Tensor]) -> dict[Tensor, Array]:
    """Reverse-mode gradients of a scalar ``loss`` for each tensor in ``params``.

    Parameters the loss does not depend on receive zero gradients. Raises
    UsageError for non-scalar losses and NumericError for non-finite ones,
    naming the earliest non-finite node on the tape.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("grad expects a Tensor loss")
    if loss.data.size != 1:
        raise UsageError(f"loss must be scalar, got shape {loss.data.shape}")
    order = _toposort(loss)
    if not np.all(np.isfinite(loss.data)):
        culprit = _first_non_finite(order)
        where = f"op {culprit.op!r} (node #{culprit._seq})" if culprit else "loss"
        raise NumericError(f"non-finite loss; first non-finite value at {where}")

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        if node._vjp is None:
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = np.array(pg, copy=True)
            else:
                acc += pg

    result: dict[Tensor, Array] = {}
    for p in params:
        pg = grads.get(id(p))
        result[p] = np.zeros_like(p.data) if pg is None else pg
    return result
