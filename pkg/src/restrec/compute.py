"""Small define-by-run reverse-mode differentiation over float64 numpy arrays.

Operations executed inside a ``with Tape() as tape:`` block are recorded;
``backward(tape, loss)`` replays them in reverse and accumulates gradients
into every reachable :class:`Parameter`. Outside a tape the same functions
run as plain forward numpy code, which is what evaluation uses.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "ShapeError",
    "affine",
    "activation",
    "sigmoid",
    "relu",
    "softmax",
    "lookup",
    "concat",
    "reshape",
    "sum_",
    "mean",
    "log",
    "clip",
    "logsumexp",
    "backward",
    "finite_difference_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_ACTIVE: list["Tape"] = []


class Tensor:
    """Immutable float64 value plus the bookkeeping needed to differentiate it."""

    __slots__ = ("value", "parents", "grad_fn", "requires_grad")

    def __init__(self, value, parents: Sequence["Tensor"] = (), grad_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.grad_fn = grad_fn
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """A trainable leaf tensor with a gradient buffer of identical shape."""

    __slots__ = ("name", "grad")

    def __init__(self, value, name: str = ""):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents: Sequence[Tensor], grad_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(value, parents if needs else (), grad_fn if needs else None, needs)
    if needs and _ACTIVE:
        _ACTIVE[-1].nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.value + b.value

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _node(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.value * b.value

    def grad_fn(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _node(out, (a, b), grad_fn)


# layers and activations ---------------------------------------------------


def affine(x, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``."""
    x = _as_tensor(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(
            f"affine: input {x.shape} incompatible with weight {weight.shape} and bias {bias.shape}"
        )
    out = x.value @ weight.value + bias.value
    p, q = weight.shape

    def grad_fn(g):
        g2 = g.reshape(-1, q)
        return (
            g @ weight.value.T,
            x.value.reshape(-1, p).T @ g2,
            g2.sum(axis=0),
        )

    return _node(out, (x, weight, bias), grad_fn)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(_as_tensor(x).value)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x: Tensor) -> Tensor:
    active = x.value > 0
    return _node(np.where(active, x.value, 0.0), (x,), lambda g: (g * active,))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, (x,), grad_fn)


_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "sigmoid": sigmoid,
    "relu": relu,
    "softmax": softmax,
}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(_as_tensor(x))


def lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; the result has shape ``ids.shape + (d,)``.

    The backward pass scatters additively, so repeated ids accumulate.
    """
    ids = np.asarray(ids, dtype=np.int64)
    vocab, width = table.shape
    if ids.size:
        bad = ids[(ids < 0) | (ids >= vocab)]
        if bad.size:
            raise IndexError(f"lookup: id {int(bad[0])} outside vocabulary of size {vocab}")
    out = table.value[ids]

    def grad_fn(g):
        full = np.zeros_like(table.value)
        np.add.at(full, ids.ravel(), g.reshape(-1, width))
        return (full,)

    return _node(out, (table,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tensors, grad_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(original),))


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    out = x.value.sum(axis=axis)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(out, (x,), grad_fn)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.value.size if axis is None else x.shape[axis]
    return sum_(x, axis) / n


def log(x: Tensor) -> Tensor:
    v = x.value
    return _node(np.log(v), (x,), lambda g: (g / v,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp; the gradient is zero wherever the clamp is active."""
    inside = (x.value >= lo) & (x.value <= hi)
    return _node(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,))


def logsumexp(x: Tensor, mask=None) -> Tensor:
    """log Σ exp over the last axis, skipping entries where ``mask`` is false."""
    v = x.value
    keep = np.ones(v.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    shifted = np.where(keep, v, -np.inf)
    top = shifted.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(keep, np.exp(shifted - top), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    out = (np.log(total) + top)[..., 0]
    weights = e / total

    def grad_fn(g):
        return (weights * g[..., None],)

    return _node(out, (x,), grad_fn)


# gradients -----------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``param.grad`` for every reachable parameter."""
    if loss.value.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    if isinstance(loss, Parameter):
        loss.grad += 1.0
        return
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if isinstance(parent, Parameter):
                parent.grad += pg
            else:
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg


def finite_difference_check(
    fn: Callable[[], Tensor], params: Iterable[Parameter], h: float = 1e-5
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must rebuild its scalar loss from the current parameter values on
    every call and be deterministic.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    backward(tape, loss)
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        analytic = p.grad.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = fn().item()
            flat[k] = orig - h
            down = fn().item()
            flat[k] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(analytic[k] - numeric) / (abs(analytic[k]) + 1e-8)
            worst = max(worst, err)
    return worst
