"""Dense float64 arrays with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded when any
input requires a gradient. ``backward`` replays the tape in reverse order and
accumulates gradients into leaf arrays. Outside a tape, operations run as
plain numpy code, which is what inference uses.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ContractError(ValueError):
    """An operation was called outside its precondition."""


class DimensionError(ContractError):
    pass


_TAPES: list["Tape"] = []


class Array:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
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

    def __repr__(self) -> str:
        return f"Array(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # operators
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

    def __truediv__(self, other):
        if isinstance(other, Array):
            raise TypeError("division by an Array is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Array, parents: tuple[Array, ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nodes are appended in execution order, so the
    record is already topologically sorted.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def gradients(self, loss: Array, wrt: Sequence[Array]) -> list[np.ndarray | None]:
        """Gradients of a scalar ``loss`` with respect to ``wrt``, without side effects."""
        adj = self._replay(loss)
        return [adj.get(id(p)) for p in wrt]

    def backward(self, loss: Array) -> None:
        adj = self._replay(loss)
        produced = {id(n.out) for n in self.nodes}
        seen: set[int] = set()
        for node in self.nodes:
            for p in node.parents:
                key = id(p)
                if key in seen or key in produced or not p.requires_grad:
                    continue
                seen.add(key)
                g = adj.get(key)
                if g is None:
                    continue
                p.grad = g.copy() if p.grad is None else p.grad + g
        if id(loss) not in produced and loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0

    def _replay(self, loss: Array) -> dict[int, np.ndarray]:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = adj.pop(id(node.out), None)
            if g is None:
                continue
            grads = node.backward(g)
            for p, gp in zip(node.parents, grads):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in adj:
                    adj[key] = adj[key] + gp
                else:
                    adj[key] = gp
        return adj


def backward(loss: Array, tape: Tape) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``; grads accumulate."""
    tape.backward(loss)


def no_grad_active() -> bool:
    return not _TAPES


def as_array(x) -> Array:
    return x if isinstance(x, Array) else Array(x)


def _record(out_data: np.ndarray, parents: tuple[Array, ...], backward_fn: Callable) -> Array:
    tracked = _TAPES and any(p.requires_grad for p in parents)
    out = Array(out_data, requires_grad=bool(tracked))
    if tracked:
        _TAPES[-1].nodes.append(_Node(out, parents, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ----------------------------------------------------------------

def add(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def exp(x: Array) -> Array:
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def log(x: Array) -> Array:
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Array) -> Array:
    y = np.sqrt(x.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(y > 0, 0.5 / np.where(y > 0, y, 1.0), 0.0)
        return (g * d,)

    return _record(y, (x,), bw)


def cos(x: Array) -> Array:
    return _record(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def sin(x: Array) -> Array:
    return _record(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def abs_(x: Array) -> Array:
    # subgradient of |x| at 0 is taken as 0
    return _record(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x: Array) -> Array:
    return _record(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),))


def softplus(x) -> Array:
    """log(1 + e^x), computed as max(x, 0) + log1p(exp(-|x|))."""
    x = as_array(x)
    y = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record(y, (x,), lambda g: (g * sig,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Array) -> Array:
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    y = 0.5 * xd * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _record(y, (x,), bw)


# shape -----------------------------------------------------------------------

def reshape(x: Array, shape) -> Array:
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Array, axes=None) -> Array:
    y = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _record(y, (x,), lambda g: (np.transpose(g, inv),))


def take(x: Array, index) -> Array:
    """Basic or integer-array indexing; gradients scatter-add back."""
    y = x.data[index]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _record(np.array(y, dtype=np.float64), (x,), bw)


def concat(xs: Sequence[Array], axis: int = 0) -> Array:
    xs = [as_array(x) for x in xs]
    y = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(y, tuple(xs), bw)


# reductions ------------------------------------------------------------------

def sum_(x: Array, axis=None, keepdims: bool = False) -> Array:
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(y, dtype=np.float64), (x,), bw)


def mean(x: Array, axis=None, keepdims: bool = False) -> Array:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(n))


def l1_norm(x: Array, axis=-1) -> Array:
    return sum_(abs_(x), axis=axis)


def l2_norm(x: Array, axis=-1) -> Array:
    return sqrt(sum_(mul(x, x), axis=axis))


# linear algebra --------------------------------------------------------------

def matmul(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    y = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(y, (a, b), bw)


def softmax_rows(x, mask: np.ndarray | None = None) -> Array:
    """Softmax over the last axis.

    ``mask`` is an additive constant (0 or -inf) broadcast against ``x``;
    -inf entries get exactly zero probability.
    """
    x = as_array(x)
    z = x.data if mask is None else x.data + mask
    m = z.max(axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise ContractError("softmax row with every entry -inf")
    e = np.exp(z - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (_unbroadcast(p * (g - (g * p).sum(axis=-1, keepdims=True)), x.shape),)

    return _record(p, (x,), bw)


def log_softmax(x: Array) -> Array:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _record(y, (x,), bw)


def layer_norm(x: Array, weight: Array, bias: Array, eps: float = 1e-5) -> Array:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * weight.data + bias.data

    def bw(g):
        gw = _unbroadcast(g * xhat, weight.shape)
        gb = _unbroadcast(g, bias.shape)
        gxhat = g * weight.data
        n = x.shape[-1]
        gx = inv / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, gw, gb

    return _record(y, (x, weight, bias), bw)


def embedding(table: Array, ids) -> Array:
    """Row lookup ``table[ids]``; the gradient scatter-adds into the used rows."""
    ids = np.asarray(ids, dtype=np.int64)
    y = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _record(y, (table,), bw)


def cross_entropy(logits: Array, targets, reduction: str = "mean") -> Array:
    """Negative log-likelihood of integer ``targets`` under row-wise softmax of ``logits``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects [n, v] logits and [n] targets, got "
                             f"{logits.shape} and {targets.shape}")
    if targets.size == 0:
        raise ContractError("cross_entropy over zero targets")
    if targets.min() < 0 or targets.max() >= logits.shape[-1]:
        raise ContractError("cross_entropy target id outside the logit range")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(targets.size)
    nll = lse - z[rows, targets]
    n = targets.size

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        scale = g / n if reduction == "mean" else (g if reduction == "sum" else g[:, None])
        return (p * scale,)

    if reduction == "mean":
        return _record(np.asarray(nll.mean()), (logits,), bw)
    if reduction == "sum":
        return _record(np.asarray(nll.sum()), (logits,), bw)
    if reduction == "none":
        return _record(nll, (logits,), bw)
    raise ValueError(f"unknown reduction {reduction!r}")


# optimizers --------------------------------------------------------------------

class OptimizerState:
    """Adaptive-moment (Adam) state for a fixed list of parameters."""

    def __init__(self, params: Sequence[Array], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        if lr <= 0:
            raise ContractError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        missing = [p.name or str(i) for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise ContractError(f"no gradient for parameter(s): {', '.join(missing)}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def state_arrays(self) -> list[np.ndarray]:
        return self.m + self.v

    def load_state_arrays(self, arrays: Sequence[np.ndarray], t: int) -> None:
        n = len(self.params)
        for dst, src in zip(self.m + self.v, arrays):
            dst[...] = src
        if len(arrays) != 2 * n:
            raise ContractError("optimizer state does not match parameter list")
        self.t = t


class SGDState:
    """Plain gradient descent, kept as a fallback to the adaptive optimizer."""

    def __init__(self, params: Sequence[Array], lr: float = 1e-2):
        if lr <= 0:
            raise ContractError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.t = 0

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"no gradient for parameter {p.name or i}")
        self.t += 1
        for p in self.params:
            p.data -= self.lr * p.grad
            p.grad = None

    def state_arrays(self) -> list[np.ndarray]:
        return []

    def load_state_arrays(self, arrays, t: int) -> None:
        self.t = t


def step(params: Iterable[Array], state) -> None:
    """Apply one optimizer update; ``params`` must be the list ``state`` was built over."""
    params = list(params)
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ContractError("parameters do not match optimizer state")
    state.step()


def grad_norm(grads: Iterable[np.ndarray | None]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
