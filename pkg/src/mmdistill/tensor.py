"""Numpy-backed tensors with tape-free reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to per-parent gradients. ``backward``
walks the graph in reverse topological order.

Broadcasting is restricted to the leading-batch kind: the smaller operand's
shape must be a suffix of the larger one (e.g. a ``(D,)`` bias added to a
``(B, T, D)`` activation). Anything else must be reshaped explicitly.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64
LOG_FLOOR = math.log(1e-12)

_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericError(ArithmeticError):
    """Non-finite input or a degenerate value (e.g. zero norm)."""


class ContractError(RuntimeError):
    """A call violated an op's precondition."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def detach(self) -> "Tensor":
        """Same data, cut out of the graph (stop-gradient boundary)."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Iterable[Tensor], fn) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to a leading-batch-broadcast operand shape."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or b.ndim == 0 or a.ndim == 0:
        return
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{op}: shapes {sa} and {sb} differ beyond leading-batch broadcasting")


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), fn)


def div(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), fn)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient is zero where the floor is active."""
    keep = x.data >= floor
    return _make(np.where(keep, x.data, floor), (x,), lambda g: (g * keep,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x) with the Gaussian CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
    return _make(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


# -- reductions and shape ops -----------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    dtype = x.dtype
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in parts)

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), fn)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), xs, fn)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of ``weight`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    wshape = weight.shape

    def fn(g):
        full = np.zeros(wshape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, wshape[-1]))
        return (full,)

    return _make(weight.data[ids], (weight,), fn)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """For ``x`` of shape (B, T, ...) pick rows ``index`` (B, K) per batch item."""
    index = np.asarray(index)
    b = np.arange(x.shape[0])[:, None]
    shape = x.shape

    def fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, (b, index), g)
        return (full,)

    return _make(x.data[b, index], (x,), fn)


def scatter_rows(x: Tensor, index: np.ndarray, length: int) -> Tensor:
    """Adjoint of :func:`gather_rows`: add (B, K, D) rows into zeros (B, length, D).

    Repeated indices accumulate.
    """
    index = np.asarray(index)
    b = np.arange(x.shape[0])[:, None]
    out = np.zeros((x.shape[0], length) + x.shape[2:], dtype=x.dtype)
    np.add.at(out, (b, index), x.data)
    return _make(out, (x,), lambda g: (g[b, index],))


def pick(x: Tensor, targets: np.ndarray) -> Tensor:
    """x[..., targets] along the last axis, one entry per leading position."""
    targets = np.asarray(targets)
    lead = np.indices(targets.shape)
    key = tuple(lead) + (targets,)
    shape = x.shape

    def fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, key, g)
        return (full,)

    return _make(x.data[key], (x,), fn)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with optional leading batch dims on either side.

    The 2-D case is the plain (m, k) @ (k, n) product. A 2-D right operand is
    shared across all batch items of the left operand.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} disagree")
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# -- normalisation and probability ---------------------------------------------

def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite input")


def softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Softmax over ``axis`` of ``x / temperature``, max-subtracted for stability."""
    if not temperature > 0:
        raise ContractError(f"softmax: temperature must be > 0, got {temperature}")
    _check_finite(x.data, "softmax")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot) / temperature,)

    return _make(out, (x,), fn)


def log_softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if not temperature > 0:
        raise ContractError(f"log_softmax: temperature must be > 0, got {temperature}")
    _check_finite(x.data, "log_softmax")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def fn(g):
        return ((g - p * g.sum(axis=axis, keepdims=True)) / temperature,)

    return _make(out, (x,), fn)


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis where ``mask`` False entries get zero weight."""
    z = np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    n = xd.shape[-1]

    def fn(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, bias.shape)

    return _make(xhat * gd + bias.data, (x, gain, bias), fn)


# -- reverse pass ---------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from ``loss``.

    Gradients accumulate: running backward twice through the same graph
    doubles every ``.grad``.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any requires_grad tensor")
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        node.grad = g if node.grad is None else node.grad + g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
