"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built define-by-run: every operation touching a tracked tensor
records a node holding its inputs and a backward rule. ``backward`` sorts the
nodes reachable from a scalar loss into a :class:`Tape` and walks it in
reverse, accumulating gradients into the ``grad`` buffer of every tensor with
``requires_grad`` set.

All data is 64-bit. Every operation validates that its output is finite and
raises :class:`NumericError` otherwise, so NaN/Inf never propagate silently.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class _Node:
    """One recorded operation: its input tensors and a backward rule.

    ``backward`` maps the gradient w.r.t. the output to a tuple of gradients
    aligned with ``inputs`` (entries may be None for non-differentiable
    inputs).
    """

    __slots__ = ("inputs", "backward")

    def __init__(self, inputs: tuple["Tensor", ...],
                 backward: Callable[[np.ndarray], tuple]):
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """A dense float64 array, optionally participating in the gradient tape.

    ``requires_grad`` marks tensors whose gradient should be materialized in
    ``.grad`` by :func:`backward` (typically model parameters). Tensors
    produced by operations carry a ``_node`` linking them into the tape;
    their data is treated as immutable after creation.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, _node: _Node | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node = _node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; all routed through the module-level ops
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Topologically ordered record of the operations reaching one output.

    ``nodes`` lists op-producing tensors such that every operation's inputs
    appear earlier than the operation itself; a reverse walk therefore visits
    each node exactly once with its output gradient fully accumulated.
    """

    __slots__ = ("nodes",)

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t._node.inputs:
                stack.append((inp, False))
        return cls(order)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._node is not None


def as_tensor(x) -> Tensor:
    """Wrap plain numbers/arrays as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _ensure_finite(data: np.ndarray) -> None:
    """Cheap non-finite detector: NaN/Inf anywhere poisons the full sum.

    The one-pass sum can itself overflow on astronomically large but finite
    values, so a failing fast check is confirmed elementwise before raising.
    """
    if not math.isfinite(float(np.sum(data))):
        if not np.all(np.isfinite(data)):
            raise NumericError("operation produced a non-finite value")


def _from_op(data: np.ndarray, inputs: tuple[Tensor, ...],
             backward: Callable[[np.ndarray], tuple]) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    _ensure_finite(data)
    if any(_tracked(t) for t in inputs):
        return Tensor(data, _node=_Node(inputs, backward))
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be scalar. Repeated calls without a grad reset accumulate.
    """
    if not isinstance(loss, Tensor):
        raise ConfigError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ConfigError(f"backward needs a scalar loss, got shape {loss.shape}")

    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        seed = np.ones_like(loss.data)
        loss.grad = seed.copy() if loss.grad is None else loss.grad + seed

    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        input_grads = t._node.backward(g)
        for inp, ig in zip(t._node.inputs, input_grads):
            if ig is None:
                continue
            if inp.requires_grad:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            if inp._node is not None:
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _from_op(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _from_op(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data / b.data
    except ValueError as exc:
        raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _from_op(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _from_op(-a.data, (a,), lambda g: (-g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        return (g * 0.5 / out,)

    return _from_op(out, (a,), bw)


# ---------------------------------------------------------------------------
# matrix product

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes.

    Follows numpy semantics for 1-D operands: a 1-D ``a`` acts as a row
    vector, a 1-D ``b`` as a column vector, with the extra axis dropped from
    the result.
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError(f"matmul needs at least 1-D operands, got {a.shape} and {b.shape}")
    inner_a = ad.shape[-1]
    inner_b = bd.shape[-2] if bd.ndim > 1 else bd.shape[0]
    if inner_a != inner_b:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        a2 = ad if ad.ndim > 1 else ad[None, :]
        b2 = bd if bd.ndim > 1 else bd[:, None]
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape).reshape(bd.shape)
        return ga, gb

    return _from_op(out, (a, b), bw)


def affine(x, w, b) -> Tensor:
    """Fused ``x @ w.T + b`` with ``w`` shaped (out, in) and ``b`` (out,).

    One tape node instead of transpose + matmul + add; the weight gradient
    collapses all leading axes of ``x`` into one matrix product.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    xd, wd, bd = x.data, w.data, b.data
    if wd.ndim != 2 or bd.shape != (wd.shape[0],):
        raise ShapeError(f"affine needs w (out, in) and b (out,), got {w.shape} "
                         f"and {b.shape}")
    if xd.ndim < 1 or xd.shape[-1] != wd.shape[1]:
        raise ShapeError(f"affine: input {x.shape} does not end in {wd.shape[1]}")
    out = np.matmul(xd, wd.T)
    out += bd

    def bw(g):
        g2 = np.reshape(g, (-1, wd.shape[0]))
        x2 = np.reshape(xd, (-1, wd.shape[1]))
        gx = np.matmul(g2, wd).reshape(xd.shape)
        gw = np.matmul(g2.T, x2)
        gb = g2.sum(axis=0)
        return gx, gw, gb

    return _from_op(out, (x, w, b), bw)


# ---------------------------------------------------------------------------
# reductions

def _restore_axes(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        return (_restore_axes(g, a.shape, axis, keepdims).copy(),)

    return _from_op(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else out.size and a.data.size // max(out.size, 1)
    if axis is not None:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax % a.ndim]

    def bw(g):
        return (_restore_axes(g, a.shape, axis, keepdims) / count,)

    return _from_op(out, (a,), bw)


# ---------------------------------------------------------------------------
# activations

def _relu_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * (x > 0.0)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bw(g):
        return (_relu_grad(a.data, g),)

    return _from_op(out, (a,), bw)


def _gelu_grad(x: np.ndarray, g: np.ndarray, cdf: np.ndarray | None = None) -> np.ndarray:
    if cdf is None:
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    phi = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return g * (cdf + x * phi)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x) with the Gaussian CDF."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def bw(g):
        return (_gelu_grad(a.data, g, cdf),)

    return _from_op(out, (a,), bw)


def activation(a, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(a)
    if kind == "relu":
        return relu(a)
    raise ConfigError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# softmax family

def softmax_temp(a, tau: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature softmax along ``axis``: exp(x/tau) / sum(exp(x/tau)).

    Computed with row-max subtraction; ``tau`` must be positive. Larger ``tau``
    flattens the distribution.
    """
    if not tau > 0.0:
        raise ConfigError(f"softmax temperature must be positive, got {tau}")
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax_temp received non-finite logits")
    shifted = (a.data - a.data.max(axis=axis, keepdims=True)) / tau
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / tau,)

    return _from_op(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericError("log_softmax received non-finite logits")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _from_op(out, (a,), bw)


# ---------------------------------------------------------------------------
# normalization

def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to mean 0 / variance 1, then scale and shift.

    ``eps`` is added to the variance before the square root, which keeps the
    all-constant (for example zero-imputed) feature row well defined.
    """
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    xd = a.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gg = g * gain.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _from_op(out, (a, gain, bias), bw)


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc

    def bw(g):
        return (g.reshape(a.shape),)

    return _from_op(out, (a,), bw)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    out = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inverse),)

    return _from_op(out, (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(part for part in np.split(g, splits, axis=axis))

    return _from_op(out, tuple(tensors), bw)


def slice_(a, key) -> Tensor:
    """Basic slicing (ints, slices, Ellipsis); no index arrays."""
    a = as_tensor(a)
    out = a.data[key]

    def bw(g):
        z = np.zeros_like(a.data)
        z[key] = g
        return (z,)

    return _from_op(np.array(out, copy=True), (a,), bw)


def embedding(table, ids) -> Tensor:
    """Row lookup: select ``table`` rows by an integer index array."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ConfigError("embedding indices must be integers")
    out = table.data[ids]

    def bw(g):
        z = np.zeros_like(table.data)
        np.add.at(z, ids, g)
        return (z,)

    return _from_op(out, (table,), bw)


def gather(a, index, axis: int) -> Tensor:
    """Pick elements along ``axis`` per position, as ``np.take_along_axis``."""
    a = as_tensor(a)
    index = np.asarray(index)
    if not np.issubdtype(index.dtype, np.integer):
        raise ConfigError("gather indices must be integers")
    out = np.take_along_axis(a.data, index, axis=axis)

    def bw(g):
        z = np.zeros_like(a.data)
        locs = list(np.indices(index.shape))
        locs[axis] = index
        np.add.at(z, tuple(locs), g)
        return (z,)

    return _from_op(out, (a,), bw)
