"""numpy-backed dense tensors with tape-based reverse-mode autodiff.

Tensors are value-semantic: no op ever writes into an input's buffer, so a
Tensor may be shared freely between expressions and threads. Gradient
tracking builds an implicit graph of parent references plus per-op backward
closures; ``Tensor.backward()`` materialises that graph as a ``Tape`` (a
reverse-topological schedule) and replays it once.

Every op checks its output for NaN/Inf and raises ``NonFiniteError`` instead
of propagating silently. ``finite_diff`` provides the central-difference
gradient oracle that every registered primitive is validated against.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

RMSNORM_EPS = 1e-6


class TensorError(ValueError):
    """Contract violation on a tensor op (shape mismatch, non-scalar root, ...)."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf; surfaced as an error, never propagated."""


_grad_enabled = True
_finite_checks = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / diagnostics)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf checking; returns the previous setting."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(enabled)
    return prev


class Tensor:
    """Dense n-dimensional real array, the sole value type of this package.

    ``data`` is a float32/float64 ndarray treated as immutable by every op.
    Leaves created with ``requires_grad=True`` accumulate into ``grad`` when
    ``backward()`` runs on a scalar result.
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if _finite_checks and not np.all(np.isfinite(arr)):
            raise NonFiniteError("Tensor constructed from non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward: Callable[[], None] | None = None
        self._prev: tuple["Tensor", ...] = ()

    # --- introspection ---

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The backing array; treat as read-only."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{req})"

    # --- autodiff plumbing ---

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode gradients of this scalar w.r.t. every reachable leaf."""
        Tape.trace(self).backward(self)

    # --- operator sugar ---

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, like=self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, float(p))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class Tape:
    """Reverse-topological schedule of the ops reachable from one output.

    ``nodes`` lists every recorded tensor so that each appears after all of
    its inputs; replaying the list in reverse therefore visits each node
    exactly once, after all of its consumers have contributed gradient.
    """

    __slots__ = ("nodes",)

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, int]] = [(root, 0)]
        while stack:
            node, i = stack.pop()
            if i == 0:
                if id(node) in seen:
                    continue
                seen.add(id(node))
            if i < len(node._prev):
                stack.append((node, i + 1))
                child = node._prev[i]
                if id(child) not in seen:
                    stack.append((child, 0))
            else:
                order.append(node)
        return cls(order)

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if output.data.size != 1:
                raise TensorError(
                    f"backward requires a scalar output, got shape {output.shape}"
                )
            seed = np.ones_like(output.data)
        output._accum(seed)
        for node in reversed(self.nodes):
            bw = node._backward
            if bw is not None:
                bw()


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# --- helpers ---


def _coerce(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...]) -> Tensor:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite values in result")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._backward = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = parents
    else:
        out.requires_grad = False
        out._prev = ()
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _resolve_axis(axis, ndim: int) -> int:
    """Map the row/column convention onto a numpy axis.

    ``rows`` normalises along each row (last axis), ``cols`` along each
    column (second-to-last axis); integers pass through.
    """
    if axis == "rows":
        return -1
    if axis == "cols":
        if ndim < 2:
            raise TensorError("axis='cols' requires at least 2 dimensions")
        return -2
    if isinstance(axis, int):
        return axis
    raise TensorError(f"axis must be an int, 'rows', or 'cols'; got {axis!r}")


# --- elementwise arithmetic ---


def add(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, like=a)
    out = _make(a.data + b.data, "add", (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad, b.data.shape))
        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, like=a)
    out = _make(a.data - b.data, "sub", (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-out.grad, b.data.shape))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, like=a)
    out = _make(a.data * b.data, "mul", (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad * a.data, b.data.shape))
        out._backward = _bw
    return out


def div(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, like=a)
    out = _make(a.data / b.data, "div", (a, b))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad / b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-out.grad * out.data / b.data, b.data.shape))
        out._backward = _bw
    return out


def neg(a) -> Tensor:
    a = _coerce(a)
    out = _make(-a.data, "neg", (a,))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(-out.grad)
        out._backward = _bw
    return out


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar (cheaper than a full elementwise mul)."""
    a = _coerce(a)
    c = float(c)
    out = _make(a.data * c, "scale", (a,))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(out.grad * c)
        out._backward = _bw
    return out


def pow_scalar(a, p: float) -> Tensor:
    a = _coerce(a)
    p = float(p)
    out = _make(a.data ** p, "pow", (a,))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(out.grad * p * a.data ** (p - 1.0))
        out._backward = _bw
    return out


# --- elementwise nonlinearities ---


def exp(a) -> Tensor:
    a = _coerce(a)
    out = _make(np.exp(a.data), "exp", (a,))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(out.grad * out.data)
        out._backward = _bw
    return out


def log(a) -> Tensor:
    a = _coerce(a)
    out = _make(np.log(a.data), "log", (a,))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(out.grad / a.data)
        out._backward = _bw
    return out


def sqrt(a) -> Tensor:
    a = _coerce(a)
    out = _make(np.sqrt(a.data), "sqrt", (a,))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(out.grad * 0.5 / out.data)
        out._backward = _bw
    return out


def relu(a) -> Tensor:
    # subgradient convention: relu'(0) = 0
    a = _coerce(a)
    out = _make(np.maximum(a.data, 0.0), "relu", (a,))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(np.where(a.data > 0.0, out.grad, 0.0))
        out._backward = _bw
    return out


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    x = a.data
    s = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = _make(s, "sigmoid", (a,))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(out.grad * out.data * (1.0 - out.data))
        out._backward = _bw
    return out


def tanh(a) -> Tensor:
    a = _coerce(a)
    out = _make(np.tanh(a.data), "tanh", (a,))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(out.grad * (1.0 - out.data * out.data))
        out._backward = _bw
    return out


def gelu(a) -> Tensor:
    """GELU in the tanh approximation (differentiable everywhere)."""
    a = _coerce(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    out = _make(0.5 * x * (1.0 + t), "gelu", (a,))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
                a._accum(out.grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))
        out._backward = _bw
    return out


# --- linear algebra and structure ---


def matmul(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise TensorError(f"matmul requires 2+ dims, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise TensorError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = _make(a.data @ b.data, "matmul", (a, b))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                a._accum(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))
        out._backward = _bw
    return out


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes`` if given."""
    a = _coerce(a)
    if axes is None:
        if a.ndim < 2:
            raise TensorError("transpose requires at least 2 dimensions")
        data = a.data.swapaxes(-1, -2)
        out = _make(data, "transpose", (a,))
        if out.requires_grad:
            def _bw():
                if a.requires_grad:
                    a._accum(out.grad.swapaxes(-1, -2))
            out._backward = _bw
        return out
    perm = tuple(axes)
    inv = tuple(np.argsort(perm))
    out = _make(np.transpose(a.data, perm), "transpose", (a,))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(np.transpose(out.grad, inv))
        out._backward = _bw
    return out


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    src = a.data.shape
    out = _make(a.data.reshape(shape), "reshape", (a,))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a._accum(out.grad.reshape(src))
        out._backward = _bw
    return out


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,))
    if out.requires_grad:
        src = a.data.shape
        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                ax = axis if isinstance(axis, tuple) else (axis,)
                ax = tuple(x % len(src) for x in ax)
                for x in sorted(ax):
                    g = np.expand_dims(g, x)
            if a.requires_grad:
                a._accum(np.broadcast_to(g, src))
        out._backward = _bw
    return out


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = _make(a.data.mean(axis=axis, keepdims=keepdims), "mean", (a,))
    if out.requires_grad:
        src = a.data.shape
        n = a.data.size / max(out.data.size, 1)
        def _bw():
            g = out.grad / n
            if axis is not None and not keepdims:
                ax = axis if isinstance(axis, tuple) else (axis,)
                ax = tuple(x % len(src) for x in ax)
                for x in sorted(ax):
                    g = np.expand_dims(g, x)
            if a.requires_grad:
                a._accum(np.broadcast_to(g, src))
        out._backward = _bw
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(_coerce(t) for t in tensors)
    out = _make(np.concatenate([p.data for p in parts], axis=axis), "concat", parts)
    if out.requires_grad:
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)
        def _bw():
            for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    idx = [slice(None)] * out.grad.ndim
                    idx[axis] = slice(start, stop)
                    p._accum(out.grad[tuple(idx)])
        out._backward = _bw
    return out


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis (fast path; grads scatter by assignment)."""
    a = _coerce(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = _make(a.data[idx], "slice", (a,))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                g_full = np.zeros_like(a.data)
                g_full[idx] = out.grad
                a._accum(g_full)
        out._backward = _bw
    return out


def getitem(a, idx) -> Tensor:
    """General indexing (basic slices or integer arrays, e.g. embedding lookup)."""
    a = _coerce(a)
    out = _make(np.ascontiguousarray(a.data[idx]), "getitem", (a,))
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                g_full = np.zeros_like(a.data)
                np.add.at(g_full, idx, out.grad)
                a._accum(g_full)
        out._backward = _bw
    return out


# --- stabilised reductions ---


def softmax(a, axis) -> Tensor:
    """Max-shifted softmax along ``axis`` ('rows', 'cols', or an int)."""
    a = _coerce(a)
    ax = _resolve_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=ax, keepdims=True)
    out = _make(s, "softmax", (a,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            dot = (g * out.data).sum(axis=ax, keepdims=True)
            if a.requires_grad:
                a._accum((g - dot) * out.data)
        out._backward = _bw
    return out


def logsumexp(a, axis, keepdims: bool = False) -> Tensor:
    """Max-shifted log-sum-exp along ``axis``; safe up to |x| ~ 1e4 and beyond."""
    a = _coerce(a)
    ax = _resolve_axis(axis, a.ndim)
    m = a.data.max(axis=ax, keepdims=True)
    e = np.exp(a.data - m)
    se = e.sum(axis=ax, keepdims=True)
    lse = m + np.log(se)
    w = e / se  # softmax weights, reused by the backward rule
    out = _make(lse if keepdims else np.squeeze(lse, axis=ax), "logsumexp", (a,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, ax)
            if a.requires_grad:
                a._accum(w * g)
        out._backward = _bw
    return out


def rmsnorm(z, gain: Tensor | None = None, axis: int = -2, eps: float = RMSNORM_EPS) -> Tensor:
    """Root-mean-square normalisation along ``axis``.

    With unit gain each normalised fibre has Euclidean norm sqrt(k) (k the
    extent of ``axis``), i.e. it lies on the radius-sqrt(k) hypersphere.
    A zero fibre is governed by ``eps`` and comes back near-zero rather than
    raising. ``gain`` (one weight per channel of ``axis``) is applied
    elementwise after normalisation; pass per-head gains with matching
    leading shape, a trailing length-1 axis is added automatically.
    """
    z = _coerce(z)
    ms = reduce_mean(mul(z, z), axis=axis, keepdims=True)
    inv = pow_scalar(add(ms, _coerce(eps, like=z)), -0.5)
    out = mul(z, inv)
    if gain is not None:
        gain = _coerce(gain, like=z)
        out = mul(out, reshape(gain, (*gain.data.shape, 1)))
    return out


# --- gradient oracle ---


def finite_diff(f: Callable[[Tensor], "Tensor | float"], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar-valued ``f`` at ``x``.

    Independent of the tape: evaluates ``f`` 2*size times on perturbed
    copies, in float64. Returns an ndarray shaped like ``x``.
    """
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar_value(f(Tensor(base.copy())))
        flat[i] = orig - h
        fm = _scalar_value(f(Tensor(base.copy())))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def _scalar_value(y) -> float:
    if isinstance(y, Tensor):
        return y.item()
    return float(y)
