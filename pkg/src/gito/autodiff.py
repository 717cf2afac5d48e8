"""Dense tensors with tape-based reverse-mode differentiation.

Everything trainable in this package lives on top of this module: a
``Tensor`` wraps a numpy array, and every differentiable primitive records
its backward rule on a per-thread :class:`Tape`.  The tape is linear (ops
are appended in execution order, which is already a topological order), is
consumed by :func:`backward`, and never persists across forward passes.

Precision is a construction choice: gradient tests run in float64, training
defaults to float32.
"""

from __future__ import annotations

import math
import threading

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "active_tape",
    "backward",
    "no_grad",
    "tensor",
    "matmul",
    "concat",
    "softmax",
    "gelu",
    "leaky_relu",
    "layer_norm",
    "gather",
    "scatter_add",
    "slice_cols",
    "clamp_min",
    "exp",
    "sqrt",
    "finite_difference_gradient",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes cannot be combined."""


class Tape:
    """Ordered record of executed primitives for one forward pass."""

    __slots__ = ("_entries", "_produced")

    def __init__(self):
        self._entries = []
        self._produced = set()

    def __len__(self):
        return len(self._entries)

    def record(self, out, inputs, rule):
        self._entries.append((out, inputs, rule))
        self._produced.add(id(out))

    def reset(self):
        self._entries.clear()
        self._produced.clear()


_state = threading.local()


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = Tape()
        _state.grad_enabled = True
    return _state


def active_tape() -> Tape:
    """The calling thread's tape; each thread records independently."""
    return _tls().tape


def grad_enabled() -> bool:
    return _tls().grad_enabled


class no_grad:
    """Context manager that suspends tape recording on this thread."""

    def __enter__(self):
        s = _tls()
        self._prev = s.grad_enabled
        s.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls().grad_enabled = self._prev
        return False


class Tensor:
    """Dense row-major float array, optionally tracked for gradients.

    ``grad`` is lazily allocated: it stays ``None`` until :func:`backward`
    first deposits a gradient, and accumulates across backward calls until
    ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _coerce(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _check_same_dtype(a, b):
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")


def _make(data, *inputs):
    """Wrap op output; caller records the rule via _record."""
    req = grad_enabled() and any(t.requires_grad for t in inputs)
    return Tensor(data, requires_grad=req)


def _record(out, inputs, rule):
    if out.requires_grad:
        active_tape().record(out, inputs, rule)


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_op(a, b, fwd, name):
    _check_same_dtype(a, b)
    try:
        data = fwd(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None
    return data


# -- elementwise primitives ---------------------------------------------------


def add(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = _coerce(b, a.dtype)
    out = _make(_broadcast_op(a, b, np.add, "add"), a, b)
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = _coerce(b, a.dtype)
    out = _make(_broadcast_op(a, b, np.subtract, "sub"), a, b)
    _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = _coerce(b, a.dtype)
    out = _make(_broadcast_op(a, b, np.multiply, "mul"), a, b)
    ad, bd = a.data, b.data
    _record(out, (a, b), lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))
    return out


def div(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = _coerce(b, a.dtype)
    out = _make(_broadcast_op(a, b, np.divide, "div"), a, b)
    ad, bd = a.data, b.data
    _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)),
    )
    return out


def neg(a):
    out = _make(-a.data, a)
    _record(out, (a,), lambda g: (-g,))
    return out


def exp(a):
    out = _make(np.exp(a.data), a)
    y = out.data
    _record(out, (a,), lambda g: (g * y,))
    return out


def sqrt(a):
    out = _make(np.sqrt(a.data), a)
    y = out.data
    _record(out, (a,), lambda g: (g * (0.5 / y),))
    return out


def clamp_min(a, floor):
    """Elementwise max(a, floor); gradient passes where a >= floor."""
    out = _make(np.maximum(a.data, floor), a)
    mask = a.data >= floor
    _record(out, (a,), lambda g: (g * mask,))
    return out


def gelu(a):
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = _make(x * cdf, a)

    def rule(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    _record(out, (a,), rule)
    return out


def leaky_relu(a, negative_slope=0.2):
    x = a.data
    out = _make(np.where(x >= 0, x, negative_slope * x), a)
    _record(out, (a,), lambda g: (g * np.where(x >= 0, 1.0, negative_slope).astype(x.dtype),))
    return out


# -- matmul / shape -----------------------------------------------------------


def matmul(a, b):
    _check_same_dtype(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    out = _make(a.data @ b.data, a, b)
    ad, bd = a.data, b.data
    _record(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))
    return out


def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    orig = a.shape
    out = _make(a.data.reshape(shape), a)
    _record(out, (a,), lambda g: (g.reshape(orig),))
    return out


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    out = _make(a.data.transpose(axes), a)
    _record(out, (a,), lambda g: (g.transpose(inv),))
    return out


def concat(tensors, axis=-1):
    """Concatenate along the last axis."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    if axis not in (-1, tensors[0].ndim - 1):
        raise ShapeError("concat supports the last axis only")
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t)
    data = np.concatenate([t.data for t in tensors], axis=-1)
    out = _make(data, *tensors)
    sizes = [t.shape[-1] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=-1))

    _record(out, tuple(tensors), rule)
    return out


def slice_cols(a, start, stop):
    """Contiguous slice of the last axis."""
    out = _make(a.data[..., start:stop], a)
    shape = a.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    _record(out, (a,), rule)
    return out


# -- reductions ----------------------------------------------------------------


def tensor_sum(a, axis=None, keepdims=False):
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), a)
    shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    _record(out, (a,), rule)
    return out


def tensor_mean(a, axis=None, keepdims=False):
    out = _make(a.data.mean(axis=axis, keepdims=keepdims), a)
    shape = a.shape
    n = a.data.size if axis is None else shape[axis]

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    _record(out, (a,), rule)
    return out


# -- softmax / layer norm -------------------------------------------------------


def softmax(a, axis=-1):
    """Numerically stable softmax along ``axis``."""
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, a)

    def rule(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    _record(out, (a,), rule)
    return out


def layer_norm(a, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    x = a.data
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    out = _make(xhat, a)

    def rule(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    _record(out, (a,), rule)
    return out


# -- indexed ops ----------------------------------------------------------------


def gather(a, index, axis=0):
    """Select rows (axis 0) by integer index array."""
    if axis != 0:
        raise ShapeError("gather supports axis 0 only")
    idx = np.asarray(index, dtype=np.int64)
    out = _make(a.data[idx], a)
    shape = a.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    _record(out, (a,), rule)
    return out


def scatter_add(a, index, num_segments, axis=0):
    """Sum rows of ``a`` into ``num_segments`` output rows by index."""
    if axis != 0:
        raise ShapeError("scatter_add supports axis 0 only")
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape[0] != a.shape[0]:
        raise ShapeError(f"scatter_add: {idx.shape[0]} indices for {a.shape[0]} rows")
    data = np.zeros((num_segments,) + a.shape[1:], dtype=a.dtype)
    np.add.at(data, idx, a.data)
    out = _make(data, a)
    _record(out, (a,), lambda g: (g[idx],))
    return out


# -- backward -------------------------------------------------------------------


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requiring leaf.

    The active tape is consumed and reset.  Only leaf tensors (those not
    produced by a taped op this pass) retain gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    grads = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    for out, inputs, rule in reversed(tape._entries):
        g = grads.pop(id(out), None)
        holders.pop(id(out), None)
        if g is None:
            continue
        for t, ig in zip(inputs, rule(g)):
            if ig is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
                holders[key] = t
    for key, t in holders.items():
        if t.requires_grad and key not in tape._produced:
            g = np.asarray(grads[key], dtype=t.dtype)
            t.grad = g.copy() if t.grad is None else t.grad + g
    tape.reset()


def finite_difference_gradient(f, x, eps=1e-6):
    """Central-difference gradient of scalar ``f`` w.r.t. every entry of ``x``.

    The independent oracle for all gradient tests: evaluates ``f`` twice per
    coordinate and never touches the tape.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = x.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _as_scalar(f(x))
            flat[i] = orig - eps
            fm = _as_scalar(f(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
    return Tensor(grad)


def _as_scalar(value):
    if isinstance(value, Tensor):
        return value.item()
    return float(value)
