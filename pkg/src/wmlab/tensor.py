"""Minimal reverse-mode autodiff on numpy arrays.

Every kernel validates its output for NaN/Inf and raises NumericsError naming
the producing kernel; silent non-finite propagation is treated as a bug, not a
recoverable state. Training runs in float32, gradient checking in float64.

Live tensor bytes are tracked in a process-wide counter so benchmarks can
report peak parameter+activation residency without touching the OS allocator.
"""

from __future__ import annotations

import contextlib
import math
import threading
import weakref

import numpy as np

FLOAT32 = np.float32
FLOAT64 = np.float64


class NumericsError(ArithmeticError):
    """A kernel produced NaN/Inf, or was fed a non-finite gradient."""


class ShapeError(ValueError):
    """Operand shapes violate a kernel's contract."""


class _AllocTracker:
    """Counts live tensor payload bytes; peak is monotone until reset."""

    def __init__(self):
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def add(self, n: int):
        with self._lock:
            self.current += n
            if self.current > self.peak:
                self.peak = self.current

    def sub(self, n: int):
        with self._lock:
            self.current -= n

    def reset_peak(self):
        with self._lock:
            self.peak = self.current


allocations = _AllocTracker()

_grad_enabled = threading.local()


def _grad_on() -> bool:
    return getattr(_grad_enabled, "value", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (sampling / evaluation)."""
    prev = _grad_on()
    _grad_enabled.value = False
    try:
        yield
    finally:
        _grad_enabled.value = prev


def _check_finite(arr: np.ndarray, op: str):
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"kernel '{op}' produced non-finite values")


class Tensor:
    """Dense array node in the autodiff graph.

    Immutable once created by a kernel; gradient accumulation writes only to
    `.grad`. `data` may be float32 or float64; kernels preserve the dtype of
    their inputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op",
                 "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents=(), _backward=None, op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(FLOAT32)
        self.data = arr
        _check_finite(arr, op)
        self.requires_grad = requires_grad and _grad_on()
        self.grad = None
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.op = op
        allocations.add(arr.nbytes)
        weakref.finalize(self, allocations.sub, arr.nbytes)

    # -- basic introspection ------------------------------------------------
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
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self.op})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, op="detach")

    def zero_grad(self):
        self.grad = None

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise RuntimeError("backward() without an explicit gradient "
                                   "requires a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            _check_finite(node.grad, f"{node.op} (gradient)")
            node._backward(node.grad)

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad = self.grad + g

    # -- operator sugar -----------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only square is supported")
        return mul(self, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _result(data, parents, backward, op) -> Tensor:
    req = _grad_on() and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req,
                  _parents=tuple(parents) if req else (),
                  _backward=backward if req else None, op=op)


def _promote(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.dtype != b.dtype:
        target = np.promote_types(a.dtype, b.dtype)
        if a.dtype != target:
            a = cast(a, target)
        if b.dtype != target:
            b = cast(b, target)
    return a, b


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape` by summing expanded axes."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise kernels ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _promote(a, b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _result(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _promote(a, b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _result(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _promote(a, b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _result(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _promote(a, b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a.accumulate_grad(-g)

    return _result(-a.data, (a,), backward, "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        a.accumulate_grad(g * out)

    return _result(out, (a,), backward, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def backward(g):
        a.accumulate_grad(g / a.data)

    return _result(out, (a,), backward, "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        a.accumulate_grad(g / (2.0 * out))

    return _result(out, (a,), backward, "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        a.accumulate_grad(g * (1.0 - out * out))

    return _result(out, (a,), backward, "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        sech2 = 1.0 - t * t
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        da = 0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
        a.accumulate_grad(g * da)

    return _result(out, (a,), backward, "gelu")


def cast(a, dtype) -> Tensor:
    a = as_tensor(a)
    out = a.data.astype(dtype)

    def backward(g):
        a.accumulate_grad(g.astype(a.dtype))

    return _result(out, (a,), backward, "cast")


# -- contraction / shape kernels ----------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product; leading batch extents broadcast."""
    a, b = _promote(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return _result(out, (a, b), backward, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        a.accumulate_grad(g.reshape(a.shape))

    return _result(out, (a,), backward, "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        a.accumulate_grad(np.transpose(g, inv))

    return _result(out, (a,), backward, "transpose")


def getitem(a, idx) -> Tensor:
    """Basic slicing / integer indexing; backward scatters into zeros."""
    a = as_tensor(a)
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a.accumulate_grad(full)

    return _result(out, (a,), backward, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(sl)])

    return _result(out, tuple(tensors), backward, "concat")


def expand(a, shape) -> Tensor:
    """Broadcast to `shape` (copying); backward sums over expanded axes."""
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape).copy()

    def backward(g):
        a.accumulate_grad(_unbroadcast(g, a.shape))

    return _result(out, (a,), backward, "expand")


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

    return _result(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size / out.size

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad((np.broadcast_to(g, a.shape) / count).astype(a.dtype, copy=False))

    return _result(out, (a,), backward, "mean")


# -- fused neural-net kernels --------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    """Stable softmax along `axis`; rows sum to 1 for any finite input."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a.accumulate_grad(out * (g - dot))

    return _result(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        a.accumulate_grad(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _result(out, (a,), backward, "log_softmax")


LAYERNORM_EPS = 1e-5


def layer_norm(a, gain=None, bias=None, axis: int = -1, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize to zero mean / unit variance along `axis`, then affine."""
    a = as_tensor(a)
    if axis != -1 and axis != a.ndim - 1:
        raise ShapeError("layer_norm normalizes the trailing axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = a.shape[-1]

    g_t = as_tensor(gain, dtype=a.dtype) if gain is not None else None
    b_t = as_tensor(bias, dtype=a.dtype) if bias is not None else None
    if g_t is not None and g_t.shape != (n,):
        raise ShapeError(f"gain shape {g_t.shape} does not match normalized extent {n}")
    if b_t is not None and b_t.shape != (n,):
        raise ShapeError(f"bias shape {b_t.shape} does not match normalized extent {n}")

    out = xhat
    if g_t is not None:
        out = out * g_t.data
    if b_t is not None:
        out = out + b_t.data

    parents = [a] + [t for t in (g_t, b_t) if t is not None]

    def backward(g):
        gx = g * g_t.data if g_t is not None else g
        # d xhat -> d x for per-slice standardization
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        if a.requires_grad:
            a.accumulate_grad(inv * (gx - m1 - xhat * m2))
        if g_t is not None and g_t.requires_grad:
            g_t.accumulate_grad((g * xhat).reshape(-1, n).sum(axis=0))
        if b_t is not None and b_t.requires_grad:
            b_t.accumulate_grad(g.reshape(-1, n).sum(axis=0))

    return _result(out, tuple(parents), backward, "layer_norm")


def embedding(table, ids) -> Tensor:
    """Row gather from (V, h) `table` by integer array `ids`."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ShapeError(f"token id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        table.accumulate_grad(full)

    return _result(out, (table,), backward, "embedding")


def take_along(a, idx, axis: int = -1) -> Tensor:
    """Differentiable np.take_along_axis for integer index arrays."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g, axis=axis)
        a.accumulate_grad(full)

    return _result(out, (a,), backward, "take_along")


def rope_rotate(a, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate half-split pairs of the trailing dim by precomputed angles.

    `a` is (..., d) with even d; cos/sin broadcast against (..., d/2). The
    backward pass is the inverse rotation (angles negated), so the op is an
    exact isometry in both directions.
    """
    a = as_tensor(a)
    d = a.shape[-1]
    if d % 2:
        raise ShapeError("rope_rotate needs an even trailing dimension")
    half = d // 2
    x1 = a.data[..., :half]
    x2 = a.data[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)

    def backward(g):
        g1 = g[..., :half]
        g2 = g[..., half:]
        a.accumulate_grad(np.concatenate([g1 * cos + g2 * sin,
                                          g2 * cos - g1 * sin], axis=-1))

    return _result(out, (a,), backward, "rope_rotate")
