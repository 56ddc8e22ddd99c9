"""Dense array arithmetic with reverse-mode gradients.

Every learned operation in the pipeline is assembled from the primitives in
this module.  A :class:`Tensor` wraps a numpy array; applying a primitive to
tensors that require gradients records a node that knows how to push an
output gradient back to its inputs.  :func:`backward` walks the recorded
graph in reverse topological order.

Shape rules are strict: elementwise primitives accept two tensors of equal
shape, or a tensor and a scalar.  Anything else must go through an explicit
:func:`broadcast_to`.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""


class NonFiniteError(ValueError):
    """Raised when a primitive receives NaN or infinite values."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """An n-d array that optionally tracks gradients."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteError(f"{op}: non-finite input")


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, tuple(parents), backward_fn)
    return out


def _is_scalar(x) -> bool:
    if isinstance(x, Tensor):
        return x.data.ndim == 0
    return np.ndim(x) == 0


def _unbroadcast_scalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    if t.data.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


def _binary_operands(op: str, a, b) -> tuple[Tensor, Tensor]:
    # plain python/numpy scalars adopt the tensor operand's dtype
    if not isinstance(a, Tensor) and isinstance(b, Tensor) and np.ndim(a) == 0:
        a = np.asarray(a, dtype=b.dtype)
    if not isinstance(b, Tensor) and isinstance(a, Tensor) and np.ndim(b) == 0:
        b = np.asarray(b, dtype=a.dtype)
    ta, tb = as_tensor(a), as_tensor(b)
    if ta.shape != tb.shape and not (_is_scalar(ta) or _is_scalar(tb)):
        raise ShapeError(f"{op}: shape mismatch {ta.shape} vs {tb.shape}")
    _check_finite(op, ta.data, tb.data)
    return ta, tb


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    ta, tb = _binary_operands("add", a, b)

    def bw(g):
        return _unbroadcast_scalar(g, ta), _unbroadcast_scalar(g, tb)

    return _make("add", ta.data + tb.data, (ta, tb), bw)


def sub(a, b) -> Tensor:
    ta, tb = _binary_operands("sub", a, b)

    def bw(g):
        return _unbroadcast_scalar(g, ta), _unbroadcast_scalar(-g, tb)

    return _make("sub", ta.data - tb.data, (ta, tb), bw)


def mul(a, b) -> Tensor:
    ta, tb = _binary_operands("mul", a, b)

    def bw(g):
        return _unbroadcast_scalar(g * tb.data, ta), _unbroadcast_scalar(g * ta.data, tb)

    return _make("mul", ta.data * tb.data, (ta, tb), bw)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_finite("sigmoid", x.data)
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)

    def bw(g):
        return (g * y * (1.0 - y),)

    return _make("sigmoid", y, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_finite("tanh", x.data)
    y = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - y * y),)

    return _make("tanh", y, (x,), bw)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_finite("relu", x.data)
    pos = x.data > 0
    y = np.where(pos, x.data, 0).astype(x.dtype)

    def bw(g):
        return (g * pos,)

    return _make("relu", y, (x,), bw)


def tabs(x: Tensor) -> Tensor:
    """Absolute value; the subgradient at 0 is 0."""
    x = as_tensor(x)
    _check_finite("abs", x.data)
    s = np.sign(x.data)

    def bw(g):
        return (g * s,)

    return _make("abs", np.abs(x.data), (x,), bw)


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check_finite("square", x.data)

    def bw(g):
        return (2.0 * g * x.data,)

    return _make("square", x.data * x.data, (x,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    _check_finite("sum", x.data)
    axes = _norm_axes(axis, x.ndim)
    y = np.asarray(x.data.sum(axis=axes, keepdims=keepdims))

    def bw(g):
        return (np.array(_expand_reduced(g, x.shape, axes, keepdims)),)

    return _make("sum", y, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    _check_finite("mean", x.data)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    y = np.asarray(x.data.mean(axis=axes, keepdims=keepdims))

    def bw(g):
        return (np.array(_expand_reduced(g, x.shape, axes, keepdims)) / n,)

    return _make("mean", y, (x,), bw)


def var(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divides by N)."""
    x = as_tensor(x)
    _check_finite("var", x.data)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    centered = x.data - x.data.mean(axis=axes, keepdims=True)
    y = np.asarray((centered * centered).mean(axis=axes, keepdims=keepdims))

    def bw(g):
        return (2.0 / n * centered * _expand_reduced(g, x.shape, axes, keepdims),)

    return _make("var", y, (x,), bw)


# ---------------------------------------------------------------------------
# normalization / probability
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite("softmax", x.data)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine pair."""
    x = as_tensor(x)
    _check_finite("layer_norm", x.data)
    c = x.shape[-1]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.shape != (c,):
            raise ShapeError(f"layer_norm: {name} shape {p.shape} vs feature size {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx_hat = g * gamma.data if gamma is not None else g
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        out = [gx]
        if gamma is not None:
            out.append((g * xhat).sum(axis=lead))
        if beta is not None:
            out.append(g.sum(axis=lead))
        return tuple(out)

    return _make("layer_norm", y, parents, bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., n, k] @ b[k, m]`` or ``a[..., n, k] @ b[..., k, m]`` with equal batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} vs {b.shape}")
    _check_finite("matmul", a.data, b.data)
    y = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make("matmul", y, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x[..., k] @ w[k, m] + b[m]``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: shape mismatch {x.shape} vs {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} vs {w.shape[1]}")
    _check_finite("linear", x.data, w.data)
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=lead)

    return _make("linear", y, parents, bw)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _tuple(v, n: int) -> tuple:
    return tuple(v) if isinstance(v, (tuple, list)) else (int(v),) * n


def _window(offset: tuple, stride: tuple, out: tuple) -> tuple:
    return (slice(None), slice(None)) + tuple(
        slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out))


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: tuple, pad: tuple) -> np.ndarray:
    nd = len(stride)
    ksz = w.shape[2:]
    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in pad])
    out = tuple((xp.shape[2 + i] - ksz[i]) // stride[i] + 1 for i in range(nd))
    if min(out) <= 0:
        raise ShapeError(f"conv: input {x.shape} too small for kernel {w.shape}")
    bsz, cout = x.shape[0], w.shape[0]
    npix = int(np.prod(out))
    y = np.zeros((bsz, cout, npix), dtype=np.result_type(x, w))
    for off in itertools.product(*[range(k) for k in ksz]):
        patch = xp[_window(off, stride, out)].reshape(bsz, x.shape[1], npix)
        y += np.matmul(w[(slice(None), slice(None)) + off], patch)
    return y.reshape((bsz, cout) + out)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, in_shape: tuple, stride: tuple,
                     pad: tuple) -> np.ndarray:
    nd = len(stride)
    ksz = w.shape[2:]
    padded = tuple(in_shape[2 + i] + 2 * pad[i] for i in range(nd))
    out = g.shape[2:]
    bsz, cin = in_shape[0], in_shape[1]
    gxp = np.zeros((bsz, cin) + padded, dtype=g.dtype)
    g2 = g.reshape(bsz, g.shape[1], -1)
    for off in itertools.product(*[range(k) for k in ksz]):
        wt = w[(slice(None), slice(None)) + off].T
        gxp[_window(off, stride, out)] += np.matmul(wt, g2).reshape((bsz, cin) + out)
    crop = (slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(pad, in_shape[2:]))
    return gxp[crop]


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, w_shape: tuple, stride: tuple,
                      pad: tuple) -> np.ndarray:
    ksz = w_shape[2:]
    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in pad])
    out = g.shape[2:]
    bsz = x.shape[0]
    g2 = g.reshape(bsz, g.shape[1], -1)
    gw = np.zeros(w_shape, dtype=g.dtype)
    for off in itertools.product(*[range(k) for k in ksz]):
        patch = xp[_window(off, stride, out)].reshape(bsz, x.shape[1], -1)
        gw[(slice(None), slice(None)) + off] = np.tensordot(g2, patch, axes=([0, 2], [0, 2]))
    return gw


def _conv_nd(op: str, nd: int, x, w, b, stride, padding) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != nd + 2 or w.ndim != nd + 2:
        raise ShapeError(f"{op}: expected {nd + 2}-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"{op}: channel mismatch {x.shape} vs {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"{op}: bias shape {b.shape} vs {w.shape[0]} output channels")
    stride, pad = _tuple(stride, nd), _tuple(padding, nd)
    if min(stride) < 1 or min(pad) < 0:
        raise ValueError(f"{op}: invalid stride {stride} or padding {pad}")
    _check_finite(op, x.data, w.data)
    y = _conv_forward(x.data, w.data, stride, pad)
    if b is not None:
        y += b.data.reshape((1, -1) + (1,) * nd)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = _conv_input_grad(g, w.data, x.shape, stride, pad)
        gw = _conv_weight_grad(x.data, g, w.shape, stride, pad)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0,) + tuple(range(2, nd + 2)))

    return _make(op, y, parents, bw)


def conv2d(x, w, b=None, stride=1, padding=0) -> Tensor:
    """x: (B, Cin, H, W); w: (Cout, Cin, kh, kw)."""
    return _conv_nd("conv2d", 2, x, w, b, stride, padding)


def conv3d(x, w, b=None, stride=1, padding=0) -> Tensor:
    """x: (B, Cin, D, H, W); w: (Cout, Cin, kd, kh, kw)."""
    return _conv_nd("conv3d", 3, x, w, b, stride, padding)


def _conv_transpose_nd(op: str, nd: int, x, w, b, stride, padding, output_padding) -> Tensor:
    # w layout (Cin, Cout, *k); equals the input-gradient of a forward conv
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != nd + 2 or w.ndim != nd + 2:
        raise ShapeError(f"{op}: expected {nd + 2}-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"{op}: channel mismatch {x.shape} vs {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"{op}: bias shape {b.shape} vs {w.shape[1]} output channels")
    stride, pad, opad = _tuple(stride, nd), _tuple(padding, nd), _tuple(output_padding, nd)
    if any(o >= s for o, s in zip(opad, stride)):
        raise ValueError(f"{op}: output_padding {opad} must be smaller than stride {stride}")
    _check_finite(op, x.data, w.data)
    ksz = w.shape[2:]
    out = tuple((x.shape[2 + i] - 1) * stride[i] - 2 * pad[i] + ksz[i] + opad[i] for i in range(nd))
    if min(out) <= 0:
        raise ShapeError(f"{op}: non-positive output size {out}")
    # w, read as a forward-conv weight, maps an `out`-shaped tensor onto x's shape
    wf = w.data
    full_shape = (x.shape[0], w.shape[1]) + out
    y = _conv_input_grad(x.data, wf, full_shape, stride, pad)
    if b is not None:
        y = y + b.data.reshape((1, -1) + (1,) * nd)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = _conv_forward(g, wf, stride, pad)
        # trailing output_padding rows can leave the forward window unaligned
        gx = gx[(slice(None), slice(None)) + tuple(slice(0, s) for s in x.shape[2:])]
        gw = _conv_weight_grad(g, x.data, wf.shape, stride, pad)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0,) + tuple(range(2, nd + 2)))

    return _make(op, y, parents, bw)


def conv_transpose2d(x, w, b=None, stride=1, padding=0, output_padding=0) -> Tensor:
    """x: (B, Cin, H, W); w: (Cin, Cout, kh, kw)."""
    return _conv_transpose_nd("conv_transpose2d", 2, x, w, b, stride, padding, output_padding)


def conv_transpose3d(x, w, b=None, stride=1, padding=0, output_padding=0) -> Tensor:
    """x: (B, Cin, D, H, W); w: (Cin, Cout, kd, kh, kw)."""
    return _conv_transpose_nd("conv_transpose3d", 3, x, w, b, stride, padding, output_padding)


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shape mismatch {ts[0].shape} vs {t.shape} on axis {ax}")
    _check_finite("concat", *[t.data for t in ts])
    y = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(ts)))

    return _make("concat", y, ts, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % (ts[0].ndim + 1)
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts], axis=ax)


def getitem(x: Tensor, key) -> Tensor:
    """Basic slicing and integer-array indexing along one axis."""
    x = as_tensor(x)
    y = np.array(x.data[key])
    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in parts)

    def bw(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[key] = g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _make("slice", y, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from exc

    def bw(g):
        return (g.reshape(x.shape),)

    return _make("reshape", y, (x,), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _make("transpose", np.transpose(x.data, axes), (x,), bw)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the only sanctioned way to mix shapes."""
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        y = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from exc
    lead = len(shape) - x.ndim
    stretched = tuple(i + lead for i, n in enumerate(x.shape) if n == 1 and shape[i + lead] != 1)

    def bw(g):
        gx = g.sum(axis=tuple(range(lead)) + stretched, keepdims=True)
        return (gx.reshape(x.shape),)

    return _make("broadcast_to", np.array(y), (x,), bw)


def resample(x: Tensor, weights: sp.spmatrix) -> Tensor:
    """Sparse linear resampling ``x[C, M] @ weights[M, Q] -> [C, Q]``.

    Interpolated feature fetches (bilinear, trilinear) are expressed as a
    sparse weight matrix built from pure geometry, so gradients only flow
    into the sampled array.
    """
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"resample: shape mismatch {x.shape} vs {weights.shape}")
    _check_finite("resample", x.data)
    w = weights.tocsr()
    y = np.asarray((w.T @ x.data.T).T, dtype=x.dtype)

    def bw(g):
        return (np.asarray((w @ g.T).T, dtype=g.dtype),)

    return _make("resample", y, (x,), bw)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


class GradTape:
    """Reverse-topological schedule of the graph reachable from one output."""

    def __init__(self, output: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in t._node.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        self.nodes = order

    def run(self, output: Tensor, seed: np.ndarray) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {id(output): seed}
        leaves: dict[int, np.ndarray] = {}
        for t in reversed(self.nodes):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._node is None:
                leaves[id(t)] = g
                continue
            for p, gp in zip(t._node.parents, t._node.backward_fn(g)):
                if not p.requires_grad:
                    continue
                gp = np.asarray(gp, dtype=p.dtype)
                if gp.shape != p.shape:
                    raise ShapeError(f"{t._node.op}: backward produced {gp.shape} for input {p.shape}")
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + gp
                else:
                    grads[id(p)] = gp
        return leaves


def _check_scalar(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    _check_scalar(loss)
    if not loss.requires_grad:
        return
    tape = GradTape(loss)
    leaves = tape.run(loss, np.ones_like(loss.data))
    for t in tape.nodes:
        if t._node is None and id(t) in leaves:
            t.grad = leaves[id(t)] if t.grad is None else t.grad + leaves[id(t)]


def grad(loss: Tensor, inputs: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar loss; unreachable inputs get zeros."""
    _check_scalar(loss)
    inputs = list(inputs)
    leaves: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        leaves = GradTape(loss).run(loss, np.ones_like(loss.data))
    return [leaves.get(id(t), np.zeros_like(t.data)) for t in inputs]


def finite_difference_grad(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                           epsilon: float = 1e-5, indices: dict[int, np.ndarray] | None = None,
                           relative: bool = True) -> list[np.ndarray]:
    """Central differences of a scalar-valued ``fn`` w.r.t. each input array.

    ``epsilon`` is scaled by ``max(1, |x_i|)`` per element when ``relative``.
    ``indices`` optionally restricts input ``j`` to a set of flat positions;
    the remaining entries of that gradient are left as NaN.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    out = []
    with no_grad():
        for j, a in enumerate(arrays):
            g = np.full(a.shape, np.nan) if indices and j in indices else np.zeros(a.shape)
            flat = a.reshape(-1)
            positions = indices[j] if indices and j in indices else range(flat.size)
            for i in positions:
                h = epsilon * max(1.0, abs(flat[i])) if relative else epsilon
                old = flat[i]
                flat[i] = old + h
                fp = float(fn(*[Tensor(x) for x in arrays]).data)
                flat[i] = old - h
                fm = float(fn(*[Tensor(x) for x in arrays]).data)
                flat[i] = old
                g.reshape(-1)[i] = (fp - fm) / (2.0 * h)
            out.append(g)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error, ignoring NaN entries of ``numeric``."""
    keep = ~np.isnan(numeric)
    a, n = analytic[keep], numeric[keep]
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-12)
    return float(np.abs(a - n).max() / scale)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "abs": tabs,
    "square": square,
    "sum": tsum,
    "mean": mean,
    "var": var,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "matmul": matmul,
    "linear": linear,
    "conv2d": conv2d,
    "conv3d": conv3d,
    "conv_transpose2d": conv_transpose2d,
    "conv_transpose3d": conv_transpose3d,
    "concat": concat,
    "slice": getitem,
    "reshape": reshape,
    "transpose": transpose,
    "broadcast_to": broadcast_to,
    "resample": resample,
}


def primitive_forward(op_id: str, *inputs, **attrs) -> Tensor:
    try:
        fn = PRIMITIVES[op_id]
    except KeyError:
        raise KeyError(f"unknown primitive {op_id!r}") from None
    return fn(*inputs, **attrs)
