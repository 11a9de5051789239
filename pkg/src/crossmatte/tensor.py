"""Dense tensors with reverse-mode automatic differentiation.

Everything else in the package is built on this closed op set. Data lives in
row-major numpy arrays (float64 for verification work, float32 for training).
Ops are pure: they never mutate their inputs, and they raise instead of
emitting NaN/Inf on domain violations (log of a non-positive value, division
by zero, ...).

Gradient semantics: ``backward`` accumulates into ``.grad`` of every
reachable tensor with ``requires_grad``; call ``zero_grads`` (or
``ParamStore.zero_grads``) between steps. Convolution uses the
cross-correlation convention (no kernel flip). Reductions are sequential
row-major sums; bit-exactness across platforms is not promised, only
tolerance-level agreement.

Threading: ops are pure and safe to run concurrently on distinct graphs
(the grad-enabled flag is a context variable), but a single graph must be
built and differentiated by one thread.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf, expit as _expit


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """Input values lie outside the op's mathematical domain."""


_grad_enabled = contextvars.ContextVar("crossmatte_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference/eval paths)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def _coerce(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float64)


class Tensor:
    """A dense n-dimensional value, optionally tracked by the autodiff graph.

    Tensors are immutable from the caller's perspective; ops return new
    tensors. ``grad`` is populated by ``backward`` and accumulates across
    calls until reset.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

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

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar; the named functions below are the op surface
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap an op result, attaching graph edges only when grads can flow."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    if p != int(p) and np.any(a.data < 0):
        raise DomainError(f"power: negative base with non-integer exponent {p}")
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: input must be non-negative")
    out = np.sqrt(a.data)

    def vjp(g):
        if np.any(out == 0):
            raise DomainError("sqrt: gradient undefined at zero")
        return (g * 0.5 / out,)

    return _make(out, (a,), vjp)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    # np.maximum propagates NaN (np.where on a comparison would hide it)
    return _make(np.maximum(a.data, 0), (a,), lambda g: (g * (a.data > 0),))


def gelu(a) -> Tensor:
    """Exact (erf-form) Gaussian error linear unit."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x / math.sqrt(2.0)))
    out = x * cdf
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return _make(out.astype(x.dtype, copy=False), (a,),
                 lambda g: ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _expit(a.data).astype(a.data.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through the interior, zero outside."""
    a = _as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size and -1 not in shape:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of one axis; gradient scatters back into place."""
    a = _as_tensor(a)
    axis = axis % a.ndim
    if start < 0 or length < 1 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow: slice [{start}:{start + length}] outside axis {axis} "
            f"of shape {a.shape}")
    index = tuple(slice(None) if i != axis else slice(start, start + length)
                  for i in range(a.ndim))
    out = a.data[index]

    def vjp(g):
        gx = np.zeros(a.shape, dtype=g.dtype)
        gx[index] = g
        return (gx,)

    return _make(out, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    nd = tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != nd:
            raise ShapeError(f"concat: rank mismatch {tensors[0].shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(out, tuple(tensors), vjp)


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False),)

    return _make(np.asarray(out), (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes], dtype=np.int64))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return ((np.broadcast_to(g, a.shape) / count).astype(a.data.dtype, copy=False),)

    return _make(np.asarray(out), (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents disagree, {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch extents do not broadcast, {a.shape} x {b.shape}") from None
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(out, (a, b), vjp)


def softmax(x, axis: int = -1) -> Tensor:
    """Shift-invariant softmax along ``axis``; rows are positive, sum to 1."""
    x = _as_tensor(x)
    axis = axis % x.ndim
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis per token to zero mean/unit variance, then
    apply the gamma/beta affine."""
    x = _as_tensor(x)
    gamma = _as_tensor(gamma, x)
    beta = _as_tensor(beta, x)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match channels ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx.astype(x.data.dtype, copy=False), dgamma, dbeta)

    return _make(out.astype(x.data.dtype, copy=False), (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# spatial ops


def _pad_spec(pad) -> tuple[int, int, int, int]:
    if isinstance(pad, int):
        return (pad, pad, pad, pad)
    top, bottom, left, right = pad
    return (int(top), int(bottom), int(left), int(right))


def pad2d(x, pad, mode: str = "zero") -> Tensor:
    """Pad the two trailing spatial axes. ``mode`` is ``zero`` or ``reflect``."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"pad2d: need at least 2 axes, got {x.shape}")
    top, bottom, left, right = _pad_spec(pad)
    if (top, bottom, left, right) == (0, 0, 0, 0):
        return _make(x.data, (x,), lambda g: (g,))
    width = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    h, w = x.shape[-2], x.shape[-1]
    if mode == "zero":
        out = np.pad(x.data, width)

        def vjp(g):
            sl = (Ellipsis, slice(top, top + h), slice(left, left + w))
            return (g[sl],)

    elif mode == "reflect":
        # numpy reflect cycles when pad exceeds the extent and repeats
        # size-1 axes; the index map below reproduces both, so the adjoint
        # scatter stays exact.
        out = np.pad(x.data, width, mode="reflect")
        src_r = np.pad(np.arange(h), (top, bottom), mode="reflect")
        src_c = np.pad(np.arange(w), (left, right), mode="reflect")

        def vjp(g):
            gx = np.zeros(x.shape, dtype=g.dtype)
            np.add.at(gx, (Ellipsis, src_r[:, None], src_c[None, :]), g)
            return (gx,)

    else:
        raise ValueError(f"pad2d: unknown mode {mode!r}")
    return _make(out, (x,), vjp)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (mainstream framework convention, no kernel flip).

    x: [B, Cin, H, W]; w: [Cout, Cin, kh, kw]; b: [Cout] or None.
    Output spatial extents are floor((H + 2*padding - kh)/stride) + 1.
    """
    x = _as_tensor(x)
    w = _as_tensor(w, x)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input/kernel, got {x.shape} and {w.shape}")
    bt, cin, h, width_in = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {cin_w}")
    if b is not None:
        b = _as_tensor(b, x)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    stride = int(stride)
    padding = int(padding)
    hp, wp = h + 2 * padding, width_in + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: padded extents {(hp, wp)} smaller than kernel {(kh, kw)}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, (bt, cin, oh, ow, kh, kw), (s0, s1, s2 * stride, s3 * stride, s2, s3))
    # [B, oh*ow, Cin*kh*kw]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(bt, oh * ow, cin * kh * kw)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.transpose(0, 2, 1).reshape(bt, cout, oh, ow)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(bt, oh * ow, cout)
        dw = np.tensordot(g2, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
        dcols = (g2 @ wmat).reshape(bt, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros((bt, cin, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    dcols[:, :, :, :, i, j]
        dx = dxp[:, :, padding:padding + h, padding:padding + width_in] if padding else dxp
        grads = [dx.astype(x.data.dtype, copy=False), dw.astype(w.data.dtype, copy=False)]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, vjp)


def _resize_axis(in_size: int, out_size: int, align_corners: bool):
    """Source indices and interpolation weights for one spatial axis."""
    if align_corners:
        if out_size == 1:
            src = np.zeros(1)
        else:
            src = np.arange(out_size) * ((in_size - 1) / (out_size - 1))
    else:
        src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
        src = np.clip(src, 0.0, in_size - 1.0)
    lo = np.clip(np.floor(src).astype(np.int64), 0, in_size - 1)
    hi = np.minimum(lo + 1, in_size - 1)
    w_hi = src - lo
    return lo, hi, 1.0 - w_hi, w_hi


def bilinear_resize(x, out_h: int, out_w: int, align_corners: bool = False) -> Tensor:
    """Bilinear interpolation of the trailing two axes of [B, C, H, W]."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize: expected [B,C,H,W], got {x.shape}")
    out_h, out_w = int(out_h), int(out_w)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: invalid target size {(out_h, out_w)}")
    b, c, h, w = x.shape
    rlo, rhi, wr_lo, wr_hi = _resize_axis(h, out_h, align_corners)
    clo, chi, wc_lo, wc_hi = _resize_axis(w, out_w, align_corners)
    wr_lo_ = wr_lo[None, None, :, None]
    wr_hi_ = wr_hi[None, None, :, None]
    rows = wr_lo_ * x.data[:, :, rlo, :] + wr_hi_ * x.data[:, :, rhi, :]
    out = wc_lo * rows[:, :, :, clo] + wc_hi * rows[:, :, :, chi]

    def vjp(g):
        grows = np.zeros((b, c, out_h, w), dtype=np.float64)
        np.add.at(grows, (slice(None), slice(None), slice(None), clo), g * wc_lo)
        np.add.at(grows, (slice(None), slice(None), slice(None), chi), g * wc_hi)
        gx = np.zeros((b, c, h, w), dtype=np.float64)
        np.add.at(gx, (slice(None), slice(None), rlo, slice(None)), grows * wr_lo_)
        np.add.at(gx, (slice(None), slice(None), rhi, slice(None)), grows * wr_hi_)
        return (gx.astype(x.data.dtype, copy=False),)

    return _make(out.astype(x.data.dtype, copy=False), (x,), vjp)


# ---------------------------------------------------------------------------
# autodiff driver


def _toposort(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar; accumulates into ``.grad``."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = flowing.get(id(parent))
            flowing[id(parent)] = pg if acc is None else acc + pg


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named map of trainable tensors. Iteration order is sorted by name."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def param(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def tensors(self) -> list[Tensor]:
        return [self._params[n] for n in self.names()]

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.size for t in self._params.values())


# ---------------------------------------------------------------------------
# initializers


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=np.float64) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std (hard truncation)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def he_normal(rng: np.random.Generator, shape, fan_in: int,
              dtype=np.float64) -> np.ndarray:
    return trunc_normal(rng, shape, std=math.sqrt(2.0 / fan_in), dtype=dtype)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    """Result of comparing analytic gradients against central differences."""

    max_rel_err: float
    tol: float
    h: float
    per_input: list[float] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol


def _fd_rel_err(analytic: float, numeric: float) -> float:
    # scale-guarded relative error: absolute below magnitude 1
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def grad_check(f, x, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare the analytic gradient of scalar-valued ``f`` against central
    finite differences (f(x+h e_i) - f(x-h e_i)) / 2h.

    ``x`` is a tensor or a sequence of tensors. They are perturbed in place
    (and restored afterwards), so ``f`` may either take them as arguments or
    close over them; this lets the same checker drive both free functions
    and parameters bound inside a model. Checking runs in float64 regardless
    of the tensors' dtype. The report carries the worst scale-guarded
    relative error and never raises on mismatch; gradient state of other
    tensors touched by ``f`` is left unspecified.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.data, t.grad, t.requires_grad) for t in xs]
    for t in xs:
        t.data = t.data.astype(np.float64)  # fresh contiguous copy
        t.grad = None
        t.requires_grad = True
    try:
        out = f(*xs)
        if out.data.size != 1:
            raise ShapeError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
        backward(out)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

        def feval() -> float:
            with no_grad():
                return float(f(*xs).data.reshape(()))

        per_input: list[float] = []
        worst = 0.0
        for leaf, ana in zip(xs, analytic):
            flat = leaf.data.reshape(-1)
            ana_flat = ana.reshape(-1)
            worst_here = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = feval()
                flat[i] = orig - h
                f_minus = feval()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                worst_here = max(worst_here, _fd_rel_err(float(ana_flat[i]), numeric))
            per_input.append(worst_here)
            worst = max(worst, worst_here)
    finally:
        for t, (data, grad, req) in zip(xs, saved):
            t.data = data
            t.grad = grad
            t.requires_grad = req
    return GradCheckReport(max_rel_err=worst, tol=tol, h=h, per_input=per_input)
