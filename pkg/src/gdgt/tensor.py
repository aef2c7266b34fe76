"""Dense tensors with tape-based reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
one gradient per parent. ``Tensor.backward`` walks the tape in reverse
topological order and accumulates into ``.grad``.

Precision is a property of the tensor: data stays in whatever float dtype
it was created with (float32 by default, float64 for verification), and
ops never silently promote.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.special import erf

from .errors import ConfigError, DimensionError, NumericError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    # ------------------------------------------------------------------ basics
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
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # ---------------------------------------------------------------- backward
    def backward(self, grad=None, retain_graph: bool = False):
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable tensor."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

        order = []
        seen = set()
        stack = [(self, False)]
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
                if p is not None and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is not None:
                    node.grad = node.grad + g
                else:
                    # leaves keep a private copy; intermediate grads are never mutated
                    node.grad = np.array(g) if node._backward is None else g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if p is None or pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
            if not retain_graph:
                node._parents = ()
                node._backward = None

    # --------------------------------------------------------------- operators
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def abs(self):
        return tabs(self)

    def exp(self):
        return exp(self)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


# -------------------------------------------------------------------- helpers
def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def _make(data: np.ndarray, parents: Sequence, backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p is not None and p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ------------------------------------------------------------- elementwise ops
def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return _make(a.data**p, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    out = (x * cdf).astype(x.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return _make(out, (a,), bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape),)

    return _make(out, (a,), bw)


# ------------------------------------------------------------------ shape ops
def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int)) or i is Ellipsis for i in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw)


def take(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis; backward scatters with a dense one-hot product."""
    axis = axis % a.ndim
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)

    def bw(g):
        n_in = a.shape[axis]
        if indices.ndim == 1 and n_in * indices.size <= 1 << 22:
            onehot = np.zeros((indices.size, n_in), dtype=g.dtype)
            onehot[np.arange(indices.size), indices] = 1
            gm = np.tensordot(np.moveaxis(g, axis, -1), onehot, axes=([-1], [0]))
            return (np.moveaxis(gm, -1, axis),)
        full = np.zeros(np.moveaxis(a.data, axis, 0).shape, dtype=g.dtype)
        gi = np.moveaxis(g, axis, 0).reshape((indices.size,) + full.shape[1:])
        np.add.at(full, indices.ravel(), gi)
        return (np.moveaxis(full, 0, axis),)

    return _make(out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def _pad_indices(n: int, before: int, after: int, mode: str) -> np.ndarray:
    idx = np.arange(-before, n + after)
    if mode == "replicate":
        return np.clip(idx, 0, n - 1)
    if mode == "reflect":
        if n == 1:
            return np.zeros_like(idx)
        period = 2 * (n - 1)
        idx = np.mod(idx, period)
        return np.where(idx >= n, period - idx, idx)
    raise ConfigError(f"unknown padding mode {mode!r}")


def pad2d(x: Tensor, pad: tuple[int, int, int, int], mode: str = "zero") -> Tensor:
    """Pad the last two axes by (top, bottom, left, right).

    ``mode`` is ``"zero"``, ``"replicate"`` or ``"reflect"``. Reflection
    folds periodically, so pads wider than the extent are allowed.
    """
    top, bottom, left, right = pad
    if min(pad) < 0:
        raise ConfigError(f"negative padding {pad}")
    if not any(pad):
        return x
    if mode == "zero":
        widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
        h, w = x.shape[-2:]

        def bw(g):
            return (g[..., top : top + h, left : left + w],)

        return _make(np.pad(x.data, widths), (x,), bw)
    out = x
    if top or bottom:
        out = take(out, _pad_indices(x.shape[-2], top, bottom, mode), axis=-2)
    if left or right:
        out = take(out, _pad_indices(x.shape[-1], left, right, mode), axis=-1)
    return out


# -------------------------------------------------------------- linear algebra
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = 1, eps: float = 1e-5) -> Tensor:
    """Normalize over one axis, then apply a per-channel affine map."""
    axis = axis % x.ndim
    n = x.shape[axis]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match extent {n}")
    bshape = [1] * x.ndim
    bshape[axis] = n
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gm = gamma.data.reshape(bshape)
    out = xhat * gm + beta.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gm
            gx = inv * (gh - gh.mean(axis=axis, keepdims=True) - xhat * (gh * xhat).mean(axis=axis, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=red)
        if beta.requires_grad:
            gb = g.sum(axis=red)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- convolution
def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: str | int = "same", mode: str = "zero") -> Tensor:
    """2-D cross-correlation of ``x[b, cin, h, w]`` with ``k[cout, cin, kh, kw]``.

    ``padding`` is ``"same"`` (odd kernels, stride 1), ``"valid"``, or an
    explicit symmetric pad width; ``mode`` picks zero or replicate fill.
    """
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {k.shape}")
    if not isinstance(stride, int) or stride < 1:
        raise ConfigError(f"stride must be a positive integer, got {stride!r}")
    if mode not in ("zero", "replicate"):
        raise ConfigError(f"conv2d padding mode must be 'zero' or 'replicate', got {mode!r}")
    kh, kw = k.shape[2:]
    if padding == "same":
        if stride != 1 or kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"'same' padding needs stride 1 and odd kernels (stride={stride}, kernel={kh}x{kw})")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    elif isinstance(padding, int) and padding >= 0:
        ph = pw = padding
    else:
        raise ConfigError(f"invalid padding {padding!r}")
    if ph or pw:
        x = pad2d(x, (ph, ph, pw, pw), mode)
    if kh > x.shape[2] or kw > x.shape[3]:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {x.shape[2]}x{x.shape[3]}")
    if kh == 1 and kw == 1 and stride == 1:
        return _conv1x1(x, k)
    if stride == 1 and k.shape[0] < k.shape[1]:
        return _conv_shift(x, k)
    return _conv_im2col(x, k, stride)


def _conv1x1(x: Tensor, k: Tensor) -> Tensor:
    b, c, h, w = x.shape
    wm = k.data[:, :, 0, 0]
    x2 = x.data.reshape(b, c, h * w)
    out = np.matmul(wm, x2).reshape(b, -1, h, w)

    def bw(g):
        g2 = g.reshape(b, -1, h * w)
        gx = np.matmul(wm.T, g2).reshape(x.shape) if x.requires_grad else None
        gk = None
        if k.requires_grad:
            gk = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0)[:, :, None, None]
        return gx, gk

    return _make(out, (x, k), bw)


def _conv_shift(x: Tensor, k: Tensor) -> Tensor:
    """Stride-1 conv as one matmul per tap followed by shifted sums.

    Cheaper than im2col when there are fewer output than input channels.
    """
    b, cin, H, W = x.shape
    cout, _, kh, kw = k.shape
    ho, wo = H - kh + 1, W - kw + 1
    wall = k.data.transpose(2, 3, 0, 1).reshape(kh * kw * cout, cin)
    x2 = x.data.reshape(b, cin, H * W)
    z = np.matmul(wall, x2).reshape(b, kh * kw, cout, H, W)
    out = np.zeros((b, cout, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += z[:, i * kw + j, :, i : i + ho, j : j + wo]

    def bw(g):
        gz = np.zeros((b, kh * kw, cout, H, W), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gz[:, i * kw + j, :, i : i + ho, j : j + wo] = g
        gz = gz.reshape(b, kh * kw * cout, H * W)
        gx = np.matmul(wall.T, gz).reshape(x.shape) if x.requires_grad else None
        gk = None
        if k.requires_grad:
            gw = np.matmul(gz, x2.transpose(0, 2, 1)).sum(axis=0)
            gk = gw.reshape(kh, kw, cout, cin).transpose(2, 3, 0, 1)
        return gx, gk

    return _make(out, (x, k), bw)


def _conv_im2col(x: Tensor, k: Tensor, stride: int) -> Tensor:
    b, cin, H, W = x.shape
    cout, _, kh, kw = k.shape
    ho = (H - kh) // stride + 1
    wo = (W - kw) // stride + 1
    xd = x.data
    # patch matrix [b, cin*kh*kw, ho*wo], channel-major to match the kernel layout
    cols = np.empty((b, cin, kh * kw, ho, wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = xd[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(b, cin * kh * kw, ho * wo)
    km = k.data.reshape(cout, cin * kh * kw)
    out = np.matmul(km, cols).reshape(b, cout, ho, wo)

    def bw(g):
        g2 = g.reshape(b, cout, ho * wo)
        gk = gx = None
        if k.requires_grad:
            gk = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(k.shape)
        if x.requires_grad:
            gcols = np.matmul(km.T, g2).reshape(b, cin, kh * kw, ho, wo)
            gx = np.zeros_like(xd)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i * kw + j]
        return gx, gk

    return _make(out, (x, k), bw)


def depthwise_conv2d(x: Tensor, k: Tensor, mode: str = "replicate") -> Tensor:
    """Per-channel 'same' convolution with ``k[c, 1, kh, kw]``."""
    if x.ndim != 4 or k.ndim != 4 or k.shape[1] != 1:
        raise DimensionError(f"depthwise conv expects x[b,c,h,w], k[c,1,kh,kw]; got {x.shape}, {k.shape}")
    if k.shape[0] != x.shape[1]:
        raise DimensionError(f"depthwise kernel has {k.shape[0]} channels, input has {x.shape[1]}")
    kh, kw = k.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"depthwise 'same' conv needs odd kernels, got {kh}x{kw}")
    xp = pad2d(x, (kh // 2, kh // 2, kw // 2, kw // 2), mode)
    b, c, h, w = x.shape
    kk = k.data[:, 0]
    out = np.zeros((b, c, h, w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp.data[:, :, i : i + h, j : j + w] * kk[None, :, i, j, None, None]

    def bw(g):
        gx = gk = None
        if xp.requires_grad:
            gx = np.zeros_like(xp.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + h, j : j + w] += g * kk[None, :, i, j, None, None]
        if k.requires_grad:
            gk = np.empty_like(k.data)
            for i in range(kh):
                for j in range(kw):
                    gk[:, 0, i, j] = (g * xp.data[:, :, i : i + h, j : j + w]).sum(axis=(0, 2, 3))
        return gx, gk

    return _make(out, (xp, k), bw)


def depthwise_separable_conv(x: Tensor, kd: Tensor, kp: Tensor, mode: str = "replicate") -> Tensor:
    """Depthwise ``kd[c,1,kh,kw]`` then pointwise ``kp[cout,c,1,1]``."""
    if kp.ndim != 4 or kp.shape[2:] != (1, 1) or kp.shape[1] != x.shape[1]:
        raise DimensionError(f"pointwise kernel {kp.shape} incompatible with input {x.shape}")
    return conv2d(depthwise_conv2d(x, kd, mode), kp, padding="valid")


# ------------------------------------------------------------------- sampling
def bilinear_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Sample ``x[b, c, h, w]`` at continuous ``coords[b, p, 2]`` given as (y, x).

    Coordinates are pixel-centred (integer = pixel centre) and clamped to
    the image, so the op is total. Differentiable in both arguments; the
    gradient with respect to a clamped coordinate is zero.
    """
    coords = as_tensor(coords, like=x)
    if x.ndim != 4 or coords.ndim != 3 or coords.shape[2] != 2 or coords.shape[0] != x.shape[0]:
        raise DimensionError(f"bilinear_sample expects x[b,c,h,w], coords[b,p,2]; got {x.shape}, {coords.shape}")
    b, c, h, w = x.shape
    p = coords.shape[1]
    cy = coords.data[..., 0]
    cx = coords.data[..., 1]
    yc = np.clip(cy, 0, h - 1)
    xc = np.clip(cx, 0, w - 1)
    in_y = (cy >= 0) & (cy <= h - 1)
    in_x = (cx >= 0) & (cx <= w - 1)
    y0 = np.minimum(np.floor(yc), max(h - 2, 0)).astype(np.intp)
    x0 = np.minimum(np.floor(xc), max(w - 2, 0)).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (yc - y0).astype(x.dtype)
    fx = (xc - x0).astype(x.dtype)

    # interpolation as a sparse [b*p, b*h*w] operator on the channels-last image
    n = b * p
    flat = x.data.transpose(0, 2, 3, 1).reshape(b * h * w, c)
    base = (np.arange(b) * (h * w))[:, None]
    cols = np.stack(
        [base + y0 * w + x0, base + y0 * w + x1, base + y1 * w + x0, base + y1 * w + x1], axis=-1
    ).reshape(n, 4)
    indptr = np.arange(0, 4 * n + 1, 4)
    fyr = fy.reshape(n, 1)
    fxr = fx.reshape(n, 1)

    def operator(weights):
        return sparse.csr_matrix((weights.ravel(), cols.ravel(), indptr), shape=(n, b * h * w))

    wts = np.concatenate([(1 - fyr) * (1 - fxr), (1 - fyr) * fxr, fyr * (1 - fxr), fyr * fxr], axis=1)
    out = np.asarray(operator(wts) @ flat, dtype=x.dtype)  # [n, c]
    out = out.reshape(b, p, c).transpose(0, 2, 1)

    def bw(g):
        gl = g.transpose(0, 2, 1).reshape(n, c)
        gx = gc = None
        if x.requires_grad:
            gflat = np.asarray(operator(wts).T @ gl, dtype=x.dtype)
            gx = gflat.reshape(b, h, w, c).transpose(0, 3, 1, 2)
        if coords.requires_grad:
            one = np.ones_like(fxr)
            dwy = np.concatenate([-(1 - fxr), -fxr, 1 - fxr, fxr], axis=1)
            dwx = np.concatenate([-(1 - fyr), 1 - fyr, -fyr, fyr], axis=1) * one
            gy = (np.asarray(operator(dwy) @ flat) * gl).sum(axis=1).reshape(b, p) * in_y
            gxx = (np.asarray(operator(dwx) @ flat) * gl).sum(axis=1).reshape(b, p) * in_x
            if h == 1:
                gy = gy * 0
            if w == 1:
                gxx = gxx * 0
            gc = np.stack([gy, gxx], axis=-1).astype(x.dtype)
        return gx, gc

    return _make(out, (x, coords), bw)


# --------------------------------------------------------------- sub-pixel ops
def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """Rearrange ``[b, c*s*s, h, w]`` into ``[b, c, h*s, w*s]``.

    Channel ``c*s*s + i*s + j`` lands at offset ``(i, j)`` of each block.
    """
    b, cs, h, w = x.shape
    if cs % (s * s):
        raise DimensionError(f"pixel_shuffle: {cs} channels not divisible by {s}^2")
    c = cs // (s * s)
    y = reshape(x, (b, c, s, s, h, w))
    y = transpose(y, (0, 1, 4, 2, 5, 3))
    return reshape(y, (b, c, h * s, w * s))


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    b, c, hs, ws = x.shape
    if hs % s or ws % s:
        raise DimensionError(f"pixel_unshuffle: extents {hs}x{ws} not divisible by {s}")
    h, w = hs // s, ws // s
    y = reshape(x, (b, c, h, s, w, s))
    y = transpose(y, (0, 1, 3, 5, 2, 4))
    return reshape(y, (b, c * s * s, h, w))


# -------------------------------------------------------------- verification
def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients of scalar ``f()`` with central differences.

    ``params`` are perturbed in place, one coordinate at a time. When
    ``max_coords`` is set, that many coordinates are drawn uniformly (with a
    fixed seed) instead of sweeping all of them.

    Returns
    -------
    float
        ``max |g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`` over checked coordinates.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ConfigError("grad_check requires float64 tensors")
        p.grad = None
    out = f()
    if out.size != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("non-finite value at the base point")
    out.backward()
    ad = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = [p.size for p in params]
    total = int(sum(sizes))
    if max_coords is not None and max_coords < total:
        flat_ids = np.sort(np.random.default_rng(seed).choice(total, size=max_coords, replace=False))
    else:
        flat_ids = np.arange(total)
    offsets = np.cumsum([0] + sizes)

    worst = 0.0
    with no_grad():
        for fid in flat_ids:
            pi = int(np.searchsorted(offsets, fid, side="right") - 1)
            local = int(fid - offsets[pi])
            view = params[pi].data.reshape(-1)
            orig = view[local]
            view[local] = orig + step
            fp = float(f().data)
            view[local] = orig - step
            fm = float(f().data)
            view[local] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite value while perturbing coordinate {int(fid)} (param {pi}, index {local})")
            g_fd = (fp - fm) / (2 * step)
            g_ad = float(ad[pi].reshape(-1)[local])
            err = abs(g_ad - g_fd) / max(1.0, abs(g_ad), abs(g_fd))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
