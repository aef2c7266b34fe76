"""Rectangle-window, distortion-modulated, and deformable self-attention."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .nn import Conv2d, Module
from .tensor import Tensor
from .windowing import HeadSplit, PositionBiasMLP, WindowSpec, merge, partition, relative_position_bias


def _heads(t: Tensor, n: int) -> Tensor:
    """``[B, T, n*d]`` -> ``[B, n, T, d]``."""
    B, L, c = t.shape
    return T.transpose(T.reshape(t, (B, L, n, c // n)), (0, 2, 1, 3))


def _unheads(t: Tensor) -> Tensor:
    B, n, L, d = t.shape
    return T.reshape(T.transpose(t, (0, 2, 1, 3)), (B, L, n * d))


class DMRSA(Module):
    """Rectangle-window self-attention with optional key/value modulation.

    Heads ``0 .. N/2-1`` attend within H-Rwins, the rest within V-Rwins;
    their outputs are concatenated in that order and projected by ``wf``.
    Called without guidance this is plain Rwin-SA.
    """

    def __init__(self, dim, heads, hwin: WindowSpec, vwin: WindowSpec, rng=None, rpe_hidden=32, zero_proj=True):
        super().__init__()
        if dim % heads:
            raise DimensionError(f"embedding dim {dim} not divisible by {heads} heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.split = HeadSplit(heads)
        self.dim, self.heads = dim, heads
        self.head_dim = dim // heads
        self.hwin, self.vwin = hwin, vwin
        self.wq = Conv2d(dim, dim, 1, rng, init="trunc_normal")
        self.wk = Conv2d(dim, dim, 1, rng, init="trunc_normal")
        self.wv = Conv2d(dim, dim, 1, rng, init="trunc_normal")
        self.rpe_h = PositionBiasMLP(self.split.per_orientation, rpe_hidden, rng)
        self.rpe_v = PositionBiasMLP(self.split.per_orientation, rpe_hidden, rng)
        self.wf = Conv2d(dim, dim, 1, rng, init="zeros" if zero_proj else "trunc_normal")

    def attend(self, x: Tensor, g: Tensor | None = None):
        """Pre-projection output ``[b, C, h, w]`` and per-orientation attention maps."""
        b, c, h, w = x.shape
        if c != self.dim:
            raise DimensionError(f"expected {self.dim} channels, got {c}")
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        if g is not None:
            if g.shape[1:] != x.shape[1:]:
                raise DimensionError(f"guidance shape {g.shape} does not match features {x.shape}")
            k = k * g
            v = v * g
        half = c // 2
        nh = self.split.per_orientation
        scale = 1.0 / math.sqrt(self.head_dim)
        outs, attns = [], []
        for spec, mlp, sl in ((self.hwin, self.rpe_h, slice(0, half)), (self.vwin, self.rpe_v, slice(half, c))):
            qw = _heads(partition(q[:, sl], spec), nh)
            kw = _heads(partition(k[:, sl], spec), nh)
            vw = _heads(partition(v[:, sl], spec), nh)
            scores = T.matmul(qw, T.transpose(kw, (0, 1, 3, 2))) * scale
            scores = scores + relative_position_bias(spec, nh, mlp)
            attn = T.softmax(scores, axis=-1)
            outs.append(merge(_unheads(T.matmul(attn, vw)), spec, (h, w)))
            attns.append(attn)
        return T.concat(outs, axis=1), attns

    def forward(self, x: Tensor, g: Tensor | None = None) -> Tensor:
        y, _ = self.attend(x, g)
        return self.wf(y)


def rwin_sa(x: Tensor, module: DMRSA) -> Tensor:
    return module(x, None)


def dmrsa(x: Tensor, g: Tensor, module: DMRSA) -> Tensor:
    return module(x, g)


def reference_grid(points: int, spacing: float = 1.0) -> np.ndarray:
    """``[P, 2]`` (dy, dx) offsets of a centred square grid, row-major."""
    side = int(round(math.sqrt(points)))
    if side * side != points:
        raise DimensionError(f"reference point count {points} is not a perfect square")
    r = (np.arange(side) - (side - 1) / 2) * spacing
    gy, gx = np.meshgrid(r, r, indexing="ij")
    return np.stack([gy.ravel(), gx.ravel()], axis=1)


class DDSA(Module):
    """Deformable self-attention steered by the distortion map.

    Each query attends to ``P`` keys sampled bilinearly at a reference grid
    around it plus learned offsets ``tanh(net(concat(x, D))) * radius``.
    """

    def __init__(self, dim, heads, points=9, radius=8.0, spacing=1.0, rng=None, zero_proj=True):
        super().__init__()
        if dim % heads:
            raise DimensionError(f"embedding dim {dim} not divisible by {heads} heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim, self.heads, self.points = dim, heads, points
        self.head_dim = dim // heads
        self.radius = float(radius)
        self.ref = reference_grid(points, spacing)
        self.off1 = Conv2d(dim + 1, dim, 3, rng)
        self.off2 = Conv2d(dim, 2 * points, 3, rng, init="zeros")
        self.wq = Conv2d(dim, dim, 1, rng, init="trunc_normal")
        self.wk = Conv2d(dim, dim, 1, rng, init="trunc_normal")
        self.wv = Conv2d(dim, dim, 1, rng, init="trunc_normal")
        self.wf = Conv2d(dim, dim, 1, rng, init="zeros" if zero_proj else "trunc_normal")
        self.capture = False  # keep the last offsets for inspection
        self.captured = None

    def offsets(self, x: Tensor, d: Tensor) -> Tensor:
        """``[b, P, 2, h, w]`` sampling offsets (dy, dx) in pixels, each within ``radius``."""
        b, _, h, w = x.shape
        o = self.off2(T.relu(self.off1(T.concat([x, d], axis=1))))
        return T.reshape(T.tanh(o) * self.radius, (b, self.points, 2, h, w))

    def attend(self, x: Tensor, d: Tensor):
        b, c, h, w = x.shape
        if d.shape != (b, 1, h, w):
            raise DimensionError(f"distortion map shape {d.shape} does not match features {x.shape}")
        P, n, dh = self.points, self.heads, self.head_dim
        off = self.offsets(x, d)
        gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        base = np.empty((P, 2, h, w), dtype=x.dtype)
        base[:, 0] = gy[None] + self.ref[:, 0, None, None]
        base[:, 1] = gx[None] + self.ref[:, 1, None, None]
        pos = off + Tensor(base[None])  # [b, P, 2, h, w]
        coords = T.reshape(T.transpose(pos, (0, 1, 3, 4, 2)), (b, P * h * w, 2))
        # sampling commutes with the 1x1 projections (bilinear weights sum to one),
        # so project once at full resolution and sample keys and values together
        kv = T.concat([self.wk(x), self.wv(x)], axis=1)
        sampled = T.reshape(T.bilinear_sample(kv, coords), (b, 2, n, dh, P, h, w))
        k = T.transpose(sampled[:, 0], (0, 3, 1, 2, 4, 5))  # [b, P, n, dh, h, w]
        v = T.transpose(sampled[:, 1], (0, 3, 1, 2, 4, 5))
        q = T.reshape(self.wq(x), (b, 1, n, dh, h, w))
        scores = T.tsum(q * k, axis=3) * (1.0 / math.sqrt(dh))  # [b, P, n, h, w]
        attn = T.softmax(scores, axis=1)
        y = T.tsum(T.reshape(attn, (b, P, n, 1, h, w)) * v, axis=1)  # [b, n, dh, h, w]
        return T.reshape(y, (b, c, h, w)), attn, off

    def forward(self, x: Tensor, d: Tensor) -> Tensor:
        y, _, off = self.attend(x, d)
        if self.capture:
            self.captured = off.data
        return self.wf(y)


def ddsa(x: Tensor, d: Tensor, module: DDSA) -> Tensor:
    return module(x, d)
