"""Rectangle-window partition/merge, head split, dynamic relative position bias."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .nn import Linear, Module
from .tensor import Tensor


@dataclass(frozen=True)
class WindowSpec:
    rh: int
    rw: int

    def __post_init__(self):
        if self.rh < 1 or self.rw < 1:
            raise DimensionError(f"window extents must be >= 1, got {self.rh}x{self.rw}")

    @property
    def orientation(self) -> str:
        if self.rh < self.rw:
            return "horizontal"
        if self.rh > self.rw:
            return "vertical"
        return "square"

    @property
    def tokens(self) -> int:
        return self.rh * self.rw

    def transposed(self) -> "WindowSpec":
        return WindowSpec(self.rw, self.rh)


@dataclass(frozen=True)
class HeadSplit:
    """First half of the heads use H-Rwins, second half V-Rwins."""

    total_heads: int

    def __post_init__(self):
        if self.total_heads < 2 or self.total_heads % 2:
            raise DimensionError(f"head count must be even and >= 2, got {self.total_heads}")

    @property
    def per_orientation(self) -> int:
        return self.total_heads // 2

    def orientation_of(self, head: int) -> str:
        if not 0 <= head < self.total_heads:
            raise IndexError(head)
        return "horizontal" if head < self.per_orientation else "vertical"


def partition(x: Tensor, spec: WindowSpec) -> Tensor:
    """``[b, c, h, w]`` -> ``[b * nw, rh * rw, c]``.

    Windows are ordered row-major over the grid, tokens row-major inside.
    """
    b, c, h, w = x.shape
    if h % spec.rh or w % spec.rw:
        raise DimensionError(
            f"extents {h}x{w} not divisible by window {spec.rh}x{spec.rw}; pad the input first"
        )
    nh, nw = h // spec.rh, w // spec.rw
    y = T.reshape(x, (b, c, nh, spec.rh, nw, spec.rw))
    y = T.transpose(y, (0, 2, 4, 3, 5, 1))
    return T.reshape(y, (b * nh * nw, spec.tokens, c))


def merge(windows: Tensor, spec: WindowSpec, extents: tuple[int, int]) -> Tensor:
    """Inverse of :func:`partition`."""
    h, w = extents
    if h % spec.rh or w % spec.rw:
        raise DimensionError(f"extents {h}x{w} not divisible by window {spec.rh}x{spec.rw}")
    nh, nw = h // spec.rh, w // spec.rw
    bn, t, c = windows.shape
    if t != spec.tokens or bn % (nh * nw):
        raise DimensionError(
            f"{bn} windows of {t} tokens inconsistent with window {spec.rh}x{spec.rw} over {h}x{w}"
        )
    b = bn // (nh * nw)
    y = T.reshape(windows, (b, nh, nw, spec.rh, spec.rw, c))
    y = T.transpose(y, (0, 5, 1, 3, 2, 4))
    return T.reshape(y, (b, c, h, w))


def relative_offsets(spec: WindowSpec) -> tuple[np.ndarray, np.ndarray]:
    """Unique normalized offsets and the token-pair index into them.

    Returns ``(table, index)`` with ``table[(2rh-1)(2rw-1), 2]`` holding
    ``(dy/rh, dx/rw)`` and ``index[T*T]`` mapping pair ``(i, j)`` to its row.
    """
    dys = np.arange(-(spec.rh - 1), spec.rh)
    dxs = np.arange(-(spec.rw - 1), spec.rw)
    gy, gx = np.meshgrid(dys, dxs, indexing="ij")
    table = np.stack([gy.ravel() / spec.rh, gx.ravel() / spec.rw], axis=1)
    ty, tx = np.divmod(np.arange(spec.tokens), spec.rw)
    dy = ty[:, None] - ty[None, :]
    dx = tx[:, None] - tx[None, :]
    index = (dy + spec.rh - 1) * (2 * spec.rw - 1) + (dx + spec.rw - 1)
    return table, index.ravel()


class PositionBiasMLP(Module):
    """Continuous-offset MLP ``2 -> hidden -> heads`` shared by all windows."""

    def __init__(self, heads: int, hidden: int = 32, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fc1 = Linear(2, hidden, rng)
        self.fc2 = Linear(hidden, heads, rng, init="trunc_normal")
        self.heads = heads

    def forward(self, offsets: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(offsets)))


def relative_position_bias(spec: WindowSpec, heads: int, mlp: PositionBiasMLP) -> Tensor:
    """Bias ``B[heads, T, T]`` with ``B[n, i, j] = MLP_n(offset(i, j))``."""
    if mlp.heads != heads:
        raise DimensionError(f"bias MLP emits {mlp.heads} heads, {heads} requested")
    table, index = relative_offsets(spec)
    vals = mlp(Tensor(table.astype(mlp.dtype)))  # [n_off, heads]
    pairs = T.take(vals, index, axis=0)  # [T*T, heads]
    return T.reshape(T.transpose(pairs, (1, 0)), (heads, spec.tokens, spec.tokens))
