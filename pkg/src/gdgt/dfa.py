"""Dynamic feature aggregation of the two attention branches."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .nn import Conv2d, Module
from .tensor import Tensor


class DFA(Module):
    """Per-channel two-way softmax fusion driven by the branch difference.

    ``use_diff=False`` drops the difference term and gates on the pooled
    sum alone; the parameter set is the same either way.
    """

    def __init__(self, channels: int, reduction: int = 4, use_diff: bool = True, rng=None):
        super().__init__()
        if channels % reduction:
            raise DimensionError(f"reduction {reduction} does not divide {channels} channels")
        rng = rng if rng is not None else np.random.default_rng(0)
        mid = channels // reduction
        self.reduce = Conv2d(channels, mid, 1, rng)
        self.expand_m = Conv2d(mid, channels, 1, rng)
        self.expand_n = Conv2d(mid, channels, 1, rng)
        self.use_diff = use_diff

    def weights(self, f1: Tensor, f2: Tensor) -> tuple[Tensor, Tensor]:
        """Channel weights ``(M^s, N^s)``, each ``[b, c, 1, 1]``."""
        if f1.shape != f2.shape:
            raise DimensionError(f"DFA inputs differ in shape: {f1.shape} vs {f2.shape}")
        s_gap = T.mean(f1 + f2, axis=(2, 3), keepdims=True)
        if self.use_diff:
            pooled = T.mean(f1 - f2, axis=(2, 3), keepdims=True) * s_gap
        else:
            pooled = s_gap
        z = T.relu(self.reduce(pooled))
        mn = T.softmax(T.concat([self.expand_m(z), self.expand_n(z)], axis=3), axis=3)
        return mn[:, :, :, 0:1], mn[:, :, :, 1:2]

    def forward(self, f1: Tensor, f2: Tensor) -> Tensor:
        ms, ns = self.weights(f1, f2)
        # ms*f1 + ns*f2 rewritten around the midpoint: equal inputs and tied
        # weights then reproduce f1 and (f1+f2)/2 bit-exactly
        return (f1 + f2) * 0.5 + (ms - ns) * (f1 - f2) * 0.5


def dfa(f1: Tensor, f2: Tensor, module: DFA) -> Tensor:
    return module(f1, f2)
