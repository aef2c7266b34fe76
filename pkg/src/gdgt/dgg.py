"""Distortion guidance generator.

Turns the one-channel distortion map into a C-channel guidance map through
a latitude branch (row pooling, 1x1 conv, row expansion) gated by a
channel-attention branch, then refines it with a depthwise separable conv.
Every channel of the output is exactly constant along each row.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module
from .tensor import Parameter, Tensor


def lwp(f: Tensor) -> Tensor:
    """Latitude-wise pooling: row means, ``[b, c, h, w] -> [b, c, h, 1]``."""
    return T.mean(f, axis=3, keepdims=True)


def lwe(v: Tensor, W: int) -> Tensor:
    """Latitude-wise expansion: repeat each row value ``W`` times."""
    b, c, h, _ = v.shape
    return T.broadcast_to(v, (b, c, h, W))


def attention_branch(f: Tensor, conv: Conv2d) -> Tensor:
    """Per-channel gate ``sigmoid(conv1x1(GAP(f)))`` of shape ``[b, c, 1, 1]``."""
    return T.sigmoid(conv(T.mean(f, axis=(2, 3), keepdims=True)))


class DGG(Module):
    def __init__(self, channels: int, rng=None, kernel: int = 3, depthwise_kernel: int = 3):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.expand = Conv2d(1, channels, kernel, rng, mode="replicate")
        self.lat = Conv2d(channels, channels, 1, rng)
        self.att = Conv2d(channels, channels, 1, rng)
        bound = 1.0 / depthwise_kernel
        self.dw = Parameter(rng.uniform(-bound, bound, (channels, 1, depthwise_kernel, depthwise_kernel)).astype(np.float32))
        self.pw = Conv2d(channels, channels, 1, rng)
        self.channels = channels

    def forward(self, d: Tensor) -> Tensor:
        """``d[b, 1, h, w]`` -> guidance ``[b, C, h, w]``."""
        f = T.relu(self.expand(d))
        v = T.relu(self.lat(lwp(f)))
        g_hat = v * attention_branch(f, self.att)
        # a replicate-padded conv maps a row-constant input to the same thing
        # as running it on one column, so expansion waits until after the
        # refinement; BLAS may round edge columns differently otherwise
        refined = self.pw(T.depthwise_conv2d(g_hat, self.dw, mode="replicate"))
        return lwe(refined, d.shape[3])
