"""Parameter containers and the handful of layers the network is built from."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Attribute-registered tree of parameters and submodules.

    Parameter names are dotted paths (``dab.0.dal.1.dmrsa.wq.weight``);
    iteration order is registration order, which is also checkpoint order.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict):
        for n, p in self.named_parameters():
            arr = np.asarray(state[n])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {n}: {arr.shape} vs {p.shape}")
            p.data = np.array(arr, dtype=p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float32)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, m: Module):
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(np.float32)


class Conv2d(Module):
    """Convolution with bias; 1x1 kernels double as per-pixel linear maps."""

    def __init__(self, cin, cout, k=3, rng=None, mode="zero", bias=True, init="kaiming"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * k * k
        if init == "zeros":
            w = np.zeros((cout, cin, k, k), np.float32)
        elif init == "trunc_normal":
            w = trunc_normal(rng, (cout, cin, k, k))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32)
        self.weight = Parameter(w)
        if bias:
            self.bias = Parameter(np.zeros(cout, np.float32))
        else:
            self.bias = None
        self.mode = mode
        self.k = k

    def forward(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, padding="same", mode=self.mode)
        if self.bias is not None:
            y = y + T.reshape(self.bias, (1, -1, 1, 1))
        return y


class LayerNorm(Module):
    """Channel-axis layer norm for ``[b, c, h, w]`` maps."""

    def __init__(self, c, eps=1e-5):
        super().__init__()
        self.weight = Parameter(np.ones(c, np.float32))
        self.bias = Parameter(np.zeros(c, np.float32))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, axis=1, eps=self.eps)


class Linear(Module):
    """Dense layer on the last axis."""

    def __init__(self, cin, cout, rng=None, init="kaiming"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if init == "zeros":
            w = np.zeros((cin, cout), np.float32)
        elif init == "trunc_normal":
            w = trunc_normal(rng, (cin, cout))
        else:
            bound = 1.0 / np.sqrt(cin)
            w = rng.uniform(-bound, bound, size=(cin, cout)).astype(np.float32)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias
