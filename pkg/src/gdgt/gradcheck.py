"""Registered finite-difference checks for every differentiable op and block.

Each check builds a small float64 instance, randomizes all weights
(including zero-initialized ones, so no branch is silently dead and no
sampling coordinate sits on a bilinear kink) and returns the worst relative
error reported by :func:`gdgt.tensor.grad_check`.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .attention import DDSA, DMRSA
from .dfa import DFA
from .dgg import DGG
from .metrics import ws_l1
from .model import DAL, GDGT, ModelConfig, distortion_tensor
from .nn import Module
from .tensor import Parameter, Tensor, grad_check
from .windowing import PositionBiasMLP, WindowSpec, merge, partition, relative_position_bias

TOLERANCE = 1e-4
STEP = 1e-5

CHECKS: dict[str, Callable[[int], float]] = {}


def register(name: str):
    def deco(fn):
        CHECKS[name] = fn
        return fn

    return deco


def randomize(module: Module, rng: np.random.Generator, scale: float = 0.2) -> Module:
    module.astype(np.float64)
    for _, p in module.named_parameters():
        p.data = rng.normal(0.0, scale, size=p.shape)
    return module


def _p(rng, *shape, scale=1.0):
    return Parameter(rng.normal(0.0, scale, size=shape))


def _check_fn(build: Callable, params, rng, max_coords=None, seed=0) -> float:
    with T.no_grad():
        shape_probe = build()
    r = Tensor(rng.normal(size=shape_probe.shape))
    return grad_check(lambda: T.tsum(build() * r), params, STEP, max_coords, seed)


# ------------------------------------------------------------ elementwise
def _unary(fn, lo=-2.0, hi=2.0, avoid_zero=False):
    def check(seed: int) -> float:
        rng = np.random.default_rng(seed)
        x = rng.uniform(lo, hi, size=(3, 5))
        if avoid_zero:
            x = np.where(np.abs(x) < 0.1, 0.5, x)
        p = Parameter(x)
        return _check_fn(lambda: fn(p), [p], rng)

    return check


register("exp")(_unary(T.exp))
register("log")(_unary(T.log, 0.2, 3.0))
register("sqrt")(_unary(T.sqrt, 0.2, 3.0))
register("tanh")(_unary(T.tanh))
register("sigmoid")(_unary(T.sigmoid, -6, 6))
register("relu")(_unary(T.relu, avoid_zero=True))
register("gelu")(_unary(T.gelu, -4, 4))
register("abs")(_unary(T.tabs, avoid_zero=True))
register("power")(_unary(lambda a: T.power(a, 3.0)))


@register("add_mul_div_broadcast")
def _arith(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a, b, c = _p(rng, 2, 3, 4), _p(rng, 3, 1), _p(rng, 1, 4)
    c.data = np.abs(c.data) + 0.5
    return _check_fn(lambda: (a * b + a - b) / c, [a, b, c], rng)


@register("sum_mean")
def _reduce(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = _p(rng, 2, 3, 4)
    return _check_fn(lambda: T.concat([T.reshape(T.tsum(a, axis=1), (-1,)), T.reshape(T.mean(a, axis=(0, 2), keepdims=True), (-1,)), T.reshape(T.mean(a), (1,))], axis=0), [a], rng)


@register("matmul")
def _matmul(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a, b = _p(rng, 2, 3, 4), _p(rng, 4, 5)
    return _check_fn(lambda: T.matmul(a, b), [a, b], rng)


@register("softmax")
def _softmax(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = _p(rng, 3, 6, scale=2.0)
    return _check_fn(lambda: T.softmax(a, axis=-1), [a], rng)


@register("layer_norm")
def _ln(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x, g, b = _p(rng, 2, 6, 3, 3), _p(rng, 6), _p(rng, 6)
    return _check_fn(lambda: T.layer_norm(x, g, b, axis=1), [x, g, b], rng)


@register("shape_ops")
def _shape(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a, b = _p(rng, 2, 3, 4), _p(rng, 2, 1, 4)
    idx = np.array([2, 0, 2, 1])

    def f():
        y = T.concat([a, b], axis=1)
        y = T.transpose(T.reshape(y, (2, 4, 2, 2)), (0, 2, 1, 3))
        y = T.take(y, idx, axis=2)
        return T.broadcast_to(y[:, :, 1:3], (3, 2, 2, 2, 2))

    return _check_fn(f, [a, b], rng)


@register("pad2d")
def _pad(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = _p(rng, 1, 2, 3, 4)
    return _check_fn(lambda: T.concat([T.pad2d(a, (1, 2, 3, 1), m) for m in ("zero", "replicate", "reflect")], axis=1), [a], rng)


@register("conv2d")
def _conv(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _p(rng, 2, 3, 5, 6)
    ks = [_p(rng, 4, 3, 3, 3), _p(rng, 2, 3, 3, 3), _p(rng, 4, 3, 1, 1), _p(rng, 4, 3, 3, 3)]
    return _check_fn(
        lambda: T.concat(
            [
                T.conv2d(x, ks[0]),
                T.conv2d(x, ks[1], mode="replicate"),
                T.conv2d(x, ks[2]),
                T.pad2d(T.conv2d(x, ks[3], stride=2, padding=1), (0, 2, 0, 3)),
            ],
            axis=1,
        ),
        [x, *ks],
        rng,
    )


@register("depthwise_separable_conv")
def _dwsep(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x, kd, kp = _p(rng, 2, 3, 5, 6), _p(rng, 3, 1, 3, 3), _p(rng, 4, 3, 1, 1)
    return _check_fn(lambda: T.depthwise_separable_conv(x, kd, kp), [x, kd, kp], rng)


@register("bilinear_sample")
def _bilinear(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _p(rng, 2, 3, 5, 6)
    c = Parameter(rng.uniform(-1.0, 6.5, size=(2, 7, 2)))
    c.data += 0.123  # keep away from integer kinks
    return _check_fn(lambda: T.bilinear_sample(x, c), [x, c], rng)


@register("pixel_shuffle")
def _shuffle(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _p(rng, 1, 8, 3, 2)
    return _check_fn(lambda: T.pixel_unshuffle(T.pixel_shuffle(x, 2) * 1.5, 2), [x], rng)


@register("window_partition_bias")
def _windows(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = _p(rng, 1, 2, 4, 8)
    spec = WindowSpec(2, 4)
    mlp = randomize(PositionBiasMLP(2, 8, rng), rng, 0.5)
    return _check_fn(lambda: T.concat([T.reshape(merge(partition(x, spec) * 2.0, spec, (4, 8)), (1, 64)), T.reshape(relative_position_bias(spec, 2, mlp), (1, 128))], axis=1), [x, *mlp.parameters()], rng)


@register("ws_l1")
def _wsl1(seed: int) -> float:
    rng = np.random.default_rng(seed)
    out, gt = _p(rng, 1, 3, 4, 5), Tensor(rng.normal(size=(1, 3, 4, 5)))
    d = distortion_tensor(4, 5, 1, np.float64)
    return grad_check(lambda: ws_l1(out, gt, d), [out], STEP)


# -------------------------------------------------------------- blocks
_DESK_C, _DESK_H, _DESK_W = 8, 8, 16


@register("dgg")
def _dgg(seed: int) -> float:
    rng = np.random.default_rng(seed)
    m = randomize(DGG(16, rng), rng, 0.3)
    d = distortion_tensor(8, 16, 1, np.float64)
    return _check_fn(lambda: m(d), m.parameters(), rng)


def _dmrsa_module(rng):
    return randomize(DMRSA(_DESK_C, 2, WindowSpec(2, 8), WindowSpec(8, 2), rng, rpe_hidden=8), rng, 0.3)


@register("rwin_sa")
def _rwin(seed: int) -> float:
    rng = np.random.default_rng(seed)
    m = _dmrsa_module(rng)
    x = _p(rng, 1, _DESK_C, _DESK_H, _DESK_W)
    return _check_fn(lambda: m(x), [x, *m.parameters()], rng, max_coords=300, seed=seed)


@register("dmrsa")
def _dmrsa(seed: int) -> float:
    rng = np.random.default_rng(seed)
    m = _dmrsa_module(rng)
    x = _p(rng, 1, _DESK_C, _DESK_H, _DESK_W)
    g = _p(rng, 1, _DESK_C, _DESK_H, _DESK_W)
    return _check_fn(lambda: m(x, g), [x, g, *m.parameters()], rng, max_coords=300, seed=seed)


@register("ddsa")
def _ddsa(seed: int) -> float:
    rng = np.random.default_rng(seed)
    m = randomize(DDSA(_DESK_C, 2, rng=rng), rng, 0.2)
    x = _p(rng, 1, _DESK_C, _DESK_H, _DESK_W)
    d = distortion_tensor(_DESK_H, _DESK_W, 1, np.float64)
    return _check_fn(lambda: m(x, d), [x, *m.parameters()], rng, max_coords=300, seed=seed)


@register("dfa")
def _dfa(seed: int) -> float:
    rng = np.random.default_rng(seed)
    m = randomize(DFA(_DESK_C, 4, True, rng), rng, 0.5)
    f1, f2 = _p(rng, 2, _DESK_C, 4, 4), _p(rng, 2, _DESK_C, 4, 4)
    return _check_fn(lambda: m(f1, f2), [f1, f2, *m.parameters()], rng)


@register("dal")
def _dal(seed: int) -> float:
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(embed_dim=_DESK_C, heads=2, hwin=(4, 16), vwin=(8, 4))
    m = randomize(DAL(cfg, rng), rng, 0.15)
    x = _p(rng, 1, _DESK_C, _DESK_H, _DESK_W)
    d = distortion_tensor(_DESK_H, _DESK_W, 1, np.float64)
    return _check_fn(lambda: m(x, d), [x, *m.parameters()], rng, max_coords=300, seed=seed)


@register("model_2dab")
def _model(seed: int) -> float:
    """Desk layout (2 DABs x 2 DALs, windows 4x16 / 16x4) at width 8, padded input."""
    rng = np.random.default_rng(seed)
    m = randomize(GDGT(ModelConfig.desk(embed_dim=_DESK_C)), rng, 0.1)
    x = _p(rng, 1, 3, 8, 12)
    return _check_fn(lambda: m(x), [x, *m.parameters()], rng, max_coords=300, seed=seed)


def run_all(names=None, seed: int = 0) -> dict[str, float]:
    names = list(CHECKS) if names is None else list(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown checks {unknown}; available: {sorted(CHECKS)}")
    return {n: CHECKS[n](seed) for n in names}
