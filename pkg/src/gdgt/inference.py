"""Whole-image and tiled inference, plus read-outs of the learned guidance."""

from __future__ import annotations

import numpy as np

from .attention import DDSA
from .dgg import DGG
from .errors import ConfigError
from .geometry import distortion_rows
from .model import GDGT
from .tensor import Tensor, no_grad


def _d_rows(rows: np.ndarray, w: int, dtype) -> Tensor:
    return Tensor(np.broadcast_to(rows.astype(dtype)[None, None, :, None], (1, 1, len(rows), w)).copy())


def _run(model: GDGT, lr: np.ndarray, d_rows: np.ndarray) -> np.ndarray:
    x = Tensor(lr[None].astype(model.dtype))
    with no_grad():
        return model(x, _d_rows(d_rows, lr.shape[2], model.dtype)).data[0]


def _tile_origins(n: int, tile: int, step: int, align: int) -> list[int]:
    if n <= tile:
        return [0]
    origins = list(range(0, n - tile, step))
    last = ((n - tile) // align) * align
    if last > origins[-1]:
        origins.append(last)
    return origins


def upscale(model: GDGT, lr: np.ndarray, tile: int | None = None, overlap: int = 16) -> np.ndarray:
    """Super-resolve ``lr[3, h, w]`` (values in [0, 1]).

    With ``tile`` set, the image is processed in ``tile``-sized LR blocks
    whose origins sit on the window grid; neighbours overlap by ``overlap``
    pixels and each contributes only its central part. Every tile sees the
    distortion rows of its true latitude, cut from the full-image map. The
    last tile in each direction runs to the image edge.
    """
    c, h, w = lr.shape
    s = model.cfg.scale
    rows = distortion_rows(h)
    if tile is None or (tile >= h and tile >= w):
        return _run(model, lr, rows)
    mh, mw = model.cfg.window_multiple
    step = tile - overlap
    if overlap % 2 or step <= 0 or step % mh or step % mw:
        raise ConfigError(f"tile {tile} with overlap {overlap} must step by a positive even multiple of the window grid {mh}x{mw}")
    half = overlap // 2
    out = np.zeros((c, h * s, w * s), dtype=model.dtype)
    ys, xs = _tile_origins(h, tile, step, mh), _tile_origins(w, tile, step, mw)
    for iy, y0 in enumerate(ys):
        y1 = h if iy == len(ys) - 1 else y0 + tile
        for ix, x0 in enumerate(xs):
            x1 = w if ix == len(xs) - 1 else x0 + tile
            sr = _run(model, lr[:, y0:y1, x0:x1], rows[y0:y1])
            ky0 = y0 + half if y0 > 0 else 0
            kx0 = x0 + half if x0 > 0 else 0
            ky1 = y1 - half if y1 < h else h
            kx1 = x1 - half if x1 < w else w
            out[:, ky0 * s : ky1 * s, kx0 * s : kx1 * s] = sr[:, (ky0 - y0) * s : (ky1 - y0) * s, (kx0 - x0) * s : (kx1 - x0) * s]
    return out


def offset_profile(model: GDGT, lr: np.ndarray) -> np.ndarray:
    """Per-row mean ``|dy|`` and ``|dx|`` of all DDSA offsets, shape ``[h, 2]``.

    Rows and columns added by window padding are dropped.
    """
    ddsas = [m for m in model.modules() if isinstance(m, DDSA)]
    if not ddsas:
        raise ConfigError("model has no DDSA branch")
    h, w = lr.shape[1:]
    for m in ddsas:
        m.capture = True
    try:
        _run(model, lr, distortion_rows(h))
        prof = [np.abs(m.captured[0, :, :, :h, :w]).mean(axis=(0, 3)).T for m in ddsas]
    finally:
        for m in ddsas:
            m.capture, m.captured = False, None
    return np.mean(prof, axis=0)


def guidance(model: GDGT, h: int, w: int, index: int = 0) -> np.ndarray:
    """Output ``[C, h, w]`` of the ``index``-th DGG for an ``h x w`` map."""
    dggs = [m for m in model.modules() if isinstance(m, DGG)]
    if not dggs:
        raise ConfigError("model has no DGG (guidance disabled)")
    if not 0 <= index < len(dggs):
        raise ConfigError(f"DGG index {index} out of range 0..{len(dggs) - 1}")
    with no_grad():
        return dggs[index](_d_rows(distortion_rows(h), w, model.dtype)).data[0]
