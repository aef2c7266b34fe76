"""Distortion-weighted l1 loss and the PSNR / SSIM family of quality metrics.

Metrics follow the usual SR convention: 8-bit images, luminance (BT.601 Y)
for colour inputs, statistics accumulated in float64. A perfect
reconstruction has PSNR ``inf``; dataset means skip such entries.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .geometry import DistortionMap
from .tensor import Tensor


def _weight_tensor(d, like: Tensor) -> Tensor:
    if isinstance(d, DistortionMap):
        d = d.weights
    if isinstance(d, Tensor):
        return d
    return Tensor(np.asarray(d, dtype=like.dtype))


def ws_l1(out: Tensor, gt: Tensor, d, normalize: bool = True) -> Tensor:
    """Distortion-weighted absolute error.

    Parameters
    ----------
    out, gt : Tensor
        Same shape, spatial extents last.
    d : Tensor, ndarray or DistortionMap
        Weights broadcastable against ``out`` (``[H, W]`` or ``[b, 1, H, W]``).
    normalize : bool
        Divide by the total weight so ``d == 1`` gives the mean absolute
        error. ``False`` returns the raw weighted sum.
    """
    gt = T.as_tensor(gt, like=out)
    if out.shape != gt.shape:
        raise DimensionError(f"ws_l1 shape mismatch: {out.shape} vs {gt.shape}")
    w = _weight_tensor(d, out)
    if w.shape[-2:] != out.shape[-2:]:
        raise DimensionError(f"weight map {w.shape} does not match spatial extents {out.shape[-2:]}")
    total = T.tsum(T.tabs(gt - out) * w)
    if not normalize:
        return total
    norm = float(np.broadcast_to(w.data, out.shape).sum(dtype=np.float64))
    return total * (1.0 / norm)


def to_luma(img) -> np.ndarray:
    """BT.601 luma (16..235 range) of an HxWx3 image in 0..255; 2-D passes through."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        return a
    if a.ndim == 3 and a.shape[2] == 3:
        return 16.0 + (65.481 * a[..., 0] + 128.553 * a[..., 1] + 24.966 * a[..., 2]) / 255.0
    if a.ndim == 3 and a.shape[2] == 1:
        return a[..., 0]
    raise DimensionError(f"expected HxW or HxWx3 image, got {a.shape}")


def _prep(a, b):
    a, b = to_luma(a), to_luma(b)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _weights(d, shape) -> np.ndarray:
    w = d.weights if isinstance(d, DistortionMap) else np.asarray(d, dtype=np.float64)
    if w.shape != shape:
        raise DimensionError(f"weight map {w.shape} does not match image {shape}")
    return w


def _psnr_from_mse(mse: float, peak: float) -> float:
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def psnr(a, b, peak: float = 255.0) -> float:
    if peak <= 0:
        raise ValueError("peak must be positive")
    a, b = _prep(a, b)
    return _psnr_from_mse(float(np.mean((a - b) ** 2)), peak)


def ws_psnr(a, b, d, peak: float = 255.0) -> float:
    if peak <= 0:
        raise ValueError("peak must be positive")
    a, b = _prep(a, b)
    w = _weights(d, a.shape)
    if np.all(w == w.flat[0]) and w.flat[0] > 0:
        # uniform weights cancel; skip them so the result equals psnr bit for bit
        return _psnr_from_mse(float(np.mean((a - b) ** 2)), peak)
    wmse = float(np.sum((a - b) ** 2 * w) / np.sum(w))
    return _psnr_from_mse(wmse, peak)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    h, w = img.shape
    rows = sum(g[i] * img[i : h - n + 1 + i, :] for i in range(n))
    return sum(g[j] * rows[:, j : w - n + 1 + j] for j in range(n))


def ssim_map(a, b, peak: float = 255.0, size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Per-pixel SSIM over the valid region (no padding)."""
    a, b = _prep(a, b)
    if a.shape[0] < size or a.shape[1] < size:
        raise DimensionError(f"image {a.shape} smaller than the {size}x{size} SSIM window")
    g = _gaussian_window(size, sigma)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, peak: float = 255.0) -> float:
    a_, b_ = _prep(a, b)
    if np.array_equal(a_, b_):
        _ = ssim_map(a_, b_, peak)  # still validates extents
        return 1.0
    return float(ssim_map(a_, b_, peak).mean())


def ws_ssim(a, b, d, peak: float = 255.0) -> float:
    a_, b_ = _prep(a, b)
    w = _weights(d, a_.shape)
    m = ssim_map(a_, b_, peak)
    off = (a_.shape[0] - m.shape[0]) // 2, (a_.shape[1] - m.shape[1]) // 2
    wv = w[off[0] : off[0] + m.shape[0], off[1] : off[1] + m.shape[1]]
    return float(np.sum(m * wv) / np.sum(wv))


@dataclass
class MetricReport:
    name: str
    psnr: float
    ssim: float
    ws_psnr: float
    ws_ssim: float

    def to_json(self) -> dict:
        return {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in asdict(self).items()}


def evaluate_pair(name: str, sr, hr, d, peak: float = 255.0) -> MetricReport:
    return MetricReport(name, psnr(sr, hr, peak), ssim(sr, hr, peak), ws_psnr(sr, hr, d, peak), ws_ssim(sr, hr, d, peak))


def dataset_mean(reports: list[MetricReport]) -> MetricReport:
    """Mean of each metric; infinite PSNR entries are excluded with a warning."""
    out = {}
    for key in ("psnr", "ssim", "ws_psnr", "ws_ssim"):
        vals = [getattr(r, key) for r in reports]
        finite = [v for v in vals if math.isfinite(v)]
        if len(finite) < len(vals):
            warnings.warn(f"{len(vals) - len(finite)} infinite {key} value(s) excluded from the mean", stacklevel=2)
        out[key] = float(np.mean(finite)) if finite else (math.inf if vals else math.nan)
    return MetricReport("mean", **out)
