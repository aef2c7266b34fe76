"""Equirectangular (ERP) geometry: projection, stretching ratio, distortion map.

The distortion map is indexed from row 0. With the half-pixel centre term
this makes row ``h`` and row ``H - 1 - h`` mirror images; 1-based indexing
would break that symmetry.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, RangeError, SingularityError


@dataclass(frozen=True)
class SphereCoord:
    theta: float  # longitude, (-pi, pi)
    phi: float  # latitude, (-pi/2, pi/2)


@dataclass(frozen=True)
class PlaneCoord:
    x: float
    y: float


def _check_erp_domain(a: float, b: float, what: str):
    if not (-math.pi < a < math.pi) or not (-math.pi / 2 < b < math.pi / 2):
        raise RangeError(f"{what} ({a}, {b}) outside (-pi, pi) x (-pi/2, pi/2)")


def erp_project(s: SphereCoord) -> PlaneCoord:
    """ERP maps longitude and latitude straight onto the plane."""
    _check_erp_domain(s.theta, s.phi, "sphere coordinate")
    return PlaneCoord(s.theta, s.phi)


def erp_unproject(p: PlaneCoord) -> SphereCoord:
    _check_erp_domain(p.x, p.y, "plane coordinate")
    return SphereCoord(p.x, p.y)


def stretching_ratio_erp(p: PlaneCoord) -> float:
    """Area ratio sphere/plane for ERP, ``cos(y)``."""
    if abs(p.y) >= math.pi / 2:
        raise RangeError(f"|y| = {abs(p.y)} must be below pi/2")
    return math.cos(p.y)


def stretching_ratio_general(jacobian, phi: float) -> float:
    """Stretching ratio ``cos(phi) / |det J|`` for an arbitrary projection.

    Parameters
    ----------
    jacobian : array_like, shape (2, 2)
        ``d(x, y) / d(theta, phi)`` at the point of interest.
    phi : float
        Latitude in radians.
    """
    J = np.asarray(jacobian, dtype=np.float64)
    if J.shape != (2, 2):
        raise DimensionError(f"Jacobian must be 2x2, got {J.shape}")
    det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
    if det == 0:
        raise SingularityError("Jacobian determinant is zero")
    return math.cos(phi) / abs(det)


@dataclass(frozen=True)
class DistortionMap:
    height: int
    width: int
    weights: np.ndarray  # (H, W) float64

    def row_weights(self) -> np.ndarray:
        return self.weights[:, 0]


def distortion_rows(H: int) -> np.ndarray:
    """Per-row weights ``cos((h + 0.5 - H/2) * pi / H)`` for ``h = 0..H-1``."""
    if H < 1:
        raise DimensionError(f"height must be >= 1, got {H}")
    arg = (np.arange(H, dtype=np.float64) + 0.5 - H / 2) * math.pi / H
    # cos is even; taking |arg| guarantees bitwise row symmetry
    return np.cos(np.abs(arg))


def distortion_map(H: int, W: int) -> DistortionMap:
    if H < 1 or W < 1:
        raise DimensionError(f"distortion map extents must be >= 1, got {H}x{W}")
    rows = distortion_rows(H)
    return DistortionMap(H, W, np.repeat(rows[:, None], W, axis=1))


# --------------------------------------------------------------------- export
def save_distortion_png(dm: DistortionMap, path) -> None:
    """16-bit grayscale PNG, value ``round(weight * 65535)``."""
    from PIL import Image

    q = np.round(dm.weights * 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def load_distortion_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.array(im, dtype=np.float64)
    return arr / 65535.0


def save_distortion_raw(dm: DistortionMap, path) -> None:
    """Header ``<u32 H><u32 W>`` then float64 little-endian weights, row-major."""
    Path(path).write_bytes(struct.pack("<II", dm.height, dm.width) + dm.weights.astype("<f8").tobytes())


def load_distortion_raw(path) -> DistortionMap:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise DimensionError("raw distortion dump shorter than its header")
    H, W = struct.unpack("<II", blob[:8])
    if len(blob) != 8 + 8 * H * W:
        raise DimensionError(f"raw dump size {len(blob)} inconsistent with {H}x{W}")
    return DistortionMap(H, W, np.frombuffer(blob[8:], dtype="<f8").reshape(H, W).astype(np.float64))


# ------------------------------------------------------------------- bicubic
def cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    return np.where(
        t <= 1,
        (a + 2) * t3 - (a + 3) * t2 + 1,
        np.where(t < 2, a * t3 - 5 * a * t2 + 8 * a * t - 4 * a, 0.0),
    )


def _resize_weights(n_in: int, n_out: int, scale: float, a: float, antialias: bool) -> np.ndarray:
    """Dense (n_out, n_in) interpolation matrix along one axis."""
    width = 1.0 / scale if (antialias and scale < 1) else 1.0
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    support = 2.0 * width
    left = np.floor(centers - support).astype(int)
    taps = int(math.ceil(2 * support)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = cubic_kernel((centers[:, None] - idx) / width, a)
    w /= w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, n_in - 1)
    M = np.zeros((n_out, n_in))
    np.add.at(M, (np.repeat(np.arange(n_out), taps), idx.ravel()), w.ravel())
    return M


def bicubic_resize(img, scale, a: float = -0.5, antialias: bool = True) -> np.ndarray:
    """Resize the last two axes of ``img`` by a rational ``scale``.

    Half-pixel aligned (output pixel ``i`` centres on input coordinate
    ``(i + 0.5) / scale - 0.5``), border replicated. When downsampling with
    ``antialias`` the kernel is stretched by ``1/scale``, as MATLAB's
    ``imresize`` does.
    """
    scale = Fraction(scale).limit_denominator(1 << 16) if not isinstance(scale, Fraction) else scale
    if scale <= 0:
        raise ConfigError(f"scale must be positive, got {scale}")
    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape[-2:]
    ho, wo = int(round(h * scale)), int(round(w * scale))
    if ho < 1 or wo < 1:
        raise ConfigError(f"output extents {ho}x{wo} must be >= 1")
    s = float(scale)
    if s == 1.0:
        return arr.copy()
    My = _resize_weights(h, ho, s, a, antialias)
    Mx = _resize_weights(w, wo, s, a, antialias)
    return np.einsum("oh,...hw,pw->...op", My, arr, Mx, optimize=True)
