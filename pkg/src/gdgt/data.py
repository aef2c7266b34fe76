"""Image I/O, synthetic ERP panoramas, and LR/HR patch sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionError
from .geometry import bicubic_resize, distortion_rows

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def read_image(path) -> np.ndarray:
    """``[3, H, W]`` float32 in [0, 1]. Raises ``OSError`` if unreadable."""
    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(a.transpose(2, 0, 1))


def quantize(img: np.ndarray) -> np.ndarray:
    """``[3, H, W]`` in [0, 1] to ``HxWx3`` uint8 with round-half-even."""
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_image(path, img: np.ndarray) -> None:
    Image.fromarray(quantize(img)).save(path, format="PNG")


def make_lr(hr: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic LR counterpart of an HR image, clipped to [0, 1]."""
    h, w = hr.shape[-2:]
    if h % scale or w % scale:
        raise DimensionError(f"HR extents {h}x{w} not divisible by scale {scale}")
    return np.clip(bicubic_resize(hr, 1.0 / scale), 0.0, 1.0).astype(np.float32)


def synthetic_erp(height: int, rng: np.random.Generator, waves: int = 24, max_freq: float = 14.0) -> np.ndarray:
    """A smooth random colour field on the sphere, rendered in ERP.

    The field is a sum of plane waves over the 3-D unit vector, so it is
    continuous across the seam and the poles and its ERP rendering shows the
    horizontal stretch near the top and bottom rows. Returns ``[3, H, 2H]``
    float32 in [0, 1].
    """
    W = 2 * height
    lat = (0.5 - (np.arange(height) + 0.5) / height) * np.pi
    lon = ((np.arange(W) + 0.5) / W - 0.5) * 2 * np.pi
    la, lo = np.meshgrid(lat, lon, indexing="ij")
    p = np.stack([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)], axis=-1)
    dirs = rng.normal(size=(waves, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    freqs = rng.uniform(1.0, max_freq, size=waves)
    phase = rng.uniform(0, 2 * np.pi, size=waves)
    amp = rng.uniform(0.3, 1.0, size=waves) / freqs**0.5
    basis = np.sin((p @ (dirs * freqs[:, None]).T) + phase)  # [H, W, waves]
    colour = rng.uniform(-1, 1, size=(waves, 3))
    img = (basis * amp) @ colour
    img = (img - img.min()) / max(img.max() - img.min(), 1e-12)
    return img.transpose(2, 0, 1).astype(np.float32)


@dataclass
class ImagePair:
    name: str
    hr: np.ndarray  # [3, H, W]
    lr: np.ndarray  # [3, H/s, W/s]
    scale: int


def make_pair(name: str, hr: np.ndarray, scale: int) -> ImagePair:
    h, w = hr.shape[-2:]
    hr = hr[:, : h - h % scale, : w - w % scale]
    return ImagePair(name, hr, make_lr(hr, scale), scale)


def load_dataset(directory, scale: int) -> list[ImagePair]:
    d = Path(directory)
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    return [make_pair(p.stem, read_image(p), scale) for p in files]


@dataclass
class Batch:
    lr: np.ndarray  # [b, 3, p, p]
    hr: np.ndarray  # [b, 3, sp, sp]
    d_lr: np.ndarray  # [b, 1, p, p], rows of the full LR image's map
    d_hr: np.ndarray  # [b, 1, sp, sp], rows of the full HR image's map
    origins: list = field(default_factory=list)  # (image index, y, x) in LR pixels


def crop_pair(pair: ImagePair, y: int, x: int, patch: int):
    """Aligned crops plus their distortion rows cut from the full-image maps."""
    s = pair.scale
    lr = pair.lr[:, y : y + patch, x : x + patch]
    hr = pair.hr[:, s * y : s * (y + patch), s * x : s * (x + patch)]
    d_lr = distortion_rows(pair.lr.shape[1])[y : y + patch].astype(np.float32)
    d_hr = distortion_rows(pair.hr.shape[1])[s * y : s * (y + patch)].astype(np.float32)
    d_lr = np.broadcast_to(d_lr[None, :, None], (1, patch, patch))
    d_hr = np.broadcast_to(d_hr[None, :, None], (1, s * patch, s * patch))
    return lr, hr, d_lr, d_hr


def _stack(items, origins) -> Batch:
    lr, hr, dl, dh = zip(*items)
    return Batch(np.stack(lr), np.stack(hr), np.stack(dl), np.stack(dh), list(origins))


def sample_patches(dataset: list[ImagePair], patch: int, batch: int, rng: np.random.Generator, hflip: bool = False) -> Batch:
    """Random aligned LR/HR crops.

    Images whose LR extents are below ``patch`` are skipped with a warning.
    With ``hflip`` each crop is mirrored left-right with probability 1/2,
    which keeps its row weights intact.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    usable = [i for i, p in enumerate(dataset) if p.lr.shape[1] >= patch and p.lr.shape[2] >= patch]
    for i, p in enumerate(dataset):
        if i not in usable:
            log.warning("skipping %s: LR extents %s smaller than patch %d", p.name, p.lr.shape[1:], patch)
    if not usable:
        raise DimensionError(f"no image is large enough for {patch}x{patch} patches")
    items, origins = [], []
    for _ in range(batch):
        i = usable[int(rng.integers(len(usable)))]
        pair = dataset[i]
        y = int(rng.integers(pair.lr.shape[1] - patch + 1))
        x = int(rng.integers(pair.lr.shape[2] - patch + 1))
        lr, hr, dl, dh = crop_pair(pair, y, x, patch)
        if hflip and rng.random() < 0.5:
            lr, hr = lr[:, :, ::-1], hr[:, :, ::-1]
        items.append((lr, hr, dl, dh))
        origins.append((i, y, x))
    return _stack(items, origins)


class RandomCropSampler:
    def __init__(self, dataset, patch: int, batch: int, hflip: bool = False):
        self.dataset, self.patch, self.batch, self.hflip = dataset, patch, batch, hflip

    def __call__(self, rng: np.random.Generator) -> Batch:
        return sample_patches(self.dataset, self.patch, self.batch, rng, self.hflip)


class FixedPatchSampler:
    """A fixed pool of patches; each call draws a random subset of ``batch`` of them."""

    def __init__(self, pool: Batch, batch: int | None = None):
        self.pool = pool
        self.batch = batch or len(pool.lr)

    def __call__(self, rng: np.random.Generator) -> Batch:
        idx = np.sort(rng.permutation(len(self.pool.lr))[: self.batch])
        p = self.pool
        return Batch(p.lr[idx], p.hr[idx], p.d_lr[idx], p.d_hr[idx], [p.origins[i] for i in idx])


def toy_patch_pool(n: int = 8, patch: int = 32, scale: int = 2, height: int = 128, seed: int = 0) -> Batch:
    """``n`` aligned patches (HR ``scale*patch`` square) from synthetic panoramas.

    Crop rows are spread from pole to equator so the pool covers strongly and
    weakly stretched latitudes.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    pairs = [make_pair(f"synthetic_{i}", synthetic_erp(height, rng), scale) for i in range(2)]
    h_lr, w_lr = pairs[0].lr.shape[1:]
    rows = np.linspace(0, h_lr - patch, n).round().astype(int)
    items, origins = [], []
    for k in range(n):
        i = k % len(pairs)
        x = int(rng.integers(w_lr - patch + 1))
        items.append(crop_pair(pairs[i], int(rows[k]), x, patch))
        origins.append((i, int(rows[k]), x))
    return _stack(items, origins)
