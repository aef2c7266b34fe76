"""Network assembly: shallow conv, residual DAB groups, pixel-shuffle upsampler."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import DDSA, DMRSA
from .dfa import DFA
from .dgg import DGG
from .errors import ConfigError, DimensionError
from .geometry import distortion_rows
from .nn import Conv2d, LayerNorm, Module, ModuleList
from .tensor import Tensor
from .windowing import WindowSpec


@dataclass
class ModelConfig:
    num_dabs: int = 2
    dals_per_dab: int = 2
    embed_dim: int = 32
    heads: int = 2
    hwin: tuple = (4, 16)
    vwin: tuple = (16, 4)
    scale: int = 2
    in_channels: int = 3
    mlp_ratio: float = 2.0
    rpe_hidden: int = 32
    ddsa_points: int = 9
    ddsa_radius: float = 8.0
    ddsa_spacing: float = 1.0
    dfa_reduction: int = 4
    use_dmrsa: bool = True
    use_ddsa: bool = True
    use_dgg: bool = True
    use_diff: bool = True
    dacb: str = "DACB-sub"
    seed: int = 0

    def __post_init__(self):
        self.hwin = tuple(int(v) for v in self.hwin)
        self.vwin = tuple(int(v) for v in self.vwin)
        self.validate()

    def validate(self):
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.heads % 2:
            raise ConfigError(f"heads must be even (half H-Rwin, half V-Rwin), got {self.heads}")
        if self.scale < 2 or self.scale & (self.scale - 1):
            raise ConfigError(f"scale must be a power of two, got {self.scale}")
        if self.num_dabs < 1 or self.dals_per_dab < 1:
            raise ConfigError("need at least one DAB and one DAL per DAB")
        if self.embed_dim % self.dfa_reduction:
            raise ConfigError(f"dfa_reduction {self.dfa_reduction} does not divide {self.embed_dim}")
        if self.dacb != "DACB-sub":
            raise ConfigError(f"only the 'DACB-sub' block is implemented, got {self.dacb!r}")

    @property
    def window_multiple(self) -> tuple[int, int]:
        """Extents the deep features must be divisible by."""
        return (math.lcm(self.hwin[0], self.vwin[0]), math.lcm(self.hwin[1], self.vwin[1]))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hwin"] = list(self.hwin)
        d["vwin"] = list(self.vwin)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        base = dict(num_dabs=1, dals_per_dab=2, embed_dim=32, heads=2, scale=2)
        base.update(kw)
        return cls(**base)

    @classmethod
    def large(cls, **kw) -> "ModelConfig":
        base = dict(num_dabs=6, dals_per_dab=6, embed_dim=156, heads=6, hwin=(8, 64), vwin=(64, 8))
        base.update(kw)
        return cls(**base)


def distortion_tensor(h: int, w: int, batch: int = 1, dtype=np.float32) -> Tensor:
    rows = distortion_rows(h).astype(dtype)
    return Tensor(np.broadcast_to(rows[None, None, :, None], (batch, 1, h, w)).copy())


class MLP(Module):
    def __init__(self, dim, ratio, rng):
        super().__init__()
        hidden = int(round(dim * ratio))
        self.fc1 = Conv2d(dim, hidden, 1, rng, init="trunc_normal")
        self.fc2 = Conv2d(hidden, dim, 1, rng, init="zeros")

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class DAL(Module):
    """Pre-norm transformer layer fusing DMRSA and DDSA through DFA."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        C = cfg.embed_dim
        self.norm1 = LayerNorm(C)
        if cfg.use_dmrsa:
            if cfg.use_dgg:
                self.dgg = DGG(C, rng)
            self.dmrsa = DMRSA(C, cfg.heads, WindowSpec(*cfg.hwin), WindowSpec(*cfg.vwin), rng, cfg.rpe_hidden)
        if cfg.use_ddsa:
            self.ddsa = DDSA(C, cfg.heads, cfg.ddsa_points, cfg.ddsa_radius, cfg.ddsa_spacing, rng)
        if cfg.use_dmrsa and cfg.use_ddsa:
            self.dfa = DFA(C, cfg.dfa_reduction, cfg.use_diff, rng)
        self.norm2 = LayerNorm(C)
        self.mlp = MLP(C, cfg.mlp_ratio, rng)
        self.cfg = cfg

    def forward(self, x: Tensor, d: Tensor) -> Tensor:
        cfg = self.cfg
        xn = self.norm1(x)
        f1 = f2 = None
        if cfg.use_dmrsa:
            g = self.dgg(d) if cfg.use_dgg else None
            f1 = self.dmrsa(xn, g)
        if cfg.use_ddsa:
            f2 = self.ddsa(xn, d)
        if f1 is not None and f2 is not None:
            u = x + self.dfa(f1, f2)
        elif f1 is not None or f2 is not None:
            u = x + (f1 if f1 is not None else f2)
        else:
            u = x
        return u + self.mlp(self.norm2(u))


class DACBSub(Module):
    """Stand-in for the distortion-aware conv block: conv3x3 on [x, D], GELU, conv1x1."""

    def __init__(self, C, rng):
        super().__init__()
        self.conv = Conv2d(C + 1, C, 3, rng)
        self.proj = Conv2d(C, C, 1, rng)

    def forward(self, x, d):
        return self.proj(T.gelu(self.conv(T.concat([x, d], axis=1))))


class DAB(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.dal = ModuleList(DAL(cfg, rng) for _ in range(cfg.dals_per_dab))
        self.conv = Conv2d(cfg.embed_dim, cfg.embed_dim, 3, rng)
        self.dacb = DACBSub(cfg.embed_dim, rng)

    def forward(self, x: Tensor, d: Tensor) -> Tensor:
        y = x
        for layer in self.dal:
            y = layer(y, d)
        return x + self.dacb(self.conv(y), d)


class GDGT(Module):
    """Full super-resolution network.

    ``forward(lr, d)`` takes ``lr[b, C_in, h, w]`` in [0, 1] and an optional
    per-sample distortion map ``d[b, 1, h, w]``; without one the full-image
    map for extent ``h`` is used.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        rng = np.random.default_rng(cfg.seed)
        C = cfg.embed_dim
        self.shallow = Conv2d(cfg.in_channels, C, 3, rng)
        self.dab = ModuleList(DAB(cfg, rng) for _ in range(cfg.num_dabs))
        self.body_conv = Conv2d(C, C, 3, rng)
        self.up = ModuleList(Conv2d(C, 4 * C, 3, rng) for _ in range(int(math.log2(cfg.scale))))
        self.last = Conv2d(C, cfg.in_channels, 3, rng)
        self.cfg = cfg

    def forward(self, lr: Tensor, d: Tensor | None = None, pad: bool = True) -> Tensor:
        b, c, h, w = lr.shape
        if c != self.cfg.in_channels:
            raise DimensionError(f"model expects {self.cfg.in_channels} input channels, got {c}")
        if h < 1 or w < 1:
            raise DimensionError(f"degenerate input extents {h}x{w}")
        if d is None:
            d = distortion_tensor(h, w, b, lr.dtype)
        elif d.shape != (b, 1, h, w):
            raise DimensionError(f"distortion map shape {d.shape} does not match input {lr.shape}")
        f0 = self.shallow(lr)
        mh, mw = self.cfg.window_multiple
        ph, pw = (-h) % mh, (-w) % mw
        if (ph or pw) and not pad:
            raise DimensionError(f"extents {h}x{w} not divisible by {mh}x{mw} and padding disabled")
        feats, dd = f0, d
        if ph or pw:
            feats = T.pad2d(f0, (0, ph, 0, pw), "reflect")
            dd = T.pad2d(d, (0, ph, 0, pw), "reflect")
        for block in self.dab:
            feats = block(feats, dd)
        if ph or pw:
            feats = feats[:, :, :h, :w]
        y = self.body_conv(feats) + f0
        for conv in self.up:
            y = T.pixel_shuffle(conv(y), 2)
        return self.last(y)


def gdgt_forward(lr: Tensor, model: GDGT, d: Tensor | None = None) -> Tensor:
    return model(lr, d)
