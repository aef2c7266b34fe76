"""Adam, the step learning-rate schedule, and a resumable training loop.

All randomness after model construction flows through one Philox
generator whose state is stored with every training checkpoint, so an
interrupted run resumed from its last checkpoint reproduces the
uninterrupted run bit for bit.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from .errors import ConfigError, NumericError
from .metrics import ws_l1
from .model import GDGT
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 2e-4
    betas: tuple = (0.9, 0.99)
    eps: float = 1e-8
    total_iters: int = 2000
    milestones: tuple = (0.5, 0.8, 0.9, 0.95)
    batch: int = 16
    patch: int = 64  # LR pixels
    seed: int = 0
    raw_loss: bool = False
    hflip: bool = False
    log_every: int = 50
    checkpoint_every: int = 0  # 0: only final and best

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.milestones = tuple(float(m) for m in self.milestones)
        self.validate()

    def validate(self):
        m = self.milestones
        if any(not 0 < v < 1 for v in m) or any(a >= b for a, b in zip(m, m[1:])):
            raise ConfigError(f"milestones must be strictly increasing in (0, 1), got {m}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.total_iters < 1 or self.patch < 1:
            raise ConfigError("total_iters and patch must be positive")
        if not all(0 <= b < 1 for b in self.betas) or len(self.betas) != 2:
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"], d["milestones"] = list(self.betas), list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(it: int, cfg: TrainConfig) -> float:
    """``lr0`` halved once for every milestone ``it`` has reached."""
    if not 0 <= it <= cfg.total_iters:
        raise ValueError(f"iteration {it} outside [0, {cfg.total_iters}]")
    passed = sum(it >= round(m * cfg.total_iters) for m in cfg.milestones)
    return cfg.lr0 * 0.5**passed


class Adam:
    """Bias-corrected Adam over a fixed, named parameter list."""

    def __init__(self, named_params, betas=(0.9, 0.99), eps=1e-8):
        self.params = list(named_params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self, lr: float, iteration: int | None = None) -> None:
        for n, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in {n} at iteration {iteration}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.b1**t
        c2 = 1.0 - self.b2**t
        for n, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            denom = np.sqrt(v / np.asarray(c2, dtype=v.dtype)) + np.asarray(self.eps, dtype=v.dtype)
            p.data = p.data - np.asarray(lr / c1, dtype=p.data.dtype) * m / denom

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"__adam_step__": np.array([self.step_count], dtype=np.float64)}
        for n, _ in self.params:
            out[f"__adam_m__.{n}"] = self.m[n]
            out[f"__adam_v__.{n}"] = self.v[n]
        return out

    def load_state_tensors(self, t: dict[str, np.ndarray]) -> None:
        self.step_count = int(t["__adam_step__"][0])
        for n, p in self.params:
            self.m[n] = t[f"__adam_m__.{n}"].astype(p.data.dtype)
            self.v[n] = t[f"__adam_v__.{n}"].astype(p.data.dtype)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _rng_state_json(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state

    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return {"__ndarray__": v.tolist(), "dtype": str(v.dtype)}
        return v

    return conv(st)


def _rng_from_json(st: dict) -> np.random.Generator:
    def conv(v):
        if isinstance(v, dict) and "__ndarray__" in v:
            return np.array(v["__ndarray__"], dtype=v["dtype"])
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v

    rng = np.random.Generator(np.random.Philox())
    rng.bit_generator.state = conv(st)
    return rng


@dataclass
class TrainResult:
    trace: list  # (iteration, lr, loss)
    best_loss: float
    best_iter: int
    stopped_at: int  # iterations completed
    final_path: Path | None = None
    best_path: Path | None = None


def smoothed(values, alpha: float = 0.98) -> np.ndarray:
    """Exponential moving average with bias correction."""
    out = np.empty(len(values))
    acc = 0.0
    for i, v in enumerate(values):
        acc = alpha * acc + (1 - alpha) * v
        out[i] = acc / (1 - alpha ** (i + 1))
    return out


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "lr", "ws_l1"])
        for it, lr, loss in trace:
            w.writerow([it, repr(lr), repr(loss)])


def read_trace(path) -> list:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [(int(r["iter"]), float(r["lr"]), float(r["ws_l1"])) for r in rows]


def _state_extra(opt: Adam, rng, it_next: int, trace, best, cfg: TrainConfig) -> dict:
    meta = {"iteration": it_next, "rng": _rng_state_json(rng), "best_loss": best[0], "best_iter": best[1], "train_config": cfg.to_dict()}
    extra = {"__train_state__": ckpt.json_blob(meta), "__trace__": np.array(trace, dtype=np.float64).reshape(-1, 3)}
    extra.update(opt.state_tensors())
    return extra


def train_loop(
    model: GDGT,
    sampler: Callable[[np.random.Generator], object],
    cfg: TrainConfig,
    out_dir=None,
    resume_from=None,
    stop_after: int | None = None,
    early_stop: Callable[[int, float, list], bool] | None = None,
) -> TrainResult:
    """Sample, forward, WS-l1, backward, Adam, repeat.

    Parameters
    ----------
    sampler : callable
        ``sampler(rng) -> Batch``; must draw all randomness from ``rng``.
    out_dir : path, optional
        Receives ``final.gdgt``, ``best.gdgt`` and ``loss.csv``.
    resume_from : path, optional
        Training checkpoint written by an earlier call; restores parameters,
        optimizer moments, generator state and the loss trace.
    stop_after : int, optional
        Stop (and checkpoint) after this many total iterations, simulating
        an interruption.
    early_stop : callable, optional
        ``early_stop(it, loss, trace) -> bool`` checked after each step.
    """
    params = list(model.named_parameters())
    opt = Adam(params, cfg.betas, cfg.eps)
    rng = make_rng(cfg.seed)
    trace: list = []
    best = (math.inf, -1)
    start = 0
    best_state = None
    if resume_from is not None:
        loaded, extra = ckpt.load_checkpoint(resume_from, expected=model.cfg, with_extra=True)
        for (_, p), (_, q) in zip(params, loaded.named_parameters()):
            p.data = q.data
        meta = ckpt.read_json_blob(extra["__train_state__"])
        opt.load_state_tensors(extra)
        rng = _rng_from_json(meta["rng"])
        start = meta["iteration"]
        best = (meta["best_loss"], meta["best_iter"])
        trace = [(int(a), float(b), float(c)) for a, b, c in extra["__trace__"]]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume_from is not None and (out / "best.gdgt").exists():
            best_state = ckpt.decode((out / "best.gdgt").read_bytes())
    end = cfg.total_iters if stop_after is None else min(stop_after, cfg.total_iters)
    it = start
    while it < end:
        lr = lr_at(it, cfg)
        batch = sampler(rng)
        model.zero_grad()
        pred = model(Tensor(batch.lr), Tensor(batch.d_lr))
        loss = ws_l1(pred, Tensor(batch.hr), Tensor(batch.d_hr), normalize=not cfg.raw_loss)
        lval = float(loss.data)
        if not math.isfinite(lval):
            if out is not None:
                write_trace(out / "loss_trace_dump.csv", trace + [(it, lr, lval)])
            raise NumericError(f"non-finite loss {lval} at iteration {it}")
        loss.backward()
        if lval < best[0]:
            best = (lval, it)
            if out is not None:
                # Adam rebinds p.data, so these references keep the weights
                # that produced this loss
                best_state = ckpt.model_tensors(model)
        opt.step(lr, it)
        trace.append((it, lr, lval))
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("iter %d lr %.3g ws_l1 %.6f", it, lr, lval)
        it += 1
        if out is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            ckpt.save_checkpoint(model, out / "last.gdgt", _state_extra(opt, rng, it, trace, best, cfg))
        if early_stop is not None and early_stop(it - 1, lval, trace):
            break
    result = TrainResult(trace, best[0], best[1], it)
    if out is not None:
        result.final_path = out / "final.gdgt"
        ckpt.save_checkpoint(model, result.final_path, _state_extra(opt, rng, it, trace, best, cfg))
        if best_state is not None:
            result.best_path = out / "best.gdgt"
            ckpt.write_atomic(result.best_path, ckpt.encode(best_state))
        write_trace(out / "loss.csv", trace)
    return result
