"""Figures and tabular summaries for a training / evaluation run.

Everything is rendered off-screen to PNG files next to CSV and JSON
versions of the same numbers, so a figure can always be checked against
its data.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import distortion_rows  # noqa: E402
from .training import smoothed  # noqa: E402

METRIC_KEYS = ("psnr", "ssim", "ws_psnr", "ws_ssim")


def plot_loss(trace, path) -> None:
    its = [t[0] for t in trace]
    loss = [t[2] for t in trace]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(its, loss, lw=0.8, alpha=0.5, label="WS-l1")
    ax.plot(its, smoothed(loss), lw=1.5, label="EMA (0.98)")
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_distortion_profile(H: int, path) -> np.ndarray:
    rows = distortion_rows(H)
    lat = 90.0 - (np.arange(H) + 0.5) * 180.0 / H
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(rows, lat)
    ax.set_xlabel("weight D")
    ax.set_ylabel("latitude (deg)")
    ax.set_xlim(0, 1.05)
    ax.set_title(f"distortion map, H={H}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return rows


def plot_metrics(records: list[dict], path) -> None:
    names = [r["name"] for r in records]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    x = np.arange(len(names))
    for ax, keys in zip(axes, (("psnr", "ws_psnr"), ("ssim", "ws_ssim"))):
        for j, k in enumerate(keys):
            vals = [float(r[k]) if math.isfinite(float(r[k])) else np.nan for r in records]
            ax.bar(x + (j - 0.5) * 0.4, vals, width=0.4, label=k)
        ax.set_xticks(x, names, rotation=45, ha="right", fontsize=7)
        ax.legend(fontsize=8)
    axes[0].set_ylabel("dB")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_channels(g: np.ndarray, path, max_channels: int = 16) -> None:
    n = min(len(g), max_channels)
    cols = 4
    rows = math.ceil(n / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 1.3 * rows), squeeze=False)
    for i, ax in enumerate(axes.flat):
        ax.axis("off")
        if i < n:
            ax.imshow(g[i], cmap="gray", aspect="auto")
            ax.set_title(f"ch {i}", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_offset_profile(profile: np.ndarray, path) -> None:
    h = len(profile)
    lat = 90.0 - (np.arange(h) + 0.5) * 180.0 / h
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(profile[:, 1], lat, label="mean |dx|")
    ax.plot(profile[:, 0], lat, label="mean |dy|")
    ax.set_xlabel("offset (LR pixels)")
    ax.set_ylabel("latitude (deg)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def render_report(run_dir, out_dir, height: int = 64, checkpoint=None) -> dict:
    """Render every figure the available artefacts allow.

    Looks for ``loss.csv`` and ``metrics.csv`` in ``run_dir`` and, if a
    checkpoint is given (default ``run_dir/final.gdgt``), the DGG guidance
    and the DDSA offset profile on a synthetic panorama of LR height
    ``height``. Returns the summary that is also written to ``report.json``.
    """
    from .checkpoint import load_checkpoint
    from .data import make_lr, synthetic_erp
    from .errors import ConfigError
    from .inference import guidance, offset_profile
    from .training import make_rng, read_trace

    run, out = Path(run_dir), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary: dict = {"figures": [], "tables": []}

    rows = plot_distortion_profile(height, out / "distortion_profile.png")
    write_csv(out / "distortion_profile.csv", ["row", "weight"], [(i, repr(float(v))) for i, v in enumerate(rows)])
    summary["figures"].append("distortion_profile.png")
    summary["tables"].append("distortion_profile.csv")

    if (run / "loss.csv").exists():
        trace = read_trace(run / "loss.csv")
        if trace:
            plot_loss(trace, out / "loss.png")
            summary["figures"].append("loss.png")
            summary["loss"] = {"first": trace[0][2], "last": trace[-1][2], "min": min(t[2] for t in trace), "iterations": len(trace)}

    if (run / "metrics.csv").exists():
        with open(run / "metrics.csv", newline="") as f:
            recs = list(csv.DictReader(f))
        if recs:
            plot_metrics(recs, out / "metrics.png")
            summary["figures"].append("metrics.png")

    ck = Path(checkpoint) if checkpoint is not None else run / "final.gdgt"
    if ck.exists():
        model = load_checkpoint(ck)
        w = 2 * height
        try:
            g = guidance(model, height, w)
            plot_channels(g, out / "dgg_channels.png")
            write_csv(out / "dgg_rows.csv", ["row"] + [f"ch{i}" for i in range(len(g))], [[i] + [repr(float(v)) for v in g[:, i, 0]] for i in range(height)])
            summary["figures"].append("dgg_channels.png")
            summary["tables"].append("dgg_rows.csv")
        except ConfigError:
            pass
        try:
            hr = synthetic_erp(height * model.cfg.scale, make_rng(12345))
            prof = offset_profile(model, make_lr(hr, model.cfg.scale))
            plot_offset_profile(prof, out / "ddsa_offsets.png")
            write_csv(out / "ddsa_offsets.csv", ["row", "mean_abs_dy", "mean_abs_dx"], [(i, repr(float(a)), repr(float(b))) for i, (a, b) in enumerate(prof)])
            summary["figures"].append("ddsa_offsets.png")
            summary["tables"].append("ddsa_offsets.csv")
            q = max(1, height // 8)
            summary["ddsa"] = {"pole_mean_abs_dx": float(np.r_[prof[:q, 1], prof[-q:, 1]].mean()), "equator_mean_abs_dx": float(prof[height // 2 - q : height // 2 + q, 1].mean())}
        except ConfigError:
            pass

    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
