"""Command-line interface.

Subcommands: ``distmap``, ``infer``, ``train``, ``eval``, ``gradcheck``,
``dgg-dump`` and ``report``. Each writes a JSON run manifest. Exit codes:
0 success, 2 usage or configuration error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DimensionError, FormatError, IntegrityError, NumericError, RangeError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST_SCHEMA = 1
log = logging.getLogger("gdgt")


class UsageError(Exception):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def load_json_config(path) -> dict:
    """Parse a JSON file, reporting syntax errors with line and column."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e.strerror or e}") from e
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return obj


def parse_run_config(obj: dict):
    """Split a run config into (ModelConfig, TrainConfig, data section); unknown keys are rejected."""
    from .model import ModelConfig
    from .training import TrainConfig

    unknown = set(obj) - {"model", "train", "data"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    data = dict(obj.get("data", {}))
    unknown = set(data) - {"synthetic_images", "synthetic_height", "toy_pool"}
    if unknown:
        raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
    try:
        return ModelConfig.from_dict(obj.get("model", {})), TrainConfig.from_dict(obj.get("train", {})), data
    except TypeError as e:
        raise ConfigError(str(e)) from e


# ---------------------------------------------------------------- commands
def cmd_distmap(a, man) -> int:
    from .geometry import distortion_map, save_distortion_png, save_distortion_raw

    dm = distortion_map(a.height, a.width)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    save_distortion_png(dm, out / "distmap.png")
    save_distortion_raw(dm, out / "distmap.bin")
    with open(out / "distmap_rows.csv", "w") as f:
        f.write("row,weight\n")
        for i, v in enumerate(dm.weights[:, 0]):
            f.write(f"{i},{v!r}\n")
    print(" ".join(f"{v:.7f}" for v in dm.weights[:, 0]))
    man["outputs"] += [str(out / n) for n in ("distmap.png", "distmap.bin", "distmap_rows.csv")]
    man["manifest_path"] = out / "manifest.json"
    return EXIT_OK


def _load_model(path, scale=None):
    from .checkpoint import load_checkpoint

    model = load_checkpoint(path)
    if scale is not None and model.cfg.scale != scale:
        raise UsageError(f"checkpoint is a x{model.cfg.scale} model but --scale {scale} was requested")
    return model


def cmd_infer(a, man) -> int:
    from .data import read_image, write_image
    from .inference import upscale

    model = _load_model(a.checkpoint, a.scale)
    lr = read_image(a.input)
    sr = upscale(model, lr, tile=a.tile, overlap=a.overlap)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_image(out, sr)
    man.update(config_hash=model.cfg.digest(), seed=model.cfg.seed)
    man["inputs"] += [a.checkpoint, a.input]
    man["outputs"].append(str(out))
    man["manifest_path"] = out.with_name(out.name + ".manifest.json")
    return EXIT_OK


def _training_data(a, data_cfg: dict, mcfg, tcfg):
    from .data import FixedPatchSampler, RandomCropSampler, load_dataset, make_pair, synthetic_erp, toy_patch_pool
    from .training import make_rng

    if data_cfg.get("toy_pool"):
        pool = toy_patch_pool(int(data_cfg["toy_pool"]), tcfg.patch, mcfg.scale, seed=tcfg.seed)
        return FixedPatchSampler(pool, min(tcfg.batch, len(pool.lr)))
    if a.data:
        ds = load_dataset(a.data, mcfg.scale)
        if not ds:
            raise OSError(f"no images found in {a.data}")
    else:
        rng = make_rng(tcfg.seed + 1)
        n = int(data_cfg.get("synthetic_images", 4))
        h = int(data_cfg.get("synthetic_height", 128))
        ds = [make_pair(f"synthetic_{i}", synthetic_erp(h, rng), mcfg.scale) for i in range(n)]
    return RandomCropSampler(ds, tcfg.patch, tcfg.batch, tcfg.hflip)


def cmd_train(a, man) -> int:
    from .model import GDGT
    from .training import train_loop

    raw = load_json_config(a.config) if a.config else {}
    mcfg, tcfg, data_cfg = parse_run_config(raw)
    if a.raw_loss:
        tcfg.raw_loss = True
    if a.iters is not None:
        tcfg.total_iters = a.iters
        tcfg.validate()
    sampler = _training_data(a, data_cfg, mcfg, tcfg)
    model = GDGT(mcfg)
    out = Path(a.out)
    res = train_loop(model, sampler, tcfg, out_dir=out, resume_from=a.resume, stop_after=a.stop_after)
    print(json.dumps({"iterations": res.stopped_at, "first_loss": res.trace[0][2] if res.trace else None, "best_loss": res.best_loss, "best_iter": res.best_iter}))
    man.update(config_hash=_hash({"model": mcfg.to_dict(), "train": tcfg.to_dict(), "data": data_cfg}), seed=tcfg.seed)
    man["inputs"] += [p for p in (a.config, a.data, a.resume) if p]
    man["outputs"] += [str(p) for p in (res.final_path, res.best_path, out / "loss.csv") if p]
    man["manifest_path"] = out / "manifest.json"
    return EXIT_OK


def _fmt(v) -> str:
    return "inf" if isinstance(v, float) and math.isinf(v) else f"{v:.4f}"


def cmd_eval(a, man) -> int:
    from .data import IMAGE_SUFFIXES, make_lr, quantize, read_image
    from .geometry import distortion_map
    from .inference import upscale
    from .metrics import MetricReport, dataset_mean, evaluate_pair

    hr_dir = Path(a.hr_dir)
    if not hr_dir.is_dir():
        raise FileNotFoundError(f"HR directory {hr_dir} does not exist")
    files = sorted(p for p in hr_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no images in {hr_dir}")
    if a.scale == 1:
        model = None  # debug mode: SR is the HR image itself
    else:
        if not a.checkpoint:
            raise UsageError("--checkpoint is required unless --scale 1")
        model = _load_model(a.checkpoint, a.scale)
    reports: list[MetricReport] = []
    for p in files:
        hr = read_image(p)
        if model is None:
            sr = hr
        else:
            s = a.scale
            hr = hr[:, : hr.shape[1] - hr.shape[1] % s, : hr.shape[2] - hr.shape[2] % s]
            sr = upscale(model, make_lr(hr, s), tile=a.tile)
        hr8, sr8 = quantize(hr), quantize(sr)
        reports.append(evaluate_pair(p.stem, sr8, hr8, distortion_map(*hr8.shape[:2])))
    mean = dataset_mean(reports)
    lines = [json.dumps(r.to_json()) for r in reports]
    lines.append(json.dumps({"footer": "dataset_mean", "count": len(reports), **mean.to_json()}))
    header = f"{'image':<24}{'PSNR':>10}{'SSIM':>10}{'WS-PSNR':>10}{'WS-SSIM':>10}"
    table = [header] + [f"{r.name:<24}{_fmt(r.psnr):>10}{_fmt(r.ssim):>10}{_fmt(r.ws_psnr):>10}{_fmt(r.ws_ssim):>10}" for r in reports + [mean]]
    print("\n".join(lines))
    print("\n".join(table))
    if a.out:
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("\n".join(lines) + "\n")
        (out / "metrics.txt").write_text("\n".join(table) + "\n")
        with open(out / "metrics.csv", "w") as f:
            f.write("name,psnr,ssim,ws_psnr,ws_ssim\n")
            for r in reports:
                f.write(f"{r.name},{r.psnr!r},{r.ssim!r},{r.ws_psnr!r},{r.ws_ssim!r}\n")
        man["outputs"] += [str(out / n) for n in ("metrics.jsonl", "metrics.txt", "metrics.csv")]
        man["manifest_path"] = out / "manifest.json"
    man["inputs"] += [str(hr_dir)] + ([a.checkpoint] if a.checkpoint else [])
    if model is not None:
        man.update(config_hash=model.cfg.digest(), seed=model.cfg.seed)
    return EXIT_OK


def cmd_gradcheck(a, man) -> int:
    from .gradcheck import CHECKS, TOLERANCE, run_all

    names = None if a.module in (None, "all") else a.module.split(",")
    if names and any(n not in CHECKS for n in names):
        raise UsageError(f"unknown module(s); available: {', '.join(CHECKS)}")
    results = run_all(names, seed=a.seed)
    worst = max(results.values())
    for n, e in results.items():
        print(f"{n:<28}{e:.3e}  {'ok' if e < TOLERANCE else 'FAIL'}")
    man["seed"] = a.seed
    man["results"] = results
    return EXIT_OK if worst < TOLERANCE else EXIT_NUMERIC


def cmd_dgg_dump(a, man) -> int:
    from PIL import Image

    from .inference import guidance

    model = _load_model(a.checkpoint)
    h = a.height
    w = a.width or 2 * h
    g = guidance(model, h, w, a.index)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = float(g.min()), float(g.max())
    span = hi - lo if hi > lo else 1.0
    for i, ch in enumerate(g):
        Image.fromarray(np.rint((ch - lo) / span * 255).astype(np.uint8)).save(out / f"dgg_{a.index}_ch{i:03d}.png")
    np.savetxt(out / "dgg_rows.csv", g[:, :, 0].T, delimiter=",", header=",".join(f"ch{i}" for i in range(len(g))), comments="")
    (out / "dgg_range.json").write_text(json.dumps({"min": lo, "max": hi}))
    man.update(config_hash=model.cfg.digest(), seed=model.cfg.seed)
    man["inputs"].append(a.checkpoint)
    man["outputs"].append(str(out))
    man["manifest_path"] = out / "manifest.json"
    return EXIT_OK


def cmd_report(a, man) -> int:
    from .report import render_report

    if not Path(a.run).is_dir():
        raise FileNotFoundError(f"run directory {a.run} does not exist")
    summary = render_report(a.run, a.out, a.height, a.checkpoint)
    print(json.dumps(summary, indent=2, sort_keys=True))
    man["inputs"].append(a.run)
    man["outputs"] += [str(Path(a.out) / f) for f in summary["figures"] + summary["tables"]]
    man["manifest_path"] = Path(a.out) / "manifest.json"
    return EXIT_OK


# ------------------------------------------------------------------ parser
def _positive(v: str) -> int:
    try:
        n = int(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {v!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {n}")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gdgt", description="Distortion-aware omnidirectional image super-resolution.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--manifest", help="where to write the run manifest (default: next to the outputs)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("distmap", help="export the distortion map")
    s.add_argument("--height", type=_positive, required=True)
    s.add_argument("--width", type=_positive, required=True)
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_distmap)

    s = sub.add_parser("infer", help="super-resolve one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scale", type=_positive, required=True)
    s.add_argument("--tile", type=_positive, default=None, help="LR tile size; omit for whole-image inference")
    s.add_argument("--overlap", type=int, default=16)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", help="JSON run config with optional model/train/data sections")
    s.add_argument("--data", help="directory of HR images (default: synthetic panoramas)")
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="training checkpoint to continue from")
    s.add_argument("--stop-after", type=_positive, help="stop after this many total iterations")
    s.add_argument("--iters", type=_positive, help="override train.total_iters")
    s.add_argument("--raw-loss", action="store_true", help="unnormalized weighted l1 sum")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="compute PSNR/SSIM/WS-PSNR/WS-SSIM")
    s.add_argument("--checkpoint")
    s.add_argument("--hr-dir", required=True)
    s.add_argument("--scale", type=_positive, required=True, help="1 compares HR with itself (debug)")
    s.add_argument("--tile", type=_positive, default=None)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--module", default="all", help="comma-separated check names or 'all'")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("dgg-dump", help="write DGG guidance channels as PNGs")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--height", type=_positive, default=64)
    s.add_argument("--width", type=_positive, default=None)
    s.add_argument("--index", type=int, default=0, help="which DGG (in layer order)")
    s.set_defaults(func=cmd_dgg_dump)

    s = sub.add_parser("report", help="render figures and tables for a run directory")
    s.add_argument("--run", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--height", type=_positive, default=64)
    s.set_defaults(func=cmd_report)
    return p


def _write_manifest(man: dict, override) -> None:
    path = override or man.pop("manifest_path", None)
    man.pop("manifest_path", None)
    text = json.dumps(man, indent=2, sort_keys=True, default=str)
    if path is None:
        print(text, file=sys.stderr)
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    man = {
        "schema_version": MANIFEST_SCHEMA,
        "command": a.command,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "code_version": __version__,
        "config_hash": _hash({k: v for k, v in vars(a).items() if k != "func"}),
        "seed": None,
        "started": _now(),
        "inputs": [],
        "outputs": [],
    }
    code = EXIT_OK
    try:
        code = a.func(a, man)
    except (UsageError, ConfigError, DimensionError, RangeError) as e:
        print(f"error: {e}", file=sys.stderr)
        code = EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        code = EXIT_NUMERIC
    except (OSError, FormatError, IntegrityError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        code = EXIT_IO
    man["finished"] = _now()
    man["exit_code"] = code
    try:
        _write_manifest(man, a.manifest)
    except OSError as e:
        print(f"I/O error writing manifest: {e}", file=sys.stderr)
        code = code or EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
