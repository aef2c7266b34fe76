import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from gdgt.checkpoint import save_checkpoint
from gdgt.cli import main
from gdgt.data import read_image, synthetic_erp, write_image
from gdgt.geometry import distortion_rows, load_distortion_png
from gdgt.gradcheck import randomize
from gdgt.inference import upscale
from gdgt.model import GDGT, ModelConfig
from gdgt.training import make_rng


def tiny(**kw):
    base = dict(num_dabs=1, dals_per_dab=1, embed_dim=8, heads=2, hwin=(2, 4), vwin=(4, 2))
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpt")
    model = randomize(GDGT(tiny()), np.random.default_rng(0), 0.05)
    model.astype(np.float32)
    save_checkpoint(model, d / "m.gdgt")
    return d / "m.gdgt"


@pytest.fixture(scope="module")
def lr_png(tmp_path_factory):
    d = tmp_path_factory.mktemp("img")
    write_image(d / "lr.png", synthetic_erp(12, make_rng(0))[:, :, :20])
    return d / "lr.png"


def manifest(path):
    m = json.loads(path.read_text())
    for key in ("schema_version", "command", "argv", "code_version", "config_hash", "seed", "started", "finished", "inputs", "outputs", "exit_code"):
        assert key in m
    return m


class TestDistmap:
    def test_rows_and_files(self, tmp_path, capsys):
        assert main(["distmap", "--height", "4", "--width", "8", "--out", str(tmp_path)]) == 0
        assert capsys.readouterr().out.split() == ["0.3826834", "0.9238795", "0.9238795", "0.3826834"]
        back = load_distortion_png(tmp_path / "distmap.png")
        assert back.shape == (4, 8)
        assert np.abs(back[:, 0] - distortion_rows(4)).max() <= 0.5 / 65535 + 1e-15
        assert manifest(tmp_path / "manifest.json")["exit_code"] == 0

    @pytest.mark.parametrize("h", ["0", "-3", "x"])
    def test_bad_height_exit_2(self, tmp_path, h):
        with pytest.raises(SystemExit) as e:
            main(["distmap", "--height", h, "--width", "8", "--out", str(tmp_path)])
        assert e.value.code == 2


class TestInfer:
    def test_extents_and_determinism(self, tmp_path, ckpt, lr_png):
        for name in ("a.png", "b.png"):
            assert main(["infer", "--checkpoint", str(ckpt), "--in", str(lr_png), "--out", str(tmp_path / name), "--scale", "2"]) == 0
        with Image.open(tmp_path / "a.png") as im:
            assert im.size == (40, 24)
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
        m = manifest(tmp_path / "a.png.manifest.json")
        assert m["config_hash"] == tiny().digest()

    def test_scale_mismatch_exit_2(self, tmp_path, ckpt, lr_png):
        assert main(["infer", "--checkpoint", str(ckpt), "--in", str(lr_png), "--out", str(tmp_path / "x.png"), "--scale", "4"]) == 2

    def test_missing_checkpoint_exit_3(self, tmp_path, lr_png):
        assert main(["infer", "--checkpoint", str(tmp_path / "none.gdgt"), "--in", str(lr_png), "--out", str(tmp_path / "x.png"), "--scale", "2"]) == 3

    def test_unreadable_image_exit_3(self, tmp_path, ckpt):
        (tmp_path / "junk.png").write_bytes(b"not an image")
        assert main(["infer", "--checkpoint", str(ckpt), "--in", str(tmp_path / "junk.png"), "--out", str(tmp_path / "x.png"), "--scale", "2"]) == 3

    def test_corrupt_checkpoint_exit_3(self, tmp_path, ckpt, lr_png):
        blob = bytearray(ckpt.read_bytes())
        blob[100] ^= 4
        (tmp_path / "bad.gdgt").write_bytes(bytes(blob))
        assert main(["infer", "--checkpoint", str(tmp_path / "bad.gdgt"), "--in", str(lr_png), "--out", str(tmp_path / "x.png"), "--scale", "2"]) == 3


def test_tiled_matches_whole_image(ckpt):
    from gdgt.checkpoint import load_checkpoint

    model = load_checkpoint(ckpt)
    lr = synthetic_erp(128, make_rng(1))
    whole = upscale(model, lr)
    tiled = upscale(model, lr, tile=64, overlap=16)
    assert whole.shape == tiled.shape == (3, 256, 512)
    assert np.abs(whole - tiled).max() < 1 / 255


class TestTrainEval:
    def test_train_resume_matches(self, tmp_path):
        cfg = {"model": tiny().to_dict(), "train": {"batch": 2, "patch": 8, "total_iters": 6, "log_every": 0}, "data": {"synthetic_images": 2, "synthetic_height": 32}}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        c = str(tmp_path / "c.json")
        assert main(["train", "--config", c, "--out", str(tmp_path / "full")]) == 0
        assert main(["train", "--config", c, "--out", str(tmp_path / "part"), "--stop-after", "2"]) == 0
        assert main(["train", "--config", c, "--out", str(tmp_path / "part"), "--resume", str(tmp_path / "part" / "final.gdgt")]) == 0
        assert (tmp_path / "full" / "final.gdgt").read_bytes() == (tmp_path / "part" / "final.gdgt").read_bytes()
        assert (tmp_path / "full" / "loss.csv").read_text() == (tmp_path / "part" / "loss.csv").read_text()
        assert manifest(tmp_path / "full" / "manifest.json")["seed"] == 0

    def test_config_errors_exit_2(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text('{"model": {"embed_dim": 8,,}}')
        assert main(["train", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 2
        assert "line 1, column" in capsys.readouterr().err
        (tmp_path / "unk.json").write_text('{"model": {"depth": 3}}')
        assert main(["train", "--config", str(tmp_path / "unk.json"), "--out", str(tmp_path / "o")]) == 2

    def test_eval_identity_is_inf(self, tmp_path, capsys):
        hr = tmp_path / "hr"
        hr.mkdir()
        write_image(hr / "p.png", synthetic_erp(16, make_rng(2)))
        with pytest.warns(UserWarning, match="infinite"):
            assert main(["eval", "--hr-dir", str(hr), "--scale", "1", "--out", str(tmp_path / "ev")]) == 0
        first = json.loads(capsys.readouterr().out.splitlines()[0])
        assert first["psnr"] == "inf" and first["ws_psnr"] == "inf" and first["ssim"] == 1.0
        assert (tmp_path / "ev" / "metrics.csv").exists()

    def test_eval_with_model(self, tmp_path, ckpt, capsys):
        hr = tmp_path / "hr"
        hr.mkdir()
        write_image(hr / "p.png", synthetic_erp(16, make_rng(3)))
        assert main(["eval", "--checkpoint", str(ckpt), "--hr-dir", str(hr), "--scale", "2"]) == 0
        rec = json.loads(capsys.readouterr().out.splitlines()[0])
        assert np.isfinite(rec["psnr"]) and rec["name"] == "p"

    def test_eval_missing_dir_exit_3(self, tmp_path):
        assert main(["eval", "--hr-dir", str(tmp_path / "none"), "--scale", "1"]) == 3


def test_gradcheck_subset_exit_0(capsys):
    assert main(["gradcheck", "--module", "softmax,conv2d"]) == 0
    assert "softmax" in capsys.readouterr().out
    assert main(["gradcheck", "--module", "nope"]) == 2


def test_dgg_dump(tmp_path, ckpt):
    assert main(["dgg-dump", "--checkpoint", str(ckpt), "--out", str(tmp_path), "--height", "16"]) == 0
    rows = np.loadtxt(tmp_path / "dgg_rows.csv", delimiter=",", skiprows=1)
    assert rows.shape == (16, 8)
    assert len(list(tmp_path.glob("dgg_0_ch*.png"))) == 8


def test_report_renders_figures(tmp_path):
    cfg = {"model": tiny().to_dict(), "train": {"batch": 2, "patch": 8, "total_iters": 4, "log_every": 0}, "data": {"synthetic_images": 1, "synthetic_height": 32}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "run")]) == 0
    assert main(["report", "--run", str(tmp_path / "run"), "--out", str(tmp_path / "rep"), "--height", "16"]) == 0
    for name in ("loss.png", "distortion_profile.png", "dgg_channels.png", "ddsa_offsets.png", "report.json"):
        assert (tmp_path / "rep" / name).stat().st_size > 0


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "gdgt", "distmap", "--height", "2", "--width", "2", "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.split() == ["0.7071068", "0.7071068"]
    r = subprocess.run([sys.executable, "-m", "gdgt", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "0.1.0" in r.stdout
