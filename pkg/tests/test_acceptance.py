"""Acceptance suite: one test (or test group) per criterion.

A PASS/FAIL line per criterion, with its runtime, is printed in the
terminal summary. Runtime limits are asserted inside each test.
"""

import math
import time

import mpmath
import numpy as np
import pytest

from gdgt.attention import DDSA, DMRSA, dmrsa, rwin_sa
from gdgt.checkpoint import decode, load_checkpoint, save_checkpoint
from gdgt.dfa import DFA, dfa
from gdgt.dgg import DGG
from gdgt.errors import IntegrityError
from gdgt.geometry import distortion_map, distortion_rows
from gdgt.gradcheck import CHECKS, TOLERANCE, randomize
from gdgt.metrics import psnr, ssim, ws_l1, ws_psnr
from gdgt.model import GDGT, ModelConfig, distortion_tensor
from gdgt.tensor import Tensor
from gdgt.windowing import WindowSpec, merge, partition

from conftest import TOY_DROP
from test_attention import gather_oracle, make_ddsa


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


class Timer:
    def __init__(self, limit):
        self.limit = limit

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0
        if exc[0] is None:
            assert self.seconds < self.limit, f"took {self.seconds:.2f} s, limit {self.limit} s"


@pytest.mark.criterion(1, "distortion-map exactness")
def test_c01_distortion_map():
    with Timer(1.0):
        mpmath.mp.dps = 40
        for H in (2, 4, 128, 1024):
            w = distortion_map(H, 7).weights
            assert w.dtype == np.float64
            ref = np.array([float(mpmath.cos((h + mpmath.mpf(0.5) - mpmath.mpf(H) / 2) * mpmath.pi / H)) for h in range(H)])
            assert np.abs(w[:, 0] - ref).max() <= 1e-12
            assert np.array_equal(w, w[::-1])
            assert np.all(w == w[:, :1])
        np.testing.assert_allclose(distortion_rows(4), [0.3826834, 0.9238795, 0.9238795, 0.3826834], atol=5e-8)


@pytest.mark.criterion(2, "window partition/merge round trip")
def test_c02_window_round_trip():
    rng = np.random.default_rng(2)
    with Timer(5.0):
        for _ in range(50):
            rh, rw = sorted(rng.integers(1, 9, 2))
            for spec in (WindowSpec(int(rh), int(rw)), WindowSpec(int(rw), int(rh))):
                b, c = rng.integers(1, 3), rng.integers(1, 5)
                h, w = spec.rh * rng.integers(1, 4), spec.rw * rng.integers(1, 4)
                x = rng.normal(size=(b, c, h, w))
                assert np.array_equal(merge(partition(t64(x), spec), spec, (h, w)).data, x)


def _dmrsa_zero_bias(seed):
    rng = np.random.default_rng(seed)
    m = randomize(DMRSA(8, 2, WindowSpec(4, 16), WindowSpec(16, 4), rng, rpe_hidden=8), rng, 0.3)
    for mlp in (m.rpe_h, m.rpe_v):
        for _, p in mlp.named_parameters():
            p.data = np.zeros(p.shape)
    return m


@pytest.mark.criterion(3, "DMRSA reduces to Rwin-SA under unit guidance")
def test_c03_dmrsa_reduction():
    with Timer(10.0):
        for seed in range(20):
            m = _dmrsa_zero_bias(seed)
            x = t64(np.random.default_rng(100 + seed).normal(size=(1, 8, 16, 32)))
            assert np.abs(dmrsa(x, t64(np.ones(x.shape)), m).data - rwin_sa(x, m).data).max() == 0.0


@pytest.mark.criterion(4, "attention normalization and locality")
def test_c04_normalization_and_locality():
    with Timer(10.0):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            m = randomize(DMRSA(8, 2, WindowSpec(4, 16), WindowSpec(16, 4), rng, rpe_hidden=8), rng, 0.5)
            x = rng.normal(size=(1, 8, 16, 32))
            y0, attns = m.attend(t64(x))
            for a in attns:
                assert np.abs(a.data.sum(-1) - 1).max() <= 1e-6
            _, attn, _ = randomize(DDSA(8, 2, rng=rng), rng, 0.3).attend(t64(x), distortion_tensor(16, 32, 1, np.float64))
            assert np.abs(attn.data.sum(axis=1) - 1).max() <= 1e-6
            # perturb everything outside the H-window at rows 0:4, cols 0:16
            # and the V-window at rows 0:16, cols 0:4
            xp = x.copy()
            mask = np.ones((16, 32), bool)
            mask[0:4, 0:16] = False
            mask[0:16, 0:4] = False
            xp[..., mask] += rng.normal(size=xp[..., mask].shape)
            y1 = m.attend(t64(xp))[0].data
            assert np.array_equal(y1[:, :4, 0:4, 0:16], y0.data[:, :4, 0:4, 0:16])
            assert np.array_equal(y1[:, 4:, 0:16, 0:4], y0.data[:, 4:, 0:16, 0:4])


@pytest.mark.criterion(5, "DGG latitude constancy")
def test_c05_dgg_row_constant():
    with Timer(5.0):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            m = randomize(DGG(16, rng), rng, 0.5)
            h, w = int(rng.integers(2, 40)), int(rng.integers(1, 80))
            g = m(distortion_tensor(h, w, 1, np.float64)).data
            assert np.all(g == g[..., :1])


@pytest.mark.criterion(6, "DFA fixed point and convexity")
def test_c06_dfa():
    with Timer(5.0):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            for use_diff in (True, False):
                m = randomize(DFA(16, 4, use_diff, rng), rng, 0.8)
                f = t64(rng.normal(size=(2, 16, 6, 6)))
                g = t64(rng.normal(size=(2, 16, 6, 6)))
                assert np.array_equal(dfa(f, f, m).data, f.data)
                ms, ns = m.weights(f, g)
                assert np.abs(ms.data + ns.data - 1).max() <= 1e-7
        for conv in (m.expand_m, m.expand_n):
            conv.weight.data = np.zeros(conv.weight.shape)
            conv.bias.data = np.zeros(conv.bias.shape)
        assert np.array_equal(dfa(f, g, m).data, (f.data + g.data) * 0.5)


@pytest.mark.criterion(7, "gradient suite")
def test_c07_gradients():
    with Timer(60.0):
        worst = {name: fn(0) for name, fn in CHECKS.items()}
    for required in ("dal", "model_2dab", "dgg", "dmrsa", "ddsa", "dfa", "conv2d", "bilinear_sample", "ws_l1"):
        assert required in worst
    bad = {k: v for k, v in worst.items() if not v < TOLERANCE}
    assert not bad, bad


@pytest.mark.criterion(8, "DDSA degeneracy to regular-grid attention")
def test_c08_ddsa_degeneracy():
    with Timer(5.0):
        for seed in range(3):
            m = make_ddsa(seed)
            x = np.random.default_rng(seed).normal(size=(1, 8, 8, 16))
            y, _, _ = m.attend(t64(x), distortion_tensor(8, 16, 1, np.float64))
            assert np.abs(y.data - gather_oracle(m, x)).max() <= 1e-10


@pytest.mark.criterion(9, "metric identities")
def test_c09_metrics():
    with Timer(5.0):
        rng = np.random.default_rng(9)
        a = rng.integers(0, 256, (32, 48)).astype(np.float64)
        b = rng.integers(0, 256, (32, 48)).astype(np.float64)
        assert ws_psnr(a, b, np.ones(a.shape)) == psnr(a, b)
        assert ssim(a, a) == 1.0
        gt = t64(rng.random((1, 3, 8, 8)))
        assert ws_l1(gt, gt, distortion_tensor(8, 8, 1, np.float64)).data.item() == 0.0
        assert abs(psnr(np.zeros((8, 8)), np.ones((8, 8)), 255) - 48.1308) <= 1e-4


def _check_toy(run_a, run_b, limit=300.0):
    loss = np.array([t[2] for t in run_a.trace])
    assert np.all(np.isfinite(loss))
    assert len(loss) <= 2000
    assert loss[-1] <= (1 - TOY_DROP) * loss[0], (loss[0], loss[-1])
    assert run_a.final == run_b.final
    assert run_a.seconds < limit and run_b.seconds < limit


@pytest.mark.criterion(10, "toy overfit")
def test_c10_toy_overfit(toy_runs):
    _check_toy(toy_runs.get("full-a"), toy_runs.get("full-b"))


ABLATIONS = {
    "no-DMRSA": ({"use_dmrsa": False}, {"dmrsa", "dgg", "dfa"}),
    "no-DDSA": ({"use_ddsa": False}, {"ddsa", "dfa"}),
    "G=1": ({"use_dgg": False}, {"dgg"}),
    "no-Diff": ({"use_diff": False}, set()),
}


@pytest.mark.criterion(11, "ablation structure parity")
@pytest.mark.parametrize("variant", list(ABLATIONS))
def test_c11_ablation(variant, toy_runs):
    flags, dropped = ABLATIONS[variant]
    full = {n for n, _ in GDGT(ModelConfig.toy()).named_parameters()}
    got = {n for n, _ in GDGT(ModelConfig.toy(**flags)).named_parameters()}
    assert got == {n for n in full if not set(n.split(".")) & dropped}
    if dropped:
        assert got < full
    _check_toy(toy_runs.get(variant + "-a", **flags), toy_runs.get(variant + "-b", **flags))


@pytest.mark.criterion(12, "checkpoint round trip and corruption detection")
def test_c12_checkpoint(tmp_path):
    model = randomize(GDGT(ModelConfig(num_dabs=1, dals_per_dab=1, embed_dim=8)), np.random.default_rng(0)).astype(np.float32)
    with Timer(1.0):
        save_checkpoint(model, tmp_path / "a.gdgt")
        save_checkpoint(load_checkpoint(tmp_path / "a.gdgt"), tmp_path / "b.gdgt")
        blob = (tmp_path / "a.gdgt").read_bytes()
        assert blob == (tmp_path / "b.gdgt").read_bytes()
        rng = np.random.default_rng(12)
        nbits = len(blob) * 8
        bits = list(range(32, 32 + 256)) + list(range(nbits - 64, nbits)) + rng.integers(32, nbits, 1000).tolist()
        for bit in bits:
            bad = bytearray(blob)
            bad[bit // 8] ^= 1 << (bit % 8)
            with pytest.raises(IntegrityError):
                decode(bytes(bad))
