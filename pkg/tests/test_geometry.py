import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from gdgt.errors import ConfigError, DimensionError, RangeError, SingularityError
from gdgt.geometry import (
    PlaneCoord,
    SphereCoord,
    bicubic_resize,
    cubic_kernel,
    distortion_map,
    distortion_rows,
    erp_project,
    erp_unproject,
    load_distortion_png,
    load_distortion_raw,
    save_distortion_png,
    save_distortion_raw,
    stretching_ratio_erp,
    stretching_ratio_general,
)


def mp_rows(H: int) -> list[float]:
    """Distortion rows evaluated at 50 significant digits."""
    mpmath.mp.dps = 50
    return [float(mpmath.cos((h + mpmath.mpf(1) / 2 - mpmath.mpf(H) / 2) * mpmath.pi / H)) for h in range(H)]


class TestProjection:
    def test_origin(self):
        assert erp_project(SphereCoord(0.0, 0.0)) == PlaneCoord(0.0, 0.0)

    def test_identity(self):
        p = erp_project(SphereCoord(math.pi / 2, math.pi / 4))
        assert (p.x, p.y) == (math.pi / 2, math.pi / 4)

    @given(st.floats(-3.14, 3.14), st.floats(-1.57, 1.57))
    def test_round_trip(self, th, ph):
        s = SphereCoord(th, ph)
        assert erp_unproject(erp_project(s)) == s

    @pytest.mark.parametrize("th,ph", [(math.pi, 0.0), (0.0, math.pi / 2), (-4.0, 0.0)])
    def test_out_of_domain(self, th, ph):
        with pytest.raises(RangeError):
            erp_project(SphereCoord(th, ph))


class TestStretching:
    def test_equator(self):
        assert stretching_ratio_erp(PlaneCoord(0.0, 0.0)) == 1.0

    @pytest.mark.parametrize("y", [math.pi / 3, -math.pi / 3])
    def test_sixty_degrees(self, y):
        assert stretching_ratio_erp(PlaneCoord(0.0, y)) == pytest.approx(0.5, abs=1e-15)

    def test_pole_rejected(self):
        with pytest.raises(RangeError):
            stretching_ratio_erp(PlaneCoord(0.0, math.pi / 2))

    def test_general_identity(self):
        assert stretching_ratio_general(np.eye(2), 0.0) == 1.0
        assert stretching_ratio_general(np.eye(2), math.pi / 3) == pytest.approx(0.5)

    def test_general_scaled(self):
        assert stretching_ratio_general(np.diag([2.0, 1.0]), 0.0) == 0.5

    def test_singular(self):
        with pytest.raises(SingularityError):
            stretching_ratio_general([[1.0, 2.0], [2.0, 4.0]], 0.0)

    @given(st.floats(-1.5, 1.5))
    def test_general_matches_erp(self, phi):
        assert stretching_ratio_general(np.eye(2), phi) == stretching_ratio_erp(PlaneCoord(0.0, phi))


class TestDistortionMap:
    def test_h2(self):
        np.testing.assert_allclose(distortion_rows(2), [0.7071068] * 2, atol=5e-8)

    def test_h4(self):
        np.testing.assert_allclose(distortion_rows(4), [0.3826834, 0.9238795, 0.9238795, 0.3826834], atol=5e-8)

    @pytest.mark.parametrize("H", [1, 2, 3, 4, 7, 128, 1024])
    def test_matches_high_precision(self, H):
        np.testing.assert_allclose(distortion_rows(H), mp_rows(H), atol=1e-12, rtol=0)

    @settings(max_examples=50)
    @given(st.integers(1, 600), st.integers(1, 9))
    def test_invariants(self, H, W):
        dm = distortion_map(H, W)
        w = dm.weights
        assert w.shape == (H, W)
        assert np.all(w == w[:, :1])
        assert np.array_equal(w, w[::-1])
        assert np.all(w > 0) and np.all(w <= 1)
        rows = w[:, 0]
        upper = rows[: (H + 1) // 2]
        assert np.all(np.diff(upper) > 0)
        assert rows.max() == rows[(H - 1) // 2]

    @settings(max_examples=50)
    @given(st.integers(1, 300))
    def test_even_height_bound(self, H):
        H *= 2
        assert distortion_rows(H).max() <= math.cos(math.pi / (2 * H)) < 1

    def test_odd_height_reaches_one(self):
        # the middle row of an odd-height map sits on the equator
        assert distortion_rows(5)[2] == 1.0

    @pytest.mark.parametrize("H,W", [(0, 4), (4, 0)])
    def test_bad_extents(self, H, W):
        with pytest.raises(DimensionError):
            distortion_map(H, W)

    def test_png_round_trip(self, tmp_path):
        dm = distortion_map(37, 10)
        save_distortion_png(dm, tmp_path / "d.png")
        with Image.open(tmp_path / "d.png") as im:
            assert im.mode.startswith("I")
        back = load_distortion_png(tmp_path / "d.png")
        assert np.abs(back - dm.weights).max() <= 0.5 / 65535 + 1e-15

    def test_raw_round_trip(self, tmp_path):
        dm = distortion_map(9, 5)
        save_distortion_raw(dm, tmp_path / "d.bin")
        blob = (tmp_path / "d.bin").read_bytes()
        assert blob[:8] == (9).to_bytes(4, "little") + (5).to_bytes(4, "little")
        assert len(blob) == 8 + 8 * 45
        np.testing.assert_array_equal(load_distortion_raw(tmp_path / "d.bin").weights, dm.weights)


def brute_bicubic_1d(x: np.ndarray, n_out: int, scale: float, antialias: bool = True) -> np.ndarray:
    """Sum the kernel over every source tap, replicating the border."""
    n = len(x)
    width = 1 / scale if antialias and scale < 1 else 1.0
    out = np.empty(n_out)
    for i in range(n_out):
        c = (i + 0.5) / scale - 0.5
        acc = wsum = 0.0
        for j in range(-20, n + 20):
            k = float(cubic_kernel(np.array((c - j) / width)))
            acc += k * x[min(max(j, 0), n - 1)]
            wsum += k
        out[i] = acc / wsum
    return out


class TestBicubic:
    def test_scale_one_identity(self):
        x = np.random.default_rng(0).random((3, 5, 6))
        np.testing.assert_allclose(bicubic_resize(x, 1), x, atol=1e-6)

    @pytest.mark.parametrize("scale", [0.5, 2, Fraction(3, 4), 0.25])
    def test_constant(self, scale):
        x = np.full((2, 8, 12), 0.37)
        np.testing.assert_allclose(bicubic_resize(x, scale), 0.37, rtol=0, atol=1e-15)

    def test_ramp_matches_brute_force(self):
        ramp = np.arange(16, dtype=np.float64).reshape(4, 4)
        rows = np.stack([brute_bicubic_1d(r, 2, 0.5) for r in ramp])
        ref = np.stack([brute_bicubic_1d(c, 2, 0.5) for c in rows.T]).T
        np.testing.assert_allclose(bicubic_resize(ramp, 0.5), ref, atol=1e-6)

    @pytest.mark.parametrize("scale", [0.5, 2.0, 0.25, 4.0])
    def test_interior_matches_pillow(self, scale):
        # Pillow renormalizes truncated kernels at the border instead of
        # replicating, so only the interior is comparable
        x = np.random.default_rng(1).random((32, 48)).astype(np.float32)
        ho, wo = int(32 * scale), int(48 * scale)
        ref = np.asarray(Image.fromarray(x).resize((wo, ho), Image.BICUBIC), dtype=np.float64)
        got = bicubic_resize(x.astype(np.float64), scale)
        m = int(math.ceil(2 * max(scale, 1 / scale))) + 2
        np.testing.assert_allclose(got[m:-m, m:-m], ref[m:-m, m:-m], atol=1e-5)

    @pytest.mark.parametrize("scale", [0, -1])
    def test_bad_scale(self, scale):
        with pytest.raises(ConfigError):
            bicubic_resize(np.zeros((4, 4)), scale)

    def test_empty_output(self):
        with pytest.raises(ConfigError):
            bicubic_resize(np.zeros((2, 2)), 0.1)
