import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_psnr, brute_ssim
from seq2seq_mri.errors import ConfigError, ShapeError
from seq2seq_mri.metrics import LpipsLike, lpips_like, psnr, ssim
from seq2seq_mri.toy.sim import generate_subject


@pytest.fixture(scope="module")
def lpips_random():
    return LpipsLike("random")


def test_psnr_fixed_points():
    x = np.random.default_rng(0).random((8, 8))
    assert psnr(x, x) == 100.0
    assert psnr(np.zeros((8, 8)), np.ones((8, 8))) == 0.0
    with pytest.raises(ShapeError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def test_psnr_matches_textbook_formula():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a, b = rng.random((8, 8)), rng.random((8, 8))
        assert psnr(a, b) == pytest.approx(brute_psnr(a, b), abs=1e-9)


def test_ssim_identity_and_negative():
    rng = np.random.default_rng(2)
    a = (rng.random((32, 32)) > 0.5).astype(float)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, 1 - a) < 0.2
    assert brute_ssim(a, 1 - a) < 0.2


def test_ssim_matches_sliding_window_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert ssim(a, b) == pytest.approx(brute_ssim(a, b), abs=1e-6)


def test_ssim_small_image_fallback():
    a = np.random.default_rng(4).random((7, 9))
    with pytest.warns(RuntimeWarning):
        v = ssim(a, a * 0.9)
    assert v == pytest.approx(brute_ssim(a, a * 0.9, win=7), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (12, 12), elements=st.floats(0, 1)), arrays(np.float64, (12, 12), elements=st.floats(0, 1)))
def test_ssim_bounded_and_symmetric(a, b):
    v = ssim(a, b)
    assert -1 - 1e-9 <= v <= 1 + 1e-9
    assert v == pytest.approx(ssim(b, a), abs=1e-12)


def test_lpips_identity_symmetry(lpips_random):
    rng = np.random.default_rng(5)
    a, b = rng.random((32, 32)), rng.random((32, 32))
    assert lpips_random(a, a) == 0.0
    assert lpips_random(a, b) == pytest.approx(lpips_random(b, a), rel=1e-6)
    assert lpips_random(a, b) > 0


def test_lpips_orders_glyph_swap_above_offset(lpips_random):
    for seed in range(5):
        s = generate_subject(seed)
        x = s.x1.data.astype(np.float64)
        y, xx, h, w = s.layout["diff_box"]
        swapped = x.copy()
        swapped[y:y + h, xx:xx + w] = np.rot90(x[y:y + h, xx:xx + w], 2)
        offset = np.clip(x + 0.01, 0, 1)
        assert lpips_random(x, swapped) > lpips_random(x, offset)


def test_lpips_backend_errors():
    with pytest.raises(ConfigError):
        LpipsLike("nonsense")
    with pytest.raises(ConfigError):
        LpipsLike("vgg19", weights="/nonexistent/vgg.pth")


def test_lpips_auto_falls_back_with_warning():
    with pytest.warns(RuntimeWarning):
        m = LpipsLike("auto")
    assert m.backend in ("random", "vgg19", "lpips")
    x = np.random.default_rng(6).random((16, 16))
    assert lpips_like(x, x, m) == 0.0
