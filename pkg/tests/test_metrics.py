import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import correlate

from blurdecouple.metrics import gaussian_window, gradient_magnitude, psnr, ssim
from oracles import psnr_oracle


def test_psnr_identical_is_capped():
    a = np.random.default_rng(0).uniform(-1, 1, (8, 8, 3))
    assert psnr(a, a) == 99.0


def test_psnr_offset_02_is_20db():
    a = np.random.default_rng(1).uniform(-0.5, 0.5, (16, 16, 3))
    assert abs(psnr(a + 0.2, a) - 20.0) <= 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_psnr_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (2, 12, 10, 3))
    assert abs(psnr(a, b) - psnr_oracle(a, b)) <= 1e-6


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_ssim_identical_is_exactly_one():
    a = np.random.default_rng(2).uniform(-1, 1, (32, 32, 3))
    assert ssim(a, a) == 1.0


def test_ssim_anticorrelated_checkerboard_negative():
    # zero local mean keeps the luminance term near 1, so the flipped structure dominates
    i = np.arange(32)
    a = np.repeat((0.5 * (-1.0) ** np.add.outer(i, i))[..., None], 3, axis=2)
    assert ssim(a, -a) < -0.9


def _ssim_oracle(a, b, k1=0.01, k2=0.03, L=2.0):
    """Textbook form with scipy's correlate (the window is symmetric) and variance via E[(x-mu)^2]."""
    a, b = a.mean(-1), b.mean(-1)
    w = gaussian_window()
    f = lambda x: correlate(x, w, mode="constant")[5:-5, 5:-5]  # noqa: E731
    mu_a, mu_b = f(a), f(b)
    var_a, var_b = f(a * a) - mu_a**2, f(b * b) - mu_b**2
    cov = f(a * b) - mu_a * mu_b
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return float(np.mean(lum * cs))


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (24, 20, 3))
    b = np.clip(a + rng.normal(0, 0.3, a.shape), -1, 1)
    assert abs(ssim(a, b) - _ssim_oracle(a, b)) < 1e-12


def test_ssim_contrast_structure_shift_invariance():
    rng = np.random.default_rng(3)
    a = rng.uniform(-0.5, 0.5, (24, 24))
    b = a + rng.normal(0, 0.1, a.shape)
    w = gaussian_window()
    f = lambda x: correlate(x, w)[5:-5, 5:-5]  # noqa: E731

    def cs(x, y):
        mx, my = f(x), f(y)
        return (2 * (f(x * y) - mx * my) + 0.0036) / (f(x * x) - mx**2 + f(y * y) - my**2 + 0.0036)

    np.testing.assert_allclose(cs(a + 0.3, b + 0.3), cs(a, b), atol=1e-10)


def test_gaussian_window_normalized():
    w = gaussian_window()
    assert w.shape == (11, 11) and abs(w.sum() - 1) < 1e-15 and np.allclose(w, w.T)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_ssim_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (2, 16, 16, 3))
    assert -1 <= ssim(a, b) <= 1


def test_gradient_magnitude_constant_zero_and_ramp():
    assert gradient_magnitude(np.zeros((8, 8, 3))) == 0.0
    ramp = np.tile(np.arange(8) * 0.1, (8, 1))
    assert abs(gradient_magnitude(ramp) - 0.1) < 1e-12
