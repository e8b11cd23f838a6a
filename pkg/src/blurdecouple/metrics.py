"""Reference-based image quality metrics for images in [-1, 1]."""
from __future__ import annotations

import math

import numpy as np
from scipy.signal import convolve2d

PSNR_CAP = 99.0
PEAK = 2.0  # dynamic range of [-1, 1]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(peak^2 / MSE) in dB, capped at 99 dB for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(PEAK**2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM on the channel mean with an 11x11, sigma 1.5 Gaussian window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a.mean(axis=-1), b.mean(axis=-1)
    w = gaussian_window()
    c1, c2 = (k1 * PEAK) ** 2, (k2 * PEAK) ** 2

    def filt(img):
        return convolve2d(img, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def gradient_magnitude(img: np.ndarray) -> float:
    """Mean forward-difference gradient magnitude of the channel mean (a sharpness statistic)."""
    m = np.asarray(img, dtype=np.float64)
    if m.ndim == 3:
        m = m.mean(axis=-1)
    gx = np.diff(m, axis=1)[:-1, :]
    gy = np.diff(m, axis=0)[:, :-1]
    return float(np.mean(np.sqrt(gx**2 + gy**2)))
