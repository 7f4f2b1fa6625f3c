"""Image-quality metrics for reconstruction attacks: MSE, PSNR, SSIM.

All three take images as (H, W, 3) or (H, W) arrays with intensities in
[0, 1]. SSIM converts color images to grayscale by channel mean, then
averages the local structural-similarity map computed over every fully-valid
11x11 Gaussian window (sigma 1.5, stability constants (0.01)^2 and (0.03)^2
for unit dynamic range). Images smaller than the window fall back to a single
Gaussian-weighted window spanning the whole image.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import fftconvolve

MSE_FLOOR = 1e-10          # caps PSNR at exactly 100 dB for identical images
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01) ** 2
SSIM_C2 = (0.03) ** 2


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    """Mean squared pixel difference."""
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, max_value: float = 1.0) -> float:
    """10*log10(MAX^2 / MSE), with MSE floored at 1e-10 (cap 100 dB for MAX=1)."""
    m = mse(a, b)
    if m <= MSE_FLOOR:
        return 10.0 * math.log10(max_value**2 / MSE_FLOOR)
    return 10.0 * math.log10(max_value**2 / m)


def _to_gray(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3:
        return img.mean(axis=2)
    if img.ndim == 2:
        return img
    raise ValueError(f"expected (H, W) or (H, W, C) image, got shape {img.shape}")


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian, the SSIM windowing kernel."""
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _local_stats(x: np.ndarray, y: np.ndarray, kernel: np.ndarray):
    k = kernel[::-1, ::-1]     # correlation via convolution
    mu_x = fftconvolve(x, k, mode="valid")
    mu_y = fftconvolve(y, k, mode="valid")
    xx = fftconvolve(x * x, k, mode="valid") - mu_x**2
    yy = fftconvolve(y * y, k, mode="valid") - mu_y**2
    xy = fftconvolve(x * y, k, mode="valid") - mu_x * mu_y
    return mu_x, mu_y, xx, yy, xy


def ssim(a, b) -> float:
    """Mean local structural similarity; 1.0 iff the images are identical."""
    a, b = _check_pair(a, b)
    x, y = _to_gray(a), _to_gray(b)
    h, w = x.shape
    if min(h, w) >= SSIM_WINDOW:
        kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    else:
        # single window spanning the image (degenerate thumbnails only)
        gy = np.exp(-((np.arange(h) - (h - 1) / 2.0) ** 2) / (2.0 * SSIM_SIGMA**2))
        gx = np.exp(-((np.arange(w) - (w - 1) / 2.0) ** 2) / (2.0 * SSIM_SIGMA**2))
        kernel = np.outer(gy, gx)
        kernel /= kernel.sum()
    mu_x, mu_y, var_x, var_y, cov = _local_stats(x, y, kernel)
    num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return float(np.mean(num / den))
