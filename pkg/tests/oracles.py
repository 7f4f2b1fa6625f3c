"""Independent brute-force references the fast implementations are checked against.

Everything here is written the slow, obvious way on purpose: explicit window
loops, direct formulas, no shared code with the package internals.
"""

import math

import numpy as np

WINDOW = 11
SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def mse_reference(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    total = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        total += (x - y) ** 2
    return total / a.size


def psnr_reference(a, b, max_value=1.0):
    m = mse_reference(a, b)
    if m <= 1e-10:
        m = 1e-10
    return 10.0 * math.log10(max_value**2 / m)


def _gauss_window(size, sigma):
    half = (size - 1) / 2.0
    w = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            w[i, j] = math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma**2))
    return w / w.sum()


def ssim_reference(a, b):
    """Mean SSIM over every fully-valid 11x11 Gaussian-weighted window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 3:
        a = a.mean(axis=2)
        b = b.mean(axis=2)
    h, w = a.shape
    win = _gauss_window(WINDOW, SIGMA)
    values = []
    for i in range(h - WINDOW + 1):
        for j in range(w - WINDOW + 1):
            pa = a[i:i + WINDOW, j:j + WINDOW]
            pb = b[i:i + WINDOW, j:j + WINDOW]
            mu_a = (win * pa).sum()
            mu_b = (win * pb).sum()
            var_a = (win * pa * pa).sum() - mu_a**2
            var_b = (win * pb * pb).sum() - mu_b**2
            cov = (win * pa * pb).sum() - mu_a * mu_b
            num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
            den = (mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2)
            values.append(num / den)
    return float(np.mean(values))


def l1_loss_reference(images, reconstructions):
    """Sum over samples of the L1 distance, the decoder-training objective."""
    total = 0.0
    for x, r in zip(images, reconstructions):
        total += np.abs(np.asarray(x, dtype=np.float64) - np.asarray(r, dtype=np.float64)).sum()
    return total


def laplace_mean_abs(scale):
    return scale


def uniform_sum_variance(iterations, bound):
    """Variance of a sum of `iterations` independent U(-bound, bound) draws."""
    return iterations * bound**2 / 3.0
