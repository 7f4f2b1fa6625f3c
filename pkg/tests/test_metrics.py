import numpy as np
import pytest

from advface.metrics import mse, psnr, ssim

from oracles import mse_reference, psnr_reference, ssim_reference


def random_pair(rng, size=24, correlated=False):
    a = rng.uniform(0.0, 1.0, (size, size, 3))
    if correlated:
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    else:
        b = rng.uniform(0.0, 1.0, (size, size, 3))
    return a, b


def test_mse_identity_is_zero(rng):
    a, _ = random_pair(rng)
    assert mse(a, a) == 0.0


def test_mse_analytic_extremes():
    zeros = np.zeros((16, 16, 3))
    ones = np.ones((16, 16, 3))
    assert mse(zeros, ones) == 1.0


def test_mse_shape_mismatch_raises():
    with pytest.raises(ValueError):
        mse(np.zeros((8, 8, 3)), np.zeros((9, 8, 3)))


def test_mse_matches_bruteforce(rng):
    for _ in range(10):
        a, b = random_pair(rng)
        assert mse(a, b) == pytest.approx(mse_reference(a, b), abs=1e-12)


def test_psnr_analytic_value():
    # mse of 0.01 by construction: constant difference of 0.1
    a = np.zeros((16, 16, 3))
    b = np.full((16, 16, 3), 0.1)
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)


def test_psnr_identical_images_capped_at_100db(rng):
    a, _ = random_pair(rng)
    assert psnr(a, a) == pytest.approx(100.0, abs=1e-12)


def test_psnr_matches_bruteforce(rng):
    for _ in range(10):
        a, b = random_pair(rng, correlated=True)
        assert psnr(a, b) == pytest.approx(psnr_reference(a, b), abs=1e-9)


def test_ssim_identity_is_one(rng):
    a, _ = random_pair(rng, size=32)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_bruteforce(rng):
    for _ in range(5):
        a, b = random_pair(rng, size=24, correlated=True)
        assert ssim(a, b) == pytest.approx(ssim_reference(a, b), abs=1e-7)


def test_ssim_independent_noise_is_near_zero(rng):
    values = []
    for _ in range(40):
        a, b = random_pair(rng, size=32)
        values.append(ssim(a, b))
    assert max(abs(v) for v in values) < 0.1


def test_ssim_grayscale_via_channel_mean(rng):
    a, b = random_pair(rng, size=24, correlated=True)
    assert ssim(a, b) == pytest.approx(ssim(a.mean(axis=2), b.mean(axis=2)), abs=1e-12)


def test_ssim_small_image_fallback(rng):
    a = rng.uniform(0, 1, (7, 7, 3))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    value = ssim(a, b)
    assert -1.0 <= value <= 1.0
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_bounded(rng):
    for _ in range(10):
        a, b = random_pair(rng, size=20)
        assert -1.0 <= ssim(a, b) <= 1.0
