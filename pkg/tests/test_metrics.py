import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ticlab.exceptions import UsageError
from ticlab.metrics import PSNR_CAP_DB, psnr, region_psnr, report, ssim


def loop_mse(a, b, mask=None):
    total, count = 0.0, 0
    c, h, w = a.shape
    for k in range(c):
        for i in range(h):
            for j in range(w):
                if mask is None or mask[i, j]:
                    total += (float(a[k, i, j]) - float(b[k, i, j])) ** 2
                    count += 1
    return total / count


def window_ssim(x, y, size=8):
    """Direct per-window SSIM with textbook (population) statistics."""
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(x.shape[0] - size + 1):
        for j in range(x.shape[1] - size + 1):
            px = x[i : i + size, j : j + size].ravel()
            py = y[i : i + size, j : j + size].ravel()
            mx, my = px.mean(), py.mean()
            vx = ((px - mx) ** 2).mean()
            vy = ((py - my) ** 2).mean()
            cxy = ((px - mx) * (py - my)).mean()
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_psnr_identical_is_cap(rng):
    a = rng.random((1, 16, 16))
    assert psnr(a, a) == PSNR_CAP_DB == 99.0


def test_psnr_uniform_offset_is_twenty_db():
    a = np.full((1, 8, 8), 0.3)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_loop_oracle(rng):
    a, b = rng.random((2, 3, 12, 10))
    expected = 10 * math.log10(1.0 / loop_mse(a, b))
    assert abs(psnr(a, b) - expected) < 1e-9


def test_psnr_shape_mismatch():
    with pytest.raises(UsageError):
        psnr(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))


def test_psnr_symmetric_and_decreasing_in_noise(rng):
    a = rng.random((1, 16, 16))
    noise = rng.standard_normal((1, 16, 16))
    values = [psnr(a, a + amp * noise) for amp in (0.001, 0.01, 0.05, 0.2)]
    assert all(x > y for x, y in zip(values, values[1:]))
    b = a + 0.05 * noise
    assert psnr(a, b) == psnr(b, a)


def test_ssim_identity_and_inversion(rng):
    a = rng.random((1, 16, 16))
    assert ssim(a, a) == 1.0
    assert ssim(a, 1 - a) < 1.0


def test_ssim_matches_window_oracle(rng):
    a, b = rng.random((2, 12, 14))
    assert abs(ssim(a, b) - window_ssim(a, b)) < 1e-9


def test_ssim_channel_average(rng):
    a, b = rng.random((2, 2, 10, 10))
    expected = 0.5 * (window_ssim(a[0], b[0]) + window_ssim(a[1], b[1]))
    assert abs(ssim(a, b) - expected) < 1e-9


def test_ssim_rejects_small_images():
    with pytest.raises(UsageError):
        ssim(np.zeros((1, 7, 16)), np.zeros((1, 7, 16)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), amp=st.floats(0.0, 1.0))
def test_ssim_bounded_and_symmetric(seed, amp):
    g = np.random.default_rng(seed)
    a = g.random((1, 10, 10))
    b = np.clip(a + amp * g.standard_normal(a.shape), 0, 1)
    s = ssim(a, b)
    assert -1.0 <= s <= 1.0
    assert s == pytest.approx(ssim(b, a), abs=1e-12)


def test_region_psnr_full_mask_equals_psnr(rng):
    a, b = rng.random((2, 1, 16, 16))
    assert region_psnr(a, b, np.ones((16, 16))) == psnr(a, b)


def test_region_psnr_equal_inside_mask_is_cap(rng):
    a = rng.random((1, 16, 16))
    b = a.copy()
    mask = np.zeros((16, 16), bool)
    mask[4:9, 2:12] = True
    b[0][~mask] = rng.random(int((~mask).sum()))
    assert region_psnr(a, b, mask) == PSNR_CAP_DB


def test_region_psnr_matches_masked_oracle(rng):
    a, b = rng.random((2, 1, 16, 16))
    mask = rng.random((16, 16)) > 0.6
    expected = 10 * math.log10(1.0 / loop_mse(a, b, mask))
    assert abs(region_psnr(a, b, mask) - expected) < 1e-9


def test_region_psnr_empty_mask():
    with pytest.raises(UsageError):
        region_psnr(np.zeros((1, 4, 4)), np.zeros((1, 4, 4)), np.zeros((4, 4)))


def test_report_serialization(rng):
    a, b = rng.random((2, 1, 16, 16))
    mask = np.zeros((16, 16))
    mask[:4] = 1
    full = report(a, b).to_dict()
    assert set(full) == {"psnr_db", "ssim"}
    part = report(a, b, mask, region="top").to_dict()
    assert part["pixel_count"] == 64 and part["region"] == "top"
