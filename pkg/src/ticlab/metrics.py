"""PSNR, SSIM and region-restricted PSNR for images in [0, 1]."""

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import UsageError

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 8
DATA_RANGE = 1.0


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    region: str | None = None
    pixel_count: int | None = None

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


def _to_numpy(x):
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _pair(a, b):
    a, b = _to_numpy(a), _to_numpy(b)
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _psnr_from_mse(mse, cap):
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(DATA_RANGE**2 / mse))


def psnr(a, b, cap=PSNR_CAP_DB):
    """Peak signal-to-noise ratio in dB; identical inputs give ``cap``."""
    a, b = _pair(a, b)
    return _psnr_from_mse(float(np.mean((a - b) ** 2)), cap)


def region_psnr(a, b, mask, cap=PSNR_CAP_DB):
    """PSNR over the pixels where ``mask`` is true.

    ``mask`` has the spatial shape of the images and is broadcast across
    leading (channel) axes.
    """
    a, b = _pair(a, b)
    mask = np.asarray(_to_numpy(mask) > 0.5)
    mask = np.broadcast_to(mask, a.shape)
    if not mask.any():
        raise UsageError("region mask is empty")
    diff = (a - b)[mask]
    return _psnr_from_mse(float(np.mean(diff**2)), cap)


def _ssim_2d(x, y):
    c1 = (0.01 * DATA_RANGE) ** 2
    c2 = (0.03 * DATA_RANGE) ** 2
    wx = sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))
    wy = sliding_window_view(y, (SSIM_WINDOW, SSIM_WINDOW))
    mx = wx.mean(axis=(-1, -2))
    my = wy.mean(axis=(-1, -2))
    # population statistics; identical code paths keep ssim(x, x) == 1 exactly
    vx = (wx * wx).mean(axis=(-1, -2)) - mx * mx
    vy = (wy * wy).mean(axis=(-1, -2)) - my * my
    cxy = (wx * wy).mean(axis=(-1, -2)) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def ssim(a, b):
    """Single-scale SSIM with 8x8 stride-1 windows, averaged over channels.

    Accepts (H, W) or (C, H, W) images.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise UsageError(f"expected (H, W) or (C, H, W) images, got shape {a.shape}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise UsageError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    return float(np.mean([_ssim_2d(x, y) for x, y in zip(a, b)]))


def report(a, b, mask=None, region=None):
    """Full :class:`MetricReport` for a pair, optionally region-restricted."""
    if mask is None:
        return MetricReport(psnr(a, b), ssim(a, b))
    count = int((_to_numpy(mask) > 0.5).sum())
    return MetricReport(region_psnr(a, b, mask), ssim(a, b), region=region, pixel_count=count)
