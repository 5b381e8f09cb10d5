"""Distortion and rate metrics: MSE, PSNR, MS-SSIM, bits per pixel."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from . import tensor as T
from .errors import DimensionError, UsageError

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _as_batch(x) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=T.DTYPE)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise DimensionError(f"expected (C, H, W) or (N, C, H, W), got {tuple(x.shape)}")
    return x


def _check_pair(x, x_hat):
    x, x_hat = _as_batch(x), _as_batch(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionError(f"image shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return x, x_hat


def mse(x, x_hat) -> torch.Tensor:
    x, x_hat = _check_pair(x, x_hat)
    return ((x_hat - x) ** 2).mean()


def gaussian_window(size: int, sigma: float = 1.5) -> torch.Tensor:
    coords = torch.arange(size, dtype=T.DTYPE) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    """Separable 'valid' Gaussian filtering of every channel."""
    c = x.shape[1]
    k = win.numel()
    x = F.conv2d(x, win.reshape(1, 1, k, 1).repeat(c, 1, 1, 1), groups=c)
    return F.conv2d(x, win.reshape(1, 1, 1, k).repeat(c, 1, 1, 1), groups=c)


def ssim_terms(x: torch.Tensor, y: torch.Tensor, win_size: int = 11, sigma: float = 1.5, data_range: float = 1.0):
    """Mean SSIM and mean contrast-structure term per image, each shaped (N,).

    The window shrinks to the image size when the image is smaller than it.
    """
    k = min(win_size, x.shape[2], x.shape[3])
    win = gaussian_window(k, sigma)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = _filter(x, win), _filter(y, win)
    sxx = _filter(x * x, win) - mu_x**2
    syy = _filter(y * y, win) - mu_y**2
    sxy = _filter(x * y, win) - mu_x * mu_y
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    return (lum * cs).flatten(1).mean(1), cs.flatten(1).mean(1)


def ms_ssim(x, x_hat, weights=MS_SSIM_WEIGHTS, win_size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Multi-scale SSIM per image, (N,), pixels in [0, 1].

    Scales are produced by 2x2 average pooling. Negative per-scale terms are
    clamped to zero before the fractional powers.
    """
    x, y = _check_pair(x, x_hat)
    w = torch.as_tensor(weights, dtype=T.DTYPE)
    levels = len(weights)
    out = torch.ones(x.shape[0], dtype=T.DTYPE)
    for i in range(levels):
        s, cs = ssim_terms(x, y, win_size, sigma)
        term = s if i == levels - 1 else cs
        out = out * torch.relu(term) ** w[i]
        if i < levels - 1:
            if min(x.shape[2:]) < 2:
                raise DimensionError(f"image too small for {levels} MS-SSIM scales")
            pad = (0, x.shape[3] % 2, 0, x.shape[2] % 2)
            x = F.avg_pool2d(F.pad(x, pad, mode="replicate"), 2)
            y = F.avg_pool2d(F.pad(y, pad, mode="replicate"), 2)
    return out


def distortion(x, x_hat, metric: str = "mse") -> torch.Tensor:
    """MSE, or ``100 - 100 * MS-SSIM`` averaged over the batch."""
    if metric == "mse":
        return mse(x, x_hat)
    if metric in ("ms-ssim", "msssim"):
        return 100.0 - 100.0 * ms_ssim(x, x_hat).mean()
    raise UsageError(f"unknown distortion metric {metric!r}")


def psnr(x, x_hat) -> float:
    err = float(mse(x, x_hat))
    return math.inf if err == 0 else 10.0 * math.log10(1.0 / err)


def bpp(stream: bytes | int, dims: tuple[int, int]) -> float:
    n = stream if isinstance(stream, int) else len(stream)
    return 8.0 * n / (dims[0] * dims[1])


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)
