"""Reference image-quality metrics: PSNR and grayscale SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F


class MetricError(ValueError):
    """Raised for metric misuse: shape mismatches, undersized windows."""


PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(y: torch.Tensor, gt: torch.Tensor) -> float:
    """10*log10(1/MSE) on [0,1] images, capped at 100 dB for near-identical pairs."""
    if y.shape != gt.shape:
        raise MetricError("loss arity error")
    mse = float(((y.double() - gt.double()) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / mse)


def to_grayscale(img: torch.Tensor) -> torch.Tensor:
    """Luma projection 0.299R + 0.587G + 0.114B, keeping [B, 1, H, W]."""
    if img.shape[1] != 3:
        raise MetricError("unsupported format")
    w = torch.tensor([0.299, 0.587, 0.114], dtype=img.dtype, device=img.device)
    return (img * w.view(1, 3, 1, 1)).sum(dim=1, keepdim=True)


def _gaussian_window(size: int, sigma: float, dtype: torch.dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return (g.unsqueeze(1) @ g.unsqueeze(0)).view(1, 1, size, size)


def ssim(y: torch.Tensor, gt: torch.Tensor, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean local SSIM on grayscale, 11x11 Gaussian window, sigma 1.5."""
    if y.shape != gt.shape:
        raise MetricError("loss arity error")
    h, w = y.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise MetricError("ssim window error")
    a = to_grayscale(y.double())
    b = to_grayscale(gt.double())
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA, torch.float64)
    mu_a = F.conv2d(a, win)
    mu_b = F.conv2d(b, win)
    mu_aa, mu_bb, mu_ab = mu_a**2, mu_b**2, mu_a * mu_b
    var_a = F.conv2d(a * a, win) - mu_aa
    var_b = F.conv2d(b * b, win) - mu_bb
    cov = F.conv2d(a * b, win) - mu_ab
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_ab + c1) * (2 * cov + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


@dataclass
class EvalResult:
    psnr_db: float
    ssim: float
    per_image: list[dict] = field(default_factory=list)
