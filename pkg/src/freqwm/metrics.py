"""Image quality and message recovery metrics.

psnr and ssim are written in torch and stay differentiable, so the embedder
can use -psnr directly as a loss term.  Convenience callers can pass numpy
arrays; scalars come back as python floats in that case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError
from .keys import Message

# MSE floor; identical images report 120 dB instead of infinity.
MSE_FLOOR = 1e-12

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
# Stabilizers for unit dynamic range.
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2

# ITU-R 601 luminance weights.
_LUMA = (0.299, 0.587, 0.114)


def _pair(a, b):
    ta = torch.as_tensor(a)
    tb = torch.as_tensor(b)
    if ta.shape != tb.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    return ta, tb


def psnr(a, b) -> torch.Tensor:
    """Peak signal-to-noise ratio in dB for unit-range images."""
    ta, tb = _pair(a, b)
    mse = torch.mean((ta - tb) ** 2)
    out = 10.0 * torch.log10(1.0 / torch.clamp(mse, min=MSE_FLOOR))
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        return out
    return float(out)


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    half = (size - 1) / 2.0
    x = torch.arange(size, dtype=dtype, device=device) - half
    g = torch.exp(-(x**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def _luminance(img: torch.Tensor) -> torch.Tensor:
    w = torch.tensor(_LUMA, dtype=img.dtype, device=img.device).view(3, 1, 1)
    return (img * w).sum(dim=0, keepdim=True)


def ssim(a, b) -> torch.Tensor:
    """Mean structural similarity over the luminance channel.

    11x11 Gaussian window (sigma 1.5), valid padding, unit dynamic range.
    """
    ta, tb = _pair(a, b)
    if ta.ndim != 3 or ta.shape[0] != 3:
        raise InvalidInputError("ssim expects (3, h, w) images")
    if min(ta.shape[-2:]) < _SSIM_WINDOW:
        raise InvalidInputError(
            f"image smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} ssim window"
        )
    x = _luminance(ta).unsqueeze(0)
    y = _luminance(tb).unsqueeze(0)
    win = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA, x.dtype, x.device)
    win = win.view(1, 1, _SSIM_WINDOW, _SSIM_WINDOW)

    mu_x = F.conv2d(x, win)
    mu_y = F.conv2d(y, win)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    var_x = F.conv2d(x * x, win) - mu_xx
    var_y = F.conv2d(y * y, win) - mu_yy
    cov = F.conv2d(x * y, win) - mu_xy

    num = (2 * mu_xy + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_xx + mu_yy + _SSIM_C1) * (var_x + var_y + _SSIM_C2)
    out = (num / den).mean()
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        return out
    return float(out)


def bit_accuracy(embedded: Message, decoded: Message) -> float:
    """Fraction of matching bits; multiplying by K recovers the match count."""
    if embedded.bits != decoded.bits:
        raise InvalidInputError(
            f"bit count mismatch: {embedded.bits} vs {decoded.bits}"
        )
    return float(np.mean(embedded.values == decoded.values))


def l2_distance(a, b) -> float:
    """Mean squared pixel difference expressed on the 8-bit (0..255) scale."""
    ta, tb = _pair(a, b)
    return float(torch.mean((255.0 * (ta.double() - tb.double())) ** 2))


@dataclass(frozen=True)
class QualityReport:
    psnr: float
    ssim: float
    l2: float
    perceptual: float | None = None

    def to_record(self) -> dict:
        return {
            "psnr": self.psnr,
            "ssim": self.ssim,
            "l2": self.l2,
            "perceptual": self.perceptual,
        }


def quality_report(reference, candidate, perceptual=None) -> QualityReport:
    """Bundle the scalar quality metrics for one image pair.

    `perceptual` is an optional backend with a distance(a, b) method.
    """
    ta, tb = _pair(reference, candidate)
    perc = float(perceptual.distance(ta, tb)) if perceptual is not None else None
    return QualityReport(
        psnr=float(psnr(ta, tb)),
        ssim=float(ssim(ta, tb)),
        l2=l2_distance(ta, tb),
        perceptual=perc,
    )
