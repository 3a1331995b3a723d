"""Image losses and metrics. Images are float tensors of shape (H, W, 3)
with values in [0, 1]; every loss is differentiable through autograd."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DimensionMismatchError, InvalidParameterError
from .scene import Gaussians

PSNR_CAP = 99.0


@dataclass(frozen=True)
class SSIMParams:
    window: int = 11
    sigma: float = 1.5
    c1: float = 0.01**2
    c2: float = 0.03**2

    def kernel1d(self, dtype=torch.float64):
        x = torch.arange(self.window, dtype=torch.float64) - (self.window - 1) / 2
        g = torch.exp(-(x**2) / (2 * self.sigma**2))
        return (g / g.sum()).to(dtype)


DEFAULT_SSIM = SSIMParams()


def _check_pair(a, b):
    if a.shape != b.shape:
        raise DimensionMismatchError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() != 3 or a.numel() == 0:
        raise DimensionMismatchError(f"expected a non-empty (H, W, C) image, got {tuple(a.shape)}")


def l1_loss(a, b):
    _check_pair(a, b)
    return (a - b).abs().mean()


def _filter(x, k):
    # x: (C, 1, H, W); separable valid convolution
    n = k.numel()
    x = F.conv2d(x, k.reshape(1, 1, n, 1))
    return F.conv2d(x, k.reshape(1, 1, 1, n))


def ssim_map(a, b, p: SSIMParams = DEFAULT_SSIM):
    _check_pair(a, b)
    if a.shape[0] < p.window or a.shape[1] < p.window:
        raise InvalidParameterError(f"image {tuple(a.shape[:2])} is smaller than the {p.window}x{p.window} SSIM window")
    b = b.to(a.dtype)
    k = p.kernel1d(a.dtype)
    x = a.permute(2, 0, 1).unsqueeze(1)
    y = b.permute(2, 0, 1).unsqueeze(1)
    mx, my = _filter(x, k), _filter(y, k)
    sxx = _filter(x * x, k) - mx * mx
    syy = _filter(y * y, k) - my * my
    sxy = _filter(x * y, k) - mx * my
    num = (2 * mx * my + p.c1) * (2 * sxy + p.c2)
    den = (mx * mx + my * my + p.c1) * (sxx + syy + p.c2)
    return (num / den).squeeze(1)  # (C, H', W')


def ssim(a, b, p: SSIMParams = DEFAULT_SSIM):
    """Mean local SSIM over valid 11x11 windows, averaged over channels."""
    return ssim_map(a, b, p).mean()


def ssim_loss(a, b, p: SSIMParams = DEFAULT_SSIM):
    return 1.0 - ssim(a, b, p)


def fine_loss(log_scales):
    """Sum over Gaussians of the product of their three scales."""
    if isinstance(log_scales, Gaussians):
        log_scales = log_scales.log_scales
    if log_scales.numel() == 0:
        return log_scales.new_zeros(())
    return log_scales.sum(-1).exp().sum()


def psnr(a, b):
    _check_pair(a, b)
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return -10.0 * math.log10(mse)


def value_and_grad(fn, a, *args):
    """Evaluate fn(a, *args) and its gradient with respect to a."""
    a = a.detach().requires_grad_(True)
    with torch.enable_grad():
        val = fn(a, *args)
        (g,) = torch.autograd.grad(val, a)
    return val.detach(), g
