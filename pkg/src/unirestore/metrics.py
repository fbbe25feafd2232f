"""Full-reference image quality metrics: PSNR and SSIM.

SSIM follows the standard formulation: an 11x11 Gaussian window with
sigma=1.5, K1=0.01, K2=0.03, dynamic range 1, local statistics taken in
"valid" mode (no padding), and the local map averaged over positions and
channels. The implementation is torch-based and differentiable, so the same
code serves both evaluation and the structural training loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP_DB = 100.0


@dataclass
class MetricReport:
    """Per-image full-reference scores."""

    psnr_db: float
    ssim: float


def _to_bchw(x) -> tuple[torch.Tensor, bool]:
    """Normalize images to (B, C, H, W) float tensors.

    Accepts torch tensors of rank 2-4 (HW / CHW / BCHW) and numpy arrays of
    shape (H, W) or (H, W, C). Returns the tensor and whether the input was
    numpy (numpy callers get plain floats back).
    """
    was_numpy = isinstance(x, np.ndarray)
    if was_numpy:
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None, None]
        elif arr.ndim == 3:
            arr = arr.transpose(2, 0, 1)[None]
        else:
            raise ValueError(f"expected (H, W) or (H, W, C) array, got shape {arr.shape}")
        return torch.from_numpy(arr), True
    if not isinstance(x, torch.Tensor):
        raise TypeError(f"expected numpy array or torch tensor, got {type(x)!r}")
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[None]
    elif x.dim() != 4:
        raise ValueError(f"expected rank 2-4 tensor, got rank {x.dim()}")
    return x, False


def _gaussian_window(dtype: torch.dtype) -> torch.Tensor:
    coords = torch.arange(SSIM_WINDOW, dtype=dtype) - (SSIM_WINDOW - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * SSIM_SIGMA**2))
    g = g / g.sum()
    return torch.outer(g, g)


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1], capped at 100."""
    xt, _ = _to_bchw(x)
    yt, _ = _to_bchw(y)
    if xt.shape != yt.shape:
        raise ValueError(f"shape mismatch: {tuple(xt.shape)} vs {tuple(yt.shape)}")
    mse = float(torch.mean((xt.double() - yt.double()) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def ssim(x, y):
    """Mean structural similarity over the valid local-window map.

    Returns a 0-dim tensor (differentiable) for tensor inputs and a plain
    float for numpy inputs. Images must be at least 11x11.
    """
    xt, x_np = _to_bchw(x)
    yt, y_np = _to_bchw(y)
    if xt.shape != yt.shape:
        raise ValueError(f"shape mismatch: {tuple(xt.shape)} vs {tuple(yt.shape)}")
    h, w = xt.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    value = _ssim_mean(xt, yt)
    if x_np or y_np:
        return float(value)
    return value


def _ssim_mean(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    win = _gaussian_window(x.dtype).to(x.device)
    kernel = win.expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)

    def local_mean(img: torch.Tensor) -> torch.Tensor:
        return F.conv2d(img, kernel, groups=c)

    mu_x = local_mean(x)
    mu_y = local_mean(y)
    sigma_x = local_mean(x * x) - mu_x * mu_x
    sigma_y = local_mean(y * y) - mu_y * mu_y
    sigma_xy = local_mean(x * y) - mu_x * mu_y

    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2)
    )
    return ssim_map.mean()
