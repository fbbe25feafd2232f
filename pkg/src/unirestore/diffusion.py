"""Noise schedules, forward noising, and the conditioned reverse sampling step.

The reverse step is the classic eps-prediction update

    x_{t-1} = (1/sqrt(alpha_t)) * (x_t - ((1-alpha_t)/sqrt(1-alpha_bar_t)) * eps_hat)
              + sigma_t * z

with a linear beta schedule and sigma_t = sqrt(beta_t) (sigma_0 = 0 so the
final step is deterministic). The noise draw ``z`` is always an explicit
argument of :func:`reverse_step`, never sampled internally, so every step can
be replayed exactly in tests.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import torch


class Role(enum.Enum):
    """What a latent tensor represents inside the restoration pipeline."""

    LQ = "lq"
    HQ_CLEAN = "hq_clean"
    HQ_NOISY = "hq_noisy"
    ALIGNED = "aligned"


@dataclass
class LatentFeature:
    """Rank-4 real tensor (batch, channels, height, width) plus its role."""

    data: torch.Tensor
    role: Role = Role.HQ_CLEAN

    def __post_init__(self) -> None:
        if self.data.dim() != 4:
            raise ValueError(f"latent features are rank-4, got rank {self.data.dim()}")
        if self.data.shape[2] < 1 or self.data.shape[3] < 1:
            raise ValueError("latent spatial dims must be >= 1")
        if not torch.isfinite(self.data).all():
            raise ValueError("latent feature contains non-finite entries")

    @property
    def shape(self) -> torch.Size:
        return self.data.shape


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed per-step diffusion coefficients.

    ``alpha_bars[t]`` is the cumulative product of ``alphas[:t+1]``;
    ``sigmas[0] == 0`` so the last reverse step adds no noise.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray
    beta_start: float = field(default=0.0, compare=False)
    beta_end: float = field(default=0.0, compare=False)

    @property
    def T(self) -> int:
        return len(self.betas)

    def validate(self) -> None:
        if self.T < 1:
            raise ValueError("schedule needs at least one step")
        for name, arr in (("betas", self.betas), ("alphas", self.alphas),
                          ("alpha_bars", self.alpha_bars), ("sigmas", self.sigmas)):
            if len(arr) != self.T:
                raise ValueError(f"{name} has length {len(arr)}, expected {self.T}")
        if np.any(self.betas < 0.0) or np.any(self.betas >= 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if np.any(self.alphas <= 0.0) or np.any(self.alphas > 1.0):
            raise ValueError("alphas must lie in (0, 1]")
        if np.any(np.diff(self.alpha_bars) > 1e-12):
            raise ValueError("alpha_bars must be non-increasing")
        if np.any(np.abs(self.alpha_bars - np.cumprod(self.alphas)) > 1e-6):
            raise ValueError("alpha_bars inconsistent with cumulative product of alphas")
        if self.sigmas[0] != 0.0:
            raise ValueError("sigmas[0] must be 0 (deterministic final step)")
        if np.any(self.sigmas < 0.0):
            raise ValueError("sigmas must be non-negative")
        # Guards the 0/0 case in the reverse update; unreachable via make_schedule.
        if np.any((self.alpha_bars == 1.0) & (self.alphas < 1.0)):
            raise ValueError("alpha_bar == 1 with alpha < 1 would divide by zero")


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.2) -> NoiseSchedule:
    """Build a linear beta schedule with ``T`` steps.

    ``beta_start == 0`` is allowed and yields the degenerate zero-noise
    schedule used by identity tests.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 <= beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 <= beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    sigmas = np.sqrt(betas)
    sigmas[0] = 0.0
    sched = NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars, sigmas=sigmas,
                          beta_start=float(beta_start), beta_end=float(beta_end))
    sched.validate()
    return sched


def _as_tensor(x: LatentFeature | torch.Tensor) -> torch.Tensor:
    return x.data if isinstance(x, LatentFeature) else x


def _check_t(t: int, T: int) -> None:
    if not 0 <= t < T:
        raise ValueError(f"step index {t} outside [0, {T})")


def q_sample(x0: LatentFeature | torch.Tensor, t: int | torch.Tensor,
             eps: torch.Tensor, sched: NoiseSchedule) -> LatentFeature:
    """Forward-noise ``x0`` to step ``t``: sqrt(abar_t) x0 + sqrt(1-abar_t) eps.

    ``t`` may be a single step index or a per-item LongTensor of shape (B,).
    """
    x = _as_tensor(x0)
    if eps.shape != x.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x.shape)}")
    if isinstance(t, torch.Tensor):
        if int(t.min()) < 0 or int(t.max()) >= sched.T:
            raise ValueError("per-item step indices outside schedule range")
        abar = torch.from_numpy(sched.alpha_bars[t.numpy()]).to(x.dtype).view(-1, 1, 1, 1)
        out = torch.sqrt(abar) * x + torch.sqrt(1.0 - abar) * eps
    else:
        _check_t(t, sched.T)
        abar = float(sched.alpha_bars[t])
        out = math.sqrt(abar) * x + math.sqrt(1.0 - abar) * eps
    return LatentFeature(out, Role.HQ_NOISY)


def reverse_step(x_t: LatentFeature | torch.Tensor, eps_hat: torch.Tensor, t: int,
                 z: torch.Tensor, sched: NoiseSchedule) -> LatentFeature:
    """One conditioned reverse update from step ``t`` towards step ``t-1``."""
    x = _as_tensor(x_t)
    if eps_hat.shape != x.shape:
        raise ValueError(f"eps_hat shape {tuple(eps_hat.shape)} != x_t shape {tuple(x.shape)}")
    if z.shape != x.shape:
        raise ValueError(f"z shape {tuple(z.shape)} != x_t shape {tuple(x.shape)}")
    _check_t(t, sched.T)
    alpha = float(sched.alphas[t])
    abar = float(sched.alpha_bars[t])
    sigma = float(sched.sigmas[t])
    if abar == 1.0 and alpha < 1.0:
        raise ValueError(f"alpha_bar[{t}] == 1 with alpha[{t}] < 1: division by zero")
    # beta_t == 0 makes the correction term vanish; skip the 0/0.
    coef = 0.0 if alpha == 1.0 else (1.0 - alpha) / math.sqrt(1.0 - abar)
    out = (x - coef * eps_hat) / math.sqrt(alpha) + sigma * z
    return LatentFeature(out, Role.HQ_NOISY)


def sample_loop(f_lq: LatentFeature, c: torch.Tensor | None, denoiser,
                sched: NoiseSchedule, rng_seed: int) -> LatentFeature:
    """Run the full reverse chain from seeded Gaussian noise.

    ``denoiser`` maps ``(x_t, f_lq, c, t) -> eps_hat`` on raw tensors. The
    chain is deterministic given ``rng_seed``; ``z`` is forced to zero at the
    final step.
    """
    gen = torch.Generator().manual_seed(rng_seed)
    ref = f_lq.data
    x = torch.randn(ref.shape, generator=gen, dtype=ref.dtype, device=ref.device)
    for t in range(sched.T - 1, -1, -1):
        eps_hat = denoiser(x, ref, c, t)
        if not torch.isfinite(eps_hat).all():
            raise RuntimeError(f"denoiser produced non-finite values at step t={t}")
        if t > 0:
            z = torch.randn(ref.shape, generator=gen, dtype=ref.dtype, device=ref.device)
        else:
            z = torch.zeros_like(x)
        x = reverse_step(x, eps_hat, t, z, sched).data
        if not torch.isfinite(x).all():
            raise RuntimeError(f"reverse chain diverged (non-finite latent) at step t={t}")
    return LatentFeature(x, Role.HQ_CLEAN)
