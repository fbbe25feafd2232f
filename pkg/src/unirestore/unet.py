"""Miniature noise-prediction UNet operating on latent maps.

The degradation-fusion stack sits at the input: it aligns the low-quality
conditioning latent with the noisy latent, and a 1x1 projection brings the
doubled channel count back to the latent width before the usual down/up
path. Every residual block is modulated by the timestep embedding; the
bottleneck can cross-attend onto the content embedding. The output head is
zero-initialized so an untrained network predicts exactly zero noise.

``fusion_mode`` selects the conditioning pathway, which is also how the
ablation variants are wired:

* ``full``         double-stream + single-stream fusion + content attention
* ``single_only``  single-stream fusion only
* ``double_only``  double-stream fusion only
* ``rsa``          residual self-attention over the concatenated pair
* ``concat``       plain channel concatenation
* ``none``         unconditional; the low-quality latent is never read
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import LatentFeature
from .fusion import (DegradationFusion, SelfAttentionFusion, ContentCrossAttention,
                     embed_timesteps)

FUSION_MODES = ("full", "single_only", "double_only", "rsa", "concat", "none")


@dataclass(frozen=True)
class UNetConfig:
    latent_channels: int = 4
    widths: tuple[int, ...] = (32, 64)
    res_blocks: int = 2
    daff_blocks: int = 1
    attn_at_bottleneck: bool = True
    time_dim: int = 32
    content_dim: int = 16
    num_heads: int = 1
    fusion_mode: str = "full"

    def __post_init__(self) -> None:
        if len(self.widths) < 2:
            raise ValueError("need at least two resolution levels")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.time_dim % 2 or self.time_dim < 2:
            raise ValueError("time_dim must be a positive even number")

    @property
    def num_levels(self) -> int:
        return len(self.widths)


def _groups(channels: int, preferred: int = 8) -> int:
    for g in range(min(preferred, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class FiLMResBlock(nn.Module):
    """Residual block with scale/shift modulation from the timestep embedding."""

    def __init__(self, in_channels: int, out_channels: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.film = nn.Linear(time_dim, 2 * out_channels)
        self.norm2 = nn.GroupNorm(_groups(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = (nn.Conv2d(in_channels, out_channels, 1)
                     if in_channels != out_channels else nn.Identity())

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(t_emb).chunk(2, dim=-1)
        h = self.norm2(h) * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class FusionFrontend(nn.Module):
    """Conditioning pathway in front of the UNet; output is latent-width."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.mode = cfg.fusion_mode
        c = cfg.latent_channels
        self.fusion: nn.Module | None = None
        if self.mode in ("full", "single_only", "double_only"):
            self.fusion = DegradationFusion(
                c, num_heads=cfg.num_heads, time_dim=cfg.time_dim, blocks=cfg.daff_blocks,
                content_dim=cfg.content_dim,
                use_double=self.mode != "single_only",
                use_single=self.mode != "double_only")
        elif self.mode == "rsa":
            self.fusion = SelfAttentionFusion(2 * c, num_heads=cfg.num_heads)
        self.proj = nn.Conv2d(2 * c, c, 1) if self.mode != "none" else None

    def forward(self, x_t: torch.Tensor, f_lq: torch.Tensor | None,
                t_emb: torch.Tensor, c: torch.Tensor | None) -> torch.Tensor:
        if self.mode == "none":
            return x_t
        if self.mode == "concat":
            fused = torch.cat([f_lq, x_t], dim=1)
        elif self.mode == "rsa":
            fused = self.fusion(f_lq, x_t)
        else:
            fused = self.fusion(f_lq, x_t, t_emb, c)
        return self.proj(fused)


class DenoisingUNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths
        self.frontend = FusionFrontend(cfg)
        self.stem = nn.Conv2d(cfg.latent_channels, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i in range(cfg.num_levels - 1):
            self.down_blocks.append(nn.ModuleList(
                [FiLMResBlock(widths[i], widths[i], cfg.time_dim)
                 for _ in range(cfg.res_blocks)]))
            self.downsamples.append(nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1))

        bottom = widths[-1]
        self.mid_block1 = FiLMResBlock(bottom, bottom, cfg.time_dim)
        self.mid_attn = (ContentCrossAttention(bottom, cfg.content_dim)
                         if cfg.attn_at_bottleneck else None)
        self.mid_block2 = FiLMResBlock(bottom, bottom, cfg.time_dim)

        self.upsamples = nn.ModuleList()
        self.skip_projs = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for i in range(cfg.num_levels - 2, -1, -1):
            self.upsamples.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(widths[i + 1], widths[i], 3, padding=1)))
            self.skip_projs.append(nn.Conv2d(2 * widths[i], widths[i], 1))
            self.up_blocks.append(nn.ModuleList(
                [FiLMResBlock(widths[i], widths[i], cfg.time_dim)
                 for _ in range(cfg.res_blocks)]))

        self.out_norm = nn.GroupNorm(_groups(widths[0]), widths[0])
        self.out_conv = nn.Conv2d(widths[0], cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def _time_embedding(self, t, batch: int, dtype: torch.dtype) -> torch.Tensor:
        if isinstance(t, torch.Tensor):
            ts = t.reshape(-1)
            if ts.numel() == 1:
                ts = ts.expand(batch)
        else:
            ts = torch.full((batch,), float(t))
        return embed_timesteps(ts, self.cfg.time_dim).to(dtype)

    def forward(self, x_t: torch.Tensor, f_lq: torch.Tensor | None,
                c: torch.Tensor | None, t) -> torch.Tensor:
        if self.frontend.mode != "none":
            if f_lq is None:
                raise ValueError("this fusion mode needs the degraded latent")
            if f_lq.shape != x_t.shape:
                raise ValueError(f"latent shapes differ: x_t {tuple(x_t.shape)} "
                                 f"vs f_lq {tuple(f_lq.shape)}")
        t_emb = self._time_embedding(t, x_t.shape[0], x_t.dtype)
        feat = self.frontend(x_t, f_lq, t_emb, c)
        if not torch.isfinite(feat).all():
            raise RuntimeError("non-finite activations leaving the fusion frontend")
        h = self.stem(feat)
        skips = []
        for blocks, down in zip(self.down_blocks, self.downsamples):
            for block in blocks:
                h = block(h, t_emb)
            skips.append(h)
            h = down(h)
        h = self.mid_block1(h, t_emb)
        if self.mid_attn is not None and c is not None:
            h = self.mid_attn(h, c)
        h = self.mid_block2(h, t_emb)
        for up, proj, blocks in zip(self.upsamples, self.skip_projs, self.up_blocks):
            h = up(h)
            h = proj(torch.cat([h, skips.pop()], dim=1))
            for block in blocks:
                h = block(h, t_emb)
        out = self.out_conv(F.silu(self.out_norm(h)))
        if not torch.isfinite(out).all():
            raise RuntimeError("non-finite activations leaving the output head")
        return out


def predict_noise(model: DenoisingUNet, x_t, f_lq, c: torch.Tensor | None, t) -> torch.Tensor:
    """Functional wrapper unwrapping :class:`LatentFeature` arguments."""
    xt = x_t.data if isinstance(x_t, LatentFeature) else x_t
    fl = f_lq.data if isinstance(f_lq, LatentFeature) else f_lq
    return model(xt, fl, c, t)
