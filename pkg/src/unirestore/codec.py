"""Miniature convolutional image codec.

A deterministic encoder/decoder pair stands in for a pre-trained variational
autoencoder: the encoder projects RGB images into a small latent map and
exports per-stage feature taps (the skip bundle), the decoder mirrors it and
can refine each skip-fed stage through a detail-expert stack. There is no
sampling and no KL term; the codec is a plain feature projector.

The pipeline keeps two encoders of identical architecture: a frozen one for
clean targets and a trainable one for degraded inputs, warm-started as a
copy of the frozen one.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .experts import DetailExpertStack


@dataclass(frozen=True)
class CodecConfig:
    in_channels: int = 3
    latent_channels: int = 4
    downscale_factor: int = 4
    base_width: int = 16
    skip_levels: int = 2

    def __post_init__(self) -> None:
        if self.downscale_factor not in (2, 4, 8):
            raise ValueError(f"downscale_factor must be 2, 4, or 8, got {self.downscale_factor}")
        if min(self.in_channels, self.latent_channels, self.base_width) < 1:
            raise ValueError("channel widths must be >= 1")
        if not 1 <= self.skip_levels <= self.num_stages:
            raise ValueError(f"skip_levels must be in [1, {self.num_stages}], "
                             f"got {self.skip_levels}")

    @property
    def num_stages(self) -> int:
        return self.downscale_factor.bit_length() - 1  # log2 of a power of two

    @property
    def stage_widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * 2**s for s in range(self.num_stages))

    @property
    def bottom_width(self) -> int:
        return self.base_width * 2**self.num_stages

    def expert_stage_channels(self) -> tuple[int, ...]:
        """Channel widths of the skip-fed decoder stages, coarsest first."""
        return tuple(self.stage_widths[s] for s in range(self.skip_levels - 1, -1, -1))


@dataclass
class SkipBundle:
    """Per-stage encoder taps, finest first; features[j] sits at input/2^j."""

    features: list[torch.Tensor]

    def __len__(self) -> int:
        return len(self.features)


def _conv_block(channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(channels, channels, 3, padding=1), nn.SiLU(),
        nn.Conv2d(channels, channels, 3, padding=1), nn.SiLU(),
    )


class ImageEncoder(nn.Module):
    """Stage-wise downsampling encoder with exported feature taps."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.stage_widths
        self.stem = nn.Conv2d(cfg.in_channels, widths[0], 3, padding=1)
        self.stage_blocks = nn.ModuleList(_conv_block(w) for w in widths)
        self.downs = nn.ModuleList(
            nn.Conv2d(widths[s], widths[s + 1] if s + 1 < len(widths) else cfg.bottom_width,
                      3, stride=2, padding=1)
            for s in range(len(widths)))
        self.bottom = _conv_block(cfg.bottom_width)
        self.head = nn.Conv2d(cfg.bottom_width, cfg.latent_channels, 1)

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, SkipBundle]:
        if image.dim() != 4:
            raise ValueError(f"expected (B, C, H, W) image, got rank {image.dim()}")
        h, w = image.shape[-2:]
        d = self.cfg.downscale_factor
        if h % d or w % d:
            raise ValueError(f"spatial dims {h}x{w} not divisible by downscale factor {d}")
        x = self.stem(image)
        taps = []
        for s, (block, down) in enumerate(zip(self.stage_blocks, self.downs)):
            x = block(x)
            if s < self.cfg.skip_levels:
                taps.append(x)
            x = down(x)
        latent = self.head(self.bottom(x))
        return latent, SkipBundle(taps)


class ImageDecoder(nn.Module):
    """Mirror of the encoder; skip taps are concatenated per stage and each
    skip-fed stage may be refined by a detail-expert stack before its convs.
    The final sigmoid keeps the output saturated into [0, 1]."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.stage_widths
        self.head = nn.Conv2d(cfg.latent_channels, cfg.bottom_width, 1)
        self.bottom = _conv_block(cfg.bottom_width)
        self.ups = nn.ModuleList()
        self.skip_projs = nn.ModuleDict()
        self.stage_blocks = nn.ModuleList()
        for s in range(cfg.num_stages - 1, -1, -1):
            src = widths[s + 1] if s + 1 < cfg.num_stages else cfg.bottom_width
            self.ups.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(src, widths[s], 3, padding=1)))
            if s < cfg.skip_levels:
                self.skip_projs[str(s)] = nn.Conv2d(2 * widths[s], widths[s], 1)
            self.stage_blocks.append(_conv_block(widths[s]))
        self.out = nn.Conv2d(widths[0], cfg.in_channels, 3, padding=1)

    def forward(self, latent: torch.Tensor, skips: SkipBundle | None = None,
                experts: DetailExpertStack | None = None,
                generator: torch.Generator | None = None) -> torch.Tensor:
        if latent.dim() != 4 or latent.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"expected (B, {self.cfg.latent_channels}, h, w) latent, "
                             f"got {tuple(latent.shape)}")
        taps = skips.features if skips is not None else []
        if taps and len(taps) != self.cfg.skip_levels:
            raise ValueError(f"expected {self.cfg.skip_levels} skip taps, got {len(taps)}")
        if experts is not None:
            experts.last_decisions = []
        x = self.bottom(self.head(latent))
        expert_idx = 0
        for i, s in enumerate(range(self.cfg.num_stages - 1, -1, -1)):
            x = self.ups[i](x)
            if taps and s < self.cfg.skip_levels:
                tap = taps[s]
                if tap.shape[1] != x.shape[1] or tap.shape[-2:] != x.shape[-2:]:
                    raise ValueError(f"skip tap {s} shape {tuple(tap.shape)} does not match "
                                     f"decoder stage shape {tuple(x.shape)}")
                x = self.skip_projs[str(s)](torch.cat([x, tap], dim=1))
                if experts is not None:
                    x = experts.refine(expert_idx, x, generator=generator)
                expert_idx += 1
            x = self.stage_blocks[i](x)
        return torch.sigmoid(self.out(x))


def freeze(module: nn.Module) -> nn.Module:
    """Exclude all parameters of ``module`` from optimizer updates."""
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def unfreeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(True)
    return module


def copy_parameters(src: nn.Module, dst: nn.Module) -> None:
    """Warm-start ``dst`` with the parameter values of ``src``."""
    dst.load_state_dict(src.state_dict())
