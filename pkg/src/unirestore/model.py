"""The full restoration model: two encoders, denoiser, decoder, experts.

The clean-image encoder stays frozen for the whole training procedure; the
degraded-image encoder shares its architecture and is warm-started as a copy
before any training step. Parameter groups used by the stage-wise freeze
protocol are exposed as methods.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .checkpoint import derive_seed
from .codec import CodecConfig, ImageDecoder, ImageEncoder, SkipBundle, copy_parameters
from .config import ConfigError, RunConfig
from .diffusion import NoiseSchedule, make_schedule
from .experts import DetailExpertStack, RouterConfig
from .fusion import TaskTagEmbedding
from .unet import DenoisingUNet, UNetConfig


def fusion_mode_from(cfg: RunConfig) -> str:
    flags = {
        "none": cfg["ablation.no_fusion"],
        "single_only": cfg["ablation.single_stream_only"],
        "double_only": cfg["ablation.double_stream_only"],
        "rsa": cfg["ablation.rsa_baseline"],
    }
    active = [mode for mode, on in flags.items() if on]
    if len(active) > 1:
        raise ConfigError(f"conflicting fusion ablation flags: {active}")
    return active[0] if active else "full"


def codec_config_from(cfg: RunConfig) -> CodecConfig:
    return CodecConfig(
        in_channels=cfg["codec.in_channels"],
        latent_channels=cfg["codec.latent_channels"],
        downscale_factor=cfg["codec.downscale_factor"],
        base_width=cfg["codec.base_width"],
        skip_levels=cfg["codec.skip_levels"],
    )


def unet_config_from(cfg: RunConfig) -> UNetConfig:
    return UNetConfig(
        latent_channels=cfg["codec.latent_channels"],
        widths=tuple(cfg["unet.widths"]),
        res_blocks=cfg["unet.res_blocks"],
        daff_blocks=cfg["daff.blocks"],
        attn_at_bottleneck=cfg["unet.attn_at_bottleneck"],
        time_dim=cfg["unet.time_dim"],
        content_dim=cfg["unet.content_dim"],
        num_heads=cfg["unet.num_heads"],
        fusion_mode=fusion_mode_from(cfg),
    )


def schedule_from(cfg: RunConfig) -> NoiseSchedule:
    return make_schedule(cfg["schedule.T"], cfg["schedule.beta_start"], cfg["schedule.beta_end"])


class RestorationModel(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.run_config = cfg
        self.codec_config = codec_config_from(cfg)
        self.unet_config = unet_config_from(cfg)
        self.hq_encoder = ImageEncoder(self.codec_config)
        self.lq_encoder = ImageEncoder(self.codec_config)
        self.decoder = ImageDecoder(self.codec_config)
        self.denoiser = DenoisingUNet(self.unet_config)
        self.tag_embed = TaskTagEmbedding(cfg["unet.content_dim"])
        if cfg["ablation.no_daem"]:
            self.experts = None
        else:
            router_cfg = RouterConfig(num_experts=cfg["daem.num_experts"],
                                      k=cfg["daem.k"], noise_std=cfg["daem.noise_std"])
            self.experts = DetailExpertStack(self.codec_config.expert_stage_channels(),
                                             router_cfg,
                                             kernel_sizes=tuple(cfg["daem.kernel_sizes"]),
                                             depth=cfg["daem.depth"])
        self.use_task_tag = cfg["daff.use_task_tag"] and not cfg["ablation.no_task_tag"]

    @property
    def fusion_mode(self) -> str:
        return self.unet_config.fusion_mode

    def content_embedding(self, tasks: list[str]) -> torch.Tensor:
        if not self.use_task_tag:
            tasks = ["none"] * len(tasks)
        return self.tag_embed(tasks)

    def encode_hq(self, images: torch.Tensor) -> tuple[torch.Tensor, SkipBundle]:
        return self.hq_encoder(images)

    def encode_lq(self, images: torch.Tensor) -> tuple[torch.Tensor, SkipBundle]:
        return self.lq_encoder(images)

    # Parameter groups for the stage-wise freeze protocol.

    def fusion_modules(self) -> list[nn.Module]:
        """The fusion stack trained alone in stage-1 phase A: the conditioning
        frontend (fusion blocks, content attention, input projection) plus the
        task-tag table."""
        mods: list[nn.Module] = [self.tag_embed]
        if self.denoiser.frontend.fusion is not None:
            mods.append(self.denoiser.frontend.fusion)
        if self.denoiser.frontend.proj is not None:
            mods.append(self.denoiser.frontend.proj)
        return mods

    def unet_body_parameters(self):
        fusion_param_ids = {id(p) for m in self.fusion_modules() for p in m.parameters()}
        return [p for p in self.denoiser.parameters() if id(p) not in fusion_param_ids]

    def stage2_modules(self) -> list[nn.Module]:
        mods: list[nn.Module] = [self.decoder]
        if self.experts is not None:
            mods.append(self.experts)
        return mods


def build_model(cfg: RunConfig, seed: int | None = None) -> RestorationModel:
    """Construct the model with seeded initialization and warm-start the
    degraded-image encoder from the clean-image encoder."""
    if seed is None:
        seed = cfg["train.seed"]
    torch.manual_seed(derive_seed(seed, "init"))
    model = RestorationModel(cfg)
    copy_parameters(model.hq_encoder, model.lq_encoder)
    return model
