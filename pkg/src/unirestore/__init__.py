"""Desk-scale latent-diffusion all-in-one image restoration.

A degradation-aware fusion stack conditions every denoising step on features
of the degraded input, and an expert-routed decoder stage recovers fine
detail from skip-connected encoder features. Training runs in two stages
under a strict freeze protocol; a synthetic degradation corpus makes the
whole pipeline self-contained.
"""

from .config import ConfigError, RunConfig
from .corpus import build_corpus, load_manifest, procedural_clean
from .degrade import DegradationSpec, degrade, spec_for_task
from .diffusion import (LatentFeature, NoiseSchedule, Role, make_schedule, q_sample,
                        reverse_step, sample_loop)
from .experts import RouterConfig, RouterDecision, aux_balance_loss, route
from .fusion import FusionState, embed_timestep
from .losses import LossWeights, stage1_loss, stage2_loss
from .metrics import MetricReport, psnr, ssim
from .model import RestorationModel, build_model
from .pipeline import Restorer, restore
from .train import train_stage1, train_stage2

__all__ = [
    "ConfigError", "RunConfig", "build_corpus", "load_manifest", "procedural_clean",
    "DegradationSpec", "degrade", "spec_for_task", "LatentFeature", "NoiseSchedule",
    "Role", "make_schedule", "q_sample", "reverse_step", "sample_loop", "RouterConfig",
    "RouterDecision", "aux_balance_loss", "route", "FusionState", "embed_timestep",
    "LossWeights", "stage1_loss", "stage2_loss", "MetricReport", "psnr", "ssim",
    "RestorationModel", "build_model", "Restorer", "restore",
    "train_stage1", "train_stage2",
]

__version__ = "0.1.0"
