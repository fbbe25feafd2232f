"""Two-stage training loops with the stage-wise freeze protocol.

Stage 1 (degradation modeling): phase A trains only the fusion stack with
everything else frozen; phase B additionally unfreezes the degraded-image
encoder and the denoiser body. The clean-image encoder never trains. The
objective is mean absolute error between drawn and predicted noise.

Stage 2 (detail refinement): encoders, fusion stack, and denoiser are
frozen; only the decoder and the expert stack train, supervised by the
composite reconstruction / structural / load-balance loss against the clean
image. By default the decoder input is the encoded degraded latent; set
``train.stage2_sampled_latents`` to supervise from sampled latents instead.

All randomness is drawn from per-step generators seeded by
``derive_seed(train.seed, stage, step)``, so runs are exactly reproducible
and resumable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (config_hash, derive_seed, load_checkpoint, parameter_checksum,
                         save_checkpoint)
from .codec import freeze, unfreeze
from .config import RunConfig
from .corpus import CorpusManifest, load_image, load_manifest
from .diffusion import LatentFeature, Role, q_sample, sample_loop
from .experts import utilization
from .losses import LossWeights, stage1_loss, stage2_loss
from .model import RestorationModel, build_model, schedule_from


@dataclass
class Sample:
    lq: torch.Tensor
    hq: torch.Tensor
    task: str


@dataclass
class StageResult:
    model: RestorationModel
    losses: list[float]
    checkpoint_path: Path | None
    extras: dict = field(default_factory=dict)


def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float()


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(1, 2, 0).astype(np.float32)


def load_split_samples(manifest: CorpusManifest, split: str) -> list[Sample]:
    entries = manifest.split_entries(split)
    if not entries:
        raise ValueError(f"manifest has no {split!r} entries")
    return [Sample(lq=image_to_tensor(load_image(e.degraded_path)),
                   hq=image_to_tensor(load_image(e.clean_path)),
                   task=e.task) for e in entries]


def group_checksums(model: RestorationModel) -> dict[str, str]:
    """Per-group parameter digests used by the freeze-ledger checks."""
    fusion_state = {}
    for i, mod in enumerate(model.fusion_modules()):
        for k, v in mod.state_dict().items():
            fusion_state[f"{i}.{k}"] = v
    body_state = {k: v for k, v in model.denoiser.state_dict().items()
                  if not k.startswith("frontend.")}
    groups = {
        "hq_encoder": parameter_checksum(model.hq_encoder),
        "lq_encoder": parameter_checksum(model.lq_encoder),
        "decoder": parameter_checksum(model.decoder),
        "fusion": parameter_checksum(fusion_state),
        "unet_body": parameter_checksum(body_state),
    }
    if model.experts is not None:
        groups["experts"] = parameter_checksum(model.experts)
    return groups


def checkpoint_meta(cfg: RunConfig, stage: int, global_step: int) -> dict:
    return {
        "config": cfg.to_rendered_dict(),
        "config_hash": config_hash(cfg.to_text()),
        "stage": stage,
        "global_step": global_step,
        "seed": cfg["train.seed"],
    }


def save_model_checkpoint(path: str | Path, model: RestorationModel, cfg: RunConfig,
                          stage: int, global_step: int) -> Path:
    return save_checkpoint(path, dict(model.state_dict()),
                           checkpoint_meta(cfg, stage, global_step))


def load_model_checkpoint(path: str | Path) -> tuple[dict, RunConfig, RestorationModel]:
    meta, params = load_checkpoint(path)
    cfg = RunConfig(meta["config"])
    model = RestorationModel(cfg)
    try:
        model.load_state_dict(params, strict=True)
    except RuntimeError as exc:
        raise ValueError(f"checkpoint {path} does not match its config snapshot: {exc}") from exc
    return meta, cfg, model


def _batch(samples: list[Sample], gen: torch.Generator, batch_size: int):
    idx = torch.randint(0, len(samples), (batch_size,), generator=gen)
    lq = torch.stack([samples[i].lq for i in idx])
    hq = torch.stack([samples[i].hq for i in idx])
    tasks = [samples[i].task for i in idx]
    return lq, hq, tasks


def _apply_stage1_freeze(model: RestorationModel, phase: str) -> None:
    freeze(model)
    for mod in model.fusion_modules():
        unfreeze(mod)
    if phase == "b":
        unfreeze(model.lq_encoder)
        for p in model.unet_body_parameters():
            p.requires_grad_(True)


def train_stage1(cfg: RunConfig, out_path: str | Path | None = None,
                 resume_path: str | Path | None = None) -> StageResult:
    manifest = load_manifest(cfg["data.manifest"])
    samples = load_split_samples(manifest, "train")
    seed = cfg["train.seed"]
    steps = cfg["train.steps"]
    phase_a_steps = cfg["train.freeze_phase_a_steps"]
    start_step = 0
    if resume_path is not None:
        meta, _, model = load_model_checkpoint(resume_path)
        if meta["stage"] != 1:
            raise ValueError(f"cannot resume stage 1 from a stage-{meta['stage']} checkpoint")
        start_step = meta["global_step"]
    else:
        model = build_model(cfg, seed)
    schedule = schedule_from(cfg)
    weights_dtype = next(model.parameters()).dtype

    model.train()
    losses: list[float] = []
    optimizer = None
    current_phase = None
    for step in range(start_step, steps):
        phase = "a" if step < phase_a_steps else "b"
        if phase != current_phase:
            current_phase = phase
            _apply_stage1_freeze(model, phase)
            optimizer = torch.optim.Adam(
                [p for p in model.parameters() if p.requires_grad], lr=cfg["train.lr"])
        gen = torch.Generator().manual_seed(derive_seed(seed, "stage1", step))
        lq, hq, tasks = _batch(samples, gen, cfg["train.batch"])
        with torch.no_grad():
            x0, _ = model.encode_hq(hq)
        f_lq, _ = model.encode_lq(lq)
        ts = torch.randint(0, schedule.T, (lq.shape[0],), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=weights_dtype)
        x_t = q_sample(x0, ts, eps, schedule).data
        c = model.content_embedding(tasks)
        eps_hat = model.denoiser(x_t, f_lq, c, ts)
        loss = stage1_loss(eps, eps_hat)
        if not math.isfinite(float(loss)):
            raise RuntimeError(f"stage-1 loss became non-finite at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss))

    path = None
    if out_path is not None:
        path = save_model_checkpoint(out_path, model, cfg, stage=1, global_step=steps)
    return StageResult(model=model, losses=losses, checkpoint_path=path)


def _stage2_latents(model: RestorationModel, lq: torch.Tensor, tasks: list[str],
                    cfg: RunConfig, schedule, step: int):
    """Latent and skips feeding the decoder during stage-2 supervision."""
    with torch.no_grad():
        latent, skips = model.encode_lq(lq)
        if cfg["train.stage2_sampled_latents"]:
            c = model.content_embedding(tasks)
            den = lambda x, fl, cc, t: model.denoiser(x, fl, cc, t)
            latent = sample_loop(LatentFeature(latent, Role.LQ), c, den, schedule,
                                 derive_seed(cfg["train.seed"], "stage2-sample", step)).data
    return latent, skips


def train_stage2(cfg: RunConfig, stage1_ckpt: str | Path,
                 out_path: str | Path | None = None) -> StageResult:
    meta, _, model = load_model_checkpoint(stage1_ckpt)
    if meta["stage"] not in (1, 2):
        raise ValueError(f"unexpected checkpoint stage {meta['stage']}")
    manifest = load_manifest(cfg["data.manifest"])
    samples = load_split_samples(manifest, "train")
    seed = cfg["train.seed"]
    schedule = schedule_from(cfg)
    weights = LossWeights(cfg["loss.lambda1"], cfg["loss.lambda2"])
    num_experts = cfg["daem.num_experts"]

    freeze(model)
    for mod in model.stage2_modules():
        unfreeze(mod)
    optimizer = torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad], lr=cfg["train.lr"])
    model.train()

    losses: list[float] = []
    components_log: list[dict[str, float]] = []
    util_log: list[list[float]] = []
    log_every = max(1, len(samples) // max(1, cfg["train.batch"]))
    for step in range(cfg["train.steps"]):
        gen = torch.Generator().manual_seed(derive_seed(seed, "stage2", step))
        lq, hq, tasks = _batch(samples, gen, cfg["train.batch"])
        latent, skips = _stage2_latents(model, lq, tasks, cfg, schedule, step)
        router_gen = torch.Generator().manual_seed(derive_seed(seed, "stage2-router", step))
        pred = model.decoder(latent, skips, experts=model.experts, generator=router_gen)
        decisions = model.experts.last_decisions if model.experts is not None else None
        total, comps = stage2_loss(pred, hq, decisions, weights, num_experts)
        if not math.isfinite(float(total)):
            raise RuntimeError(f"stage-2 loss became non-finite at step {step}")
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        losses.append(float(total))
        components_log.append({k: float(v) for k, v in comps.items()})
        if decisions is not None and (step + 1) % log_every == 0:
            util_log.append(utilization(decisions, num_experts).tolist())

    path = None
    if out_path is not None:
        path = save_model_checkpoint(out_path, model, cfg, stage=2,
                                     global_step=cfg["train.steps"])
    return StageResult(model=model, losses=losses, checkpoint_path=path,
                       extras={"components": components_log, "utilization": util_log})
