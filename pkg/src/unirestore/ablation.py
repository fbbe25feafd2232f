"""Ablation runner: trains every enabled variant under identical budgets and
seeds, evaluates each on the test split, and writes a comparison table.

Variants map onto the conditioning pathway and module toggles:

* ``full``                the complete model (always included)
* ``no_fusion``           the degraded latent is never read by the denoiser
* ``single_stream_only``  single-stream fusion only
* ``double_stream_only``  double-stream fusion only
* ``rsa_baseline``        one residual self-attention block over the
                          concatenated pair, no timestep modulation
* ``no_daem``             decoder without the expert stack
* ``no_task_tag``         task tags forced to "none"

``train.steps`` is the per-stage budget: each variant trains stage 1 and
stage 2 for that many steps. The output CSV has one row per variant:
``variant,psnr_degraded,psnr_restored,ssim_restored``.
"""

from __future__ import annotations

from pathlib import Path

from .config import ABLATION_FLAGS, RunConfig
from .evaluate import evaluate
from .train import train_stage1, train_stage2

VARIANTS = ("full",) + tuple(k.split(".", 1)[1] for k in ABLATION_FLAGS)


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    """Copy of ``cfg`` with exactly one ablation flag active (none for full)."""
    if variant != "full" and f"ablation.{variant}" not in ABLATION_FLAGS:
        raise ValueError(f"unknown ablation variant {variant!r}")
    overrides = {flag: False for flag in ABLATION_FLAGS}
    if variant != "full":
        overrides[f"ablation.{variant}"] = True
    return cfg.updated(overrides)


def run_variant(cfg: RunConfig, variant: str, out_dir: Path) -> dict:
    sub = variant_config(cfg, variant)
    vdir = out_dir / variant
    stage1 = train_stage1(sub, out_path=vdir / "stage1.ckpt")
    stage2 = train_stage2(sub, stage1.checkpoint_path, out_path=vdir / "stage2.ckpt")
    report = evaluate(stage2.checkpoint_path, sub["data.manifest"], vdir / "eval",
                      split="test", seed=sub["train.seed"])
    return {
        "variant": variant,
        "psnr_degraded": report["average"]["psnr_degraded"],
        "psnr_restored": report["average"]["psnr_restored"],
        "ssim_restored": report["average"]["ssim_restored"],
    }


def ablate(cfg: RunConfig, out_dir: str | Path) -> list[dict]:
    """Train and evaluate the full model plus every flagged variant."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = ["full"] + cfg.enabled_ablations()
    rows = [run_variant(cfg, v, out_dir) for v in variants]
    lines = ["variant,psnr_degraded,psnr_restored,ssim_restored"]
    for r in rows:
        lines.append(f"{r['variant']},{r['psnr_degraded']:.6f},"
                     f"{r['psnr_restored']:.6f},{r['ssim_restored']:.6f}")
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n")
    return rows
