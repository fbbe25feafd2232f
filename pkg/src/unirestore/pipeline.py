"""End-to-end restoration: encode, sample the reverse chain, decode.

The degraded image is encoded by the trainable encoder; the reverse chain
runs in latent space conditioned on that latent and the task tag; the
decoder reconstructs the image using the encoder's skip taps, refined by the
expert stack. Inference is deterministic given the seed (router noise is off
in eval mode).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .corpus import load_image
from .diffusion import LatentFeature, Role, make_schedule, sample_loop
from .metrics import MetricReport, psnr, ssim
from .model import RestorationModel, schedule_from
from .train import image_to_tensor, load_model_checkpoint, tensor_to_image


class Restorer:
    """Holds a loaded model plus its schedule for repeated restoration calls."""

    def __init__(self, model: RestorationModel, cfg: RunConfig):
        self.model = model
        self.cfg = cfg
        self.model.eval()

    @classmethod
    def from_checkpoint(cls, ckpt_path: str | Path) -> "Restorer":
        _, cfg, model = load_model_checkpoint(ckpt_path)
        return cls(model, cfg)

    def restore_array(self, image: np.ndarray, task_tag: str = "none",
                      steps_override: int | None = None, seed: int = 0) -> np.ndarray:
        d = self.model.codec_config.downscale_factor
        h, w = image.shape[:2]
        if h % d or w % d:
            raise ValueError(f"image dims {h}x{w} not divisible by codec downscale {d}")
        if steps_override is None:
            schedule = schedule_from(self.cfg)
        else:
            schedule = make_schedule(steps_override, self.cfg["schedule.beta_start"],
                                     self.cfg["schedule.beta_end"])
        with torch.no_grad():
            x = image_to_tensor(image)[None]
            latent, skips = self.model.encode_lq(x)
            c = self.model.content_embedding([task_tag])
            denoise = lambda xt, fl, cc, t: self.model.denoiser(xt, fl, cc, t)
            sampled = sample_loop(LatentFeature(latent, Role.LQ), c, denoise, schedule, seed)
            out = self.model.decoder(sampled.data, skips, experts=self.model.experts)
        return np.clip(tensor_to_image(out[0]), 0.0, 1.0)


def restore(lq_image, ckpt_path: str | Path, task_tag: str = "none",
            steps_override: int | None = None, seed: int = 0,
            reference: np.ndarray | str | Path | None = None
            ) -> tuple[np.ndarray, MetricReport | None]:
    """Restore one image from a checkpoint path or array.

    Returns the restored image and, when a clean reference is supplied, its
    metric report against that reference.
    """
    img = load_image(lq_image) if isinstance(lq_image, (str, Path)) else np.asarray(lq_image)
    restorer = Restorer.from_checkpoint(ckpt_path)
    out = restorer.restore_array(img, task_tag=task_tag, steps_override=steps_override,
                                 seed=seed)
    report = None
    if reference is not None:
        ref = load_image(reference) if isinstance(reference, (str, Path)) else np.asarray(reference)
        report = MetricReport(psnr_db=psnr(ref, out), ssim=float(ssim(ref, out)))
    return out, report
