import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))  # makes `oracles` importable

from unirestore.config import RunConfig
from unirestore.corpus import build_corpus, procedural_clean, save_clean_images
from unirestore.degrade import spec_for_task


def finite_diff_check(loss_fn, parameters, step=1e-3, rtol=1e-2, atol=1e-6,
                      probe_limit=None):
    """Compare autograd gradients of loss_fn() against central differences.

    ``parameters`` is an iterable of (name, tensor); tensors must be float64
    for the stated tolerances to be meaningful. ``probe_limit`` caps the
    number of entries checked per parameter (None checks all).
    """
    params = [(n, p) for n, p in parameters if p.requires_grad]
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    checked = 0
    for name, p in params:
        analytic = p.grad.detach().clone().reshape(-1) if p.grad is not None \
            else torch.zeros(p.numel(), dtype=p.dtype)
        flat = p.data.reshape(-1)
        indices = range(flat.numel()) if probe_limit is None else range(
            min(probe_limit, flat.numel()))
        for idx in indices:
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + step
                plus = float(loss_fn())
                flat[idx] = orig - step
                minus = float(loss_fn())
                flat[idx] = orig
            fd = (plus - minus) / (2.0 * step)
            a = float(analytic[idx])
            tol = rtol * max(abs(fd), abs(a)) + atol
            assert abs(fd - a) <= tol, (
                f"gradient mismatch at {name}[{idx}]: analytic {a:.6e} vs fd {fd:.6e}")
            checked += 1
    assert checked > 0
    return checked


@pytest.fixture(scope="session")
def toy_corpus_dir(tmp_path_factory):
    """Small paired denoising corpus: 16 procedural 16x16 images."""
    root = tmp_path_factory.mktemp("toycorpus")
    images = procedural_clean(16, 16, seed=7)
    clean_dir = root / "clean"
    save_clean_images(images, clean_dir)
    spec = spec_for_task("denoise")
    build_corpus(clean_dir, [spec], root, splits=(0.75, 0.125, 0.125), master_seed=7)
    return root


@pytest.fixture()
def tiny_config(toy_corpus_dir):
    """Config small enough for second-scale training smoke tests."""
    cfg = RunConfig()
    cfg.set("schedule.T", 8)
    cfg.set("codec.base_width", 4)
    cfg.set("codec.latent_channels", 2)
    cfg.set("codec.downscale_factor", 4)
    cfg.set("codec.skip_levels", 2)
    cfg.set("unet.widths", "8,16")
    cfg.set("unet.res_blocks", 1)
    cfg.set("unet.time_dim", 8)
    cfg.set("unet.content_dim", 4)
    cfg.set("daem.num_experts", 2)
    cfg.set("daem.kernel_sizes", "3,5")
    cfg.set("train.batch", 4)
    cfg.set("train.steps", 4)
    cfg.set("train.freeze_phase_a_steps", 2)
    cfg.set("data.manifest", str(toy_corpus_dir / "manifest.jsonl"))
    return cfg


def rand_image(shape, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=shape).astype(np.float32)
