"""Evaluation over a corpus manifest.

Writes two reports into the output directory plus one comparison grid PNG
per task (rows: clean, degraded, restored).

``report.csv`` has one row per task plus a final ``average`` row::

    task,count,psnr_degraded,psnr_restored,ssim_degraded,ssim_restored

``report.json`` is the nested version::

    {
      "split": str, "seed": int, "missing": int,
      "tasks": {task: {"count", "psnr_degraded", "psnr_restored",
                       "ssim_degraded", "ssim_restored"}},
      "average": {...same keys...},
      "expert_utilization": [fraction per expert] | null,
      "images": [{"clean", "degraded", "task", "psnr_degraded",
                  "psnr_restored", "ssim_degraded", "ssim_restored"}]
    }

Everything is deterministic: entries are processed in manifest order, the
sampler seed per entry is derived from the evaluation seed and the entry
index, and floats are rendered with fixed precision.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .checkpoint import derive_seed
from .corpus import load_image, load_manifest, save_image
from .experts import utilization
from .metrics import psnr, ssim
from .pipeline import Restorer

GRID_MAX_COLUMNS = 4


def _mean(values: list[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


def _aggregate(rows: list[dict]) -> dict:
    return {
        "count": len(rows),
        "psnr_degraded": _mean([r["psnr_degraded"] for r in rows]),
        "psnr_restored": _mean([r["psnr_restored"] for r in rows]),
        "ssim_degraded": _mean([r["ssim_degraded"] for r in rows]),
        "ssim_restored": _mean([r["ssim_restored"] for r in rows]),
    }


def _write_csv(path: Path, tasks: dict[str, dict], average: dict) -> None:
    lines = ["task,count,psnr_degraded,psnr_restored,ssim_degraded,ssim_restored"]
    for task in sorted(tasks):
        s = tasks[task]
        lines.append(f"{task},{s['count']},{s['psnr_degraded']:.6f},{s['psnr_restored']:.6f},"
                     f"{s['ssim_degraded']:.6f},{s['ssim_restored']:.6f}")
    lines.append(f"average,{average['count']},{average['psnr_degraded']:.6f},"
                 f"{average['psnr_restored']:.6f},{average['ssim_degraded']:.6f},"
                 f"{average['ssim_restored']:.6f}")
    path.write_text("\n".join(lines) + "\n")


def _write_grid(path: Path, triples: list[tuple[np.ndarray, np.ndarray, np.ndarray]]) -> None:
    cols = triples[:GRID_MAX_COLUMNS]
    rows = []
    for i in range(3):
        rows.append(np.concatenate([t[i] for t in cols], axis=1))
    save_image(np.concatenate(rows, axis=0), path)


def evaluate(ckpt_path, manifest_path, out_dir, split: str = "test", seed: int = 0,
             restorer=None, steps_override: int | None = None) -> dict:
    """Restore every entry of the split and report per-task mean PSNR/SSIM.

    ``restorer`` may be a callable ``(image, task, seed) -> image`` to bypass
    the model (used by the pass-through oracle tests); by default the
    checkpoint is loaded and the full pipeline runs. Entries whose files
    cannot be read are counted as missing and skipped.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(manifest_path, strict=False)
    entries = manifest.split_entries(split)
    if not entries:
        entries = manifest.entries

    model_restorer = None
    if restorer is None:
        model_restorer = Restorer.from_checkpoint(ckpt_path)
        num_experts = (model_restorer.model.experts.cfg.num_experts
                       if model_restorer.model.experts is not None else 0)
        decisions = []

        def restorer(image, task, entry_seed):
            out = model_restorer.restore_array(image, task_tag=task, seed=entry_seed,
                                               steps_override=steps_override)
            if model_restorer.model.experts is not None:
                decisions.extend(model_restorer.model.experts.last_decisions)
            return out
    else:
        num_experts = 0
        decisions = []

    images = []
    grid_samples: dict[str, list] = {}
    missing = 0
    for index, entry in enumerate(entries):
        try:
            clean = load_image(entry.clean_path)
            degraded = load_image(entry.degraded_path)
        except OSError:
            missing += 1
            continue
        restored = restorer(degraded, entry.task, derive_seed(seed, "eval", index))
        row = {
            "clean": str(entry.clean_path),
            "degraded": str(entry.degraded_path),
            "task": entry.task,
            "psnr_degraded": psnr(clean, degraded),
            "psnr_restored": psnr(clean, restored),
            "ssim_degraded": float(ssim(clean, degraded)),
            "ssim_restored": float(ssim(clean, restored)),
        }
        images.append(row)
        grid_samples.setdefault(entry.task, [])
        if len(grid_samples[entry.task]) < GRID_MAX_COLUMNS:
            grid_samples[entry.task].append((clean, degraded, restored))

    tasks = {}
    for task in sorted({r["task"] for r in images}):
        tasks[task] = _aggregate([r for r in images if r["task"] == task])
    average = _aggregate(images)

    expert_util = None
    if decisions and num_experts:
        expert_util = utilization(decisions, num_experts).tolist()

    report = {
        "split": split,
        "seed": seed,
        "missing": missing,
        "tasks": tasks,
        "average": average,
        "expert_utilization": expert_util,
        "images": images,
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_csv(out_dir / "report.csv", tasks, average)
    for task, triples in sorted(grid_samples.items()):
        _write_grid(out_dir / f"grid_{task.replace('+', '-')}.png", triples)
    return report
