"""Procedural clean images, paired-corpus generation, and manifest I/O.

The manifest is line-delimited JSON, format version 1. The first line is a
header object with keys (in order) ``type``, ``format_version``,
``master_seed``, ``warnings``; every following line is one entry with keys
``split``, ``task``, ``clean``, ``degraded``, ``spec``. Paths are stored
relative to the manifest file. Splits are assigned per clean image so no
clean image leaks across splits.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .degrade import DegradationSpec, degrade, task_name

MANIFEST_VERSION = 1
MANIFEST_TYPE = "unirestore-corpus"
SPLITS = ("train", "val", "test")


def derive_item_seed(master_seed: int, index: int) -> int:
    """Stable 63-bit per-item seed from the master seed and item index."""
    digest = hashlib.sha256(f"{master_seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def procedural_clean(n: int, size: int, seed: int) -> np.ndarray:
    """Deterministic family of (n, size, size, 3) test images in [0, 1].

    Image kinds cycle: checkerboard, oriented gradient, Gaussian blobs,
    stroke doodles. The checkerboard uses size/4 cells with exact {0, 1}
    values.
    """
    if n < 1 or size < 4:
        raise ValueError("need n >= 1 and size >= 4")
    images = np.zeros((n, size, size, 3), dtype=np.float32)
    makers = (_checkerboard, _gradient, _blobs, _strokes)
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        images[i] = makers[i % len(makers)](size, rng)
    return images


def _checkerboard(size: int, rng) -> np.ndarray:
    cell = max(1, size // 4)
    idx = np.arange(size) // cell
    board = ((idx[:, None] + idx[None, :]) % 2).astype(np.float32)
    return np.repeat(board[:, :, None], 3, axis=2)


def _gradient(size: int, rng) -> np.ndarray:
    angle = rng.uniform(0.0, math.pi)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
    ramp = xs * math.cos(angle) + ys * math.sin(angle)
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-8)
    c0 = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
    c1 = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
    return (1.0 - ramp[..., None]) * c0 + ramp[..., None] * c1


def blob_params(size: int, rng) -> list[tuple[float, float, float, float]]:
    """Draw (cx, cy, sigma, amplitude) for each Gaussian blob of an image."""
    params = []
    for _ in range(int(rng.integers(2, 6))):
        cx, cy = rng.uniform(0, size, size=2)
        sigma = rng.uniform(size / 10.0, size / 4.0)
        amp = rng.uniform(0.4, 1.0)
        params.append((float(cx), float(cy), float(sigma), float(amp)))
    return params


def _blobs(size: int, rng) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32)
    img = np.zeros((size, size), dtype=np.float32)
    for cx, cy, sigma, amp in blob_params(size, rng):
        img += amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma**2))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return np.repeat(img[:, :, None], 3, axis=2)


def _strokes(size: int, rng) -> np.ndarray:
    img = np.full((size, size), 0.85, dtype=np.float32)
    for _ in range(int(rng.integers(4, 9))):
        p0 = (int(rng.integers(0, size)), int(rng.integers(0, size)))
        p1 = (int(rng.integers(0, size)), int(rng.integers(0, size)))
        shade = float(rng.uniform(0.05, 0.3))
        cv2.line(img, p0, p1, color=shade, thickness=1)
    return np.repeat(img[:, :, None], 3, axis=2)


def save_image(image: np.ndarray, path: str | Path) -> None:
    """Write a float [0, 1] RGB image as 8-bit PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8), "RGB").save(path)


def load_image(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def save_clean_images(images: np.ndarray, out_dir: str | Path,
                      prefix: str = "clean") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = out / f"{prefix}_{i:04d}.png"
        save_image(img, p)
        paths.append(p)
    return paths


@dataclass
class ManifestEntry:
    clean_path: Path
    degraded_path: Path
    split: str
    task: str
    spec: DegradationSpec


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]
    master_seed: int = 0
    warnings: int = 0
    format_version: int = MANIFEST_VERSION

    def split_entries(self, split: str) -> list[ManifestEntry]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [e for e in self.entries if e.split == split]

    def tasks(self) -> list[str]:
        seen = []
        for e in self.entries:
            if e.task not in seen:
                seen.append(e.task)
        return seen


def _split_counts(n: int, fractions: tuple[float, float, float]) -> list[int]:
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-6 or min(fractions) < 0:
        raise ValueError(f"split fractions must be three non-negatives summing to 1, "
                         f"got {fractions}")
    raw = [n * f for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    remainders = sorted(range(3), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in range(n - sum(counts)):
        counts[remainders[i % 3]] += 1
    return counts


def _spec_to_json(spec: DegradationSpec) -> dict:
    return {"tags": list(spec.tags), "params": spec.params, "seed": spec.seed}


def _spec_from_json(obj: dict) -> DegradationSpec:
    return DegradationSpec(tags=tuple(obj["tags"]), params=obj.get("params", {}),
                           seed=int(obj.get("seed", 0)))


def build_corpus(clean_dir: str | Path, specs: list[DegradationSpec],
                 out_dir: str | Path, splits: tuple[float, float, float] = (0.8, 0.1, 0.1),
                 master_seed: int = 0) -> CorpusManifest:
    """Degrade every readable image in ``clean_dir`` with every spec.

    Per-item seeds are derived from ``master_seed`` and the entry index, so
    the output is byte-identical across runs. Returns the manifest, also
    written to ``out_dir / "manifest.jsonl"``.
    """
    clean_dir = Path(clean_dir)
    out_dir = Path(out_dir)
    if not specs:
        raise ValueError("need at least one degradation spec")
    files = sorted(p for p in clean_dir.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
    if not files:
        raise ValueError(f"no images found in {clean_dir}")

    readable = []
    warnings = 0
    for f in files:
        try:
            readable.append((f, load_image(f)))
        except OSError:
            warnings += 1
    if not readable:
        raise ValueError(f"no decodable images in {clean_dir}")

    counts = _split_counts(len(readable), splits)
    file_split = {}
    pos = 0
    for split, cnt in zip(SPLITS, counts):
        for f, _ in readable[pos:pos + cnt]:
            file_split[f] = split
        pos += cnt

    degraded_dir = out_dir / "degraded"
    degraded_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    index = 0
    for f, img in readable:
        for spec in specs:
            seeded = spec.with_seed(derive_item_seed(master_seed, index))
            task = task_name(seeded)
            out_path = degraded_dir / f"{f.stem}__{task.replace('+', '-')}__{index:05d}.png"
            save_image(degrade(img, seeded), out_path)
            entries.append(ManifestEntry(clean_path=f, degraded_path=out_path,
                                         split=file_split[f], task=task, spec=seeded))
            index += 1

    manifest = CorpusManifest(entries=entries, master_seed=master_seed, warnings=warnings)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def write_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent
    lines = [json.dumps({"type": MANIFEST_TYPE, "format_version": manifest.format_version,
                         "master_seed": manifest.master_seed, "warnings": manifest.warnings})]
    for e in manifest.entries:
        lines.append(json.dumps({
            "split": e.split,
            "task": e.task,
            "clean": os.path.relpath(e.clean_path, base),
            "degraded": os.path.relpath(e.degraded_path, base),
            "spec": _spec_to_json(e.spec),
        }))
    path.write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path, strict: bool = True) -> CorpusManifest:
    """Parse a manifest; with ``strict`` every referenced path must exist
    (evaluation passes strict=False and counts missing entries itself)."""
    path = Path(path)
    base = path.parent
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"empty manifest {path}")
    header = json.loads(lines[0])
    if header.get("type") != MANIFEST_TYPE:
        raise ValueError(f"{path} is not a corpus manifest")
    if header.get("format_version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {header.get('format_version')}")
    entries = []
    seen_degraded = set()
    for ln in lines[1:]:
        obj = json.loads(ln)
        clean = (base / obj["clean"]).resolve()
        degraded = (base / obj["degraded"]).resolve()
        if strict:
            for p in (clean, degraded):
                if not p.exists():
                    raise FileNotFoundError(f"manifest references missing file {p}")
        if degraded in seen_degraded:
            raise ValueError(f"degraded image {degraded} listed in more than one entry")
        seen_degraded.add(degraded)
        if obj["split"] not in SPLITS:
            raise ValueError(f"unknown split {obj['split']!r} in manifest")
        entries.append(ManifestEntry(clean_path=clean, degraded_path=degraded,
                                     split=obj["split"], task=obj["task"],
                                     spec=_spec_from_json(obj["spec"])))
    return CorpusManifest(entries=entries, master_seed=int(header.get("master_seed", 0)),
                          warnings=int(header.get("warnings", 0)))
