"""Synthetic degradation operators on float RGB images in [0, 1].

Each operator implements a standard physical model:

* noise     additive Gaussian, clamped
* haze      atmospheric scattering I = J e^{-beta d} + A (1 - e^{-beta d})
            over a synthetic linear depth ramp d in [1, 2] (top to bottom)
* rain      seeded oriented streak overlay, additive then clamped; the snow
            preset reuses it with wider, shorter, brighter streaks
* blur      convolution with a normalized oriented motion kernel
* lowlight  I = scale * J^gamma with scale <= 1, gamma >= 1

A :class:`DegradationSpec` lists tags in application order plus per-tag
parameters and a seed; composites built by this package apply tags in the
canonical order lowlight -> haze -> rain -> noise -> blur. Everything is
deterministic given the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import cv2
import numpy as np

TAGS = ("noise", "rain", "haze", "blur", "lowlight")
CANONICAL_ORDER = ("lowlight", "haze", "rain", "noise", "blur")

# Gaussian noise levels used by the single-task denoising protocol (sigma/255).
NOISE_SIGMAS = (15.0 / 255.0, 25.0 / 255.0, 50.0 / 255.0)

DEFAULT_PARAMS: dict[str, dict[str, float]] = {
    "noise": {"sigma": 25.0 / 255.0},
    "rain": {"density": 0.01, "angle": 20.0, "length": 10.0, "width": 1.0, "intensity": 0.6},
    "haze": {"beta": 1.0, "airlight": 0.8},
    "blur": {"kernel_size": 7.0, "angle": 0.0},
    "lowlight": {"gamma": 2.2, "scale": 0.5},
}

# Documented parameter ranges, checked by degrade(); inclusive bounds.
PARAM_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "noise": {"sigma": (1e-6, 0.999)},
    "rain": {"density": (1e-6, 0.1), "angle": (-80.0, 80.0), "length": (1.0, 64.0),
             "width": (1.0, 8.0), "intensity": (1e-6, 1.0)},
    "haze": {"beta": (1e-6, 20.0), "airlight": (0.0, 1.0)},
    "blur": {"kernel_size": (3.0, 31.0), "angle": (-360.0, 360.0)},
    "lowlight": {"gamma": (1.0, 5.0), "scale": (1e-6, 1.0)},
}


def snow_params() -> dict[str, float]:
    """Rain-generator preset for snow: wider, shorter, brighter streaks."""
    return {"density": 0.02, "angle": 10.0, "length": 5.0, "width": 2.0, "intensity": 0.8}


@dataclass(frozen=True)
class DegradationSpec:
    """Ordered degradation recipe; tags apply first-to-last."""

    tags: tuple[str, ...]
    params: dict[str, dict[str, float]] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.tags:
            raise ValueError("a degradation spec needs at least one tag")
        if len(set(self.tags)) != len(self.tags):
            raise ValueError(f"duplicate tags in {self.tags}")
        for tag in self.tags:
            if tag not in TAGS:
                raise ValueError(f"unknown degradation tag {tag!r}")
        for tag in self.params:
            if tag not in TAGS:
                raise ValueError(f"parameters given for unknown tag {tag!r}")

    def resolved_params(self, tag: str) -> dict[str, float]:
        merged = dict(DEFAULT_PARAMS[tag])
        merged.update(self.params.get(tag, {}))
        for name, value in merged.items():
            if name not in PARAM_RANGES[tag]:
                raise ValueError(f"unknown parameter {tag}.{name}")
            lo, hi = PARAM_RANGES[tag][name]
            if not lo <= value <= hi:
                raise ValueError(f"{tag}.{name}={value} outside documented range [{lo}, {hi}]")
        return merged

    def with_seed(self, seed: int) -> "DegradationSpec":
        return replace(self, seed=seed)


def canonical_order(tags) -> tuple[str, ...]:
    """Reorder tags into the canonical physical-capture order."""
    return tuple(t for t in CANONICAL_ORDER if t in tags)


def _check_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {img.shape}")
    return img


def _apply_noise(img, rng, p):
    return img + rng.normal(0.0, p["sigma"], size=img.shape).astype(np.float32)


def _depth_ramp(h: int, w: int) -> np.ndarray:
    rows = np.linspace(0.0, 1.0, h, dtype=np.float32) if h > 1 else np.zeros(1, np.float32)
    return (1.0 + rows)[:, None] * np.ones((1, w), dtype=np.float32)


def _apply_haze(img, rng, p):
    h, w = img.shape[:2]
    transmission = np.exp(-p["beta"] * _depth_ramp(h, w))[..., None]
    return img * transmission + p["airlight"] * (1.0 - transmission)


def _streak_canvas(h, w, rng, p) -> np.ndarray:
    canvas = np.zeros((h, w), dtype=np.float32)
    count = max(1, int(round(p["density"] * h * w)))
    for _ in range(count):
        x0 = float(rng.uniform(0, w))
        y0 = float(rng.uniform(0, h))
        angle = math.radians(p["angle"] + rng.uniform(-5.0, 5.0))
        length = p["length"] * rng.uniform(0.75, 1.25)
        x1 = x0 + length * math.sin(angle)
        y1 = y0 + length * math.cos(angle)
        brightness = float(rng.uniform(0.7, 1.0))
        cv2.line(canvas, (int(round(x0)), int(round(y0))), (int(round(x1)), int(round(y1))),
                 color=brightness, thickness=int(p["width"]), lineType=cv2.LINE_AA)
    return cv2.GaussianBlur(canvas, (3, 3), 0.5)


def _apply_rain(img, rng, p):
    h, w = img.shape[:2]
    return img + p["intensity"] * _streak_canvas(h, w, rng, p)[..., None]


def motion_kernel(kernel_size: int, angle: float) -> np.ndarray:
    """Normalized line kernel through the center at the given angle (degrees)."""
    k = int(kernel_size)
    if k % 2 != 1 or k < 3:
        raise ValueError(f"kernel size must be an odd integer >= 3, got {kernel_size}")
    kernel = np.zeros((k, k), dtype=np.float32)
    c = k // 2
    dx = math.cos(math.radians(angle))
    dy = math.sin(math.radians(angle))
    p0 = (int(round(c - dx * c)), int(round(c - dy * c)))
    p1 = (int(round(c + dx * c)), int(round(c + dy * c)))
    cv2.line(kernel, p0, p1, color=1.0, thickness=1)
    return kernel / kernel.sum()


def _apply_blur(img, rng, p):
    kernel = motion_kernel(int(p["kernel_size"]), p["angle"])
    return cv2.filter2D(img, -1, kernel, borderType=cv2.BORDER_REFLECT)


def _apply_lowlight(img, rng, p):
    return (p["scale"] * np.power(img, p["gamma"])).astype(np.float32)


_OPERATORS = {
    "noise": _apply_noise,
    "rain": _apply_rain,
    "haze": _apply_haze,
    "blur": _apply_blur,
    "lowlight": _apply_lowlight,
}


def degrade(clean: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Apply the spec's tags in order; deterministic given ``spec.seed``."""
    img = _check_image(clean)
    rng = np.random.default_rng(spec.seed)
    for tag in spec.tags:
        img = _OPERATORS[tag](img, rng, spec.resolved_params(tag))
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return img


# Task vocabulary: friendly names for single degradations plus letter codes
# for composites (L=lowlight, H=haze, R=rain, S=snow-preset rain, N=noise,
# B=blur). "desnow" is the snow-preset rain task.
TASK_TO_TAG = {
    "denoise": "noise",
    "derain": "rain",
    "dehaze": "haze",
    "deblur": "blur",
    "lowlight": "lowlight",
    "desnow": "rain",
}
LETTER_TO_TASK = {"L": "lowlight", "H": "dehaze", "R": "derain", "S": "desnow",
                  "N": "denoise", "B": "deblur"}
_TAG_TO_LETTER = {"lowlight": "L", "haze": "H", "rain": "R", "noise": "N", "blur": "B"}


def spec_for_task(task: str, seed: int = 0,
                  overrides: dict[str, dict[str, float]] | None = None) -> DegradationSpec:
    """Build the default spec for a task name.

    Single tasks use friendly names ("denoise", "derain", ...); composites
    join task names or letter codes with "+" (e.g. "lowlight+haze+rain" or
    "L+H+R") and apply in canonical order.
    """
    parts = [p.strip() for p in task.split("+") if p.strip()]
    if not parts:
        raise ValueError(f"empty task name {task!r}")
    names = [LETTER_TO_TASK.get(p, p) for p in parts]
    params: dict[str, dict[str, float]] = {}
    tags = []
    for name in names:
        if name not in TASK_TO_TAG:
            raise ValueError(f"unknown task {name!r} (from {task!r})")
        tag = TASK_TO_TAG[name]
        if tag in tags:
            raise ValueError(f"task {task!r} repeats degradation {tag!r}")
        tags.append(tag)
        if name == "desnow":
            params["rain"] = snow_params()
    if overrides:
        for tag, kv in overrides.items():
            params.setdefault(tag, {}).update(kv)
    return DegradationSpec(tags=canonical_order(tags), params=params, seed=seed)


def task_name(spec: DegradationSpec) -> str:
    """Canonical task label for a spec: friendly name for single tags,
    letter codes joined with "+" for composites."""
    if len(spec.tags) == 1:
        tag = spec.tags[0]
        if tag == "rain" and spec.params.get("rain", {}).get("width", 1.0) >= 2.0:
            return "desnow"
        return {v: k for k, v in TASK_TO_TAG.items() if k != "desnow"}[tag]
    letters = []
    for tag in spec.tags:
        letter = _TAG_TO_LETTER[tag]
        if tag == "rain" and spec.params.get("rain", {}).get("width", 1.0) >= 2.0:
            letter = "S"
        letters.append(letter)
    return "+".join(letters)
