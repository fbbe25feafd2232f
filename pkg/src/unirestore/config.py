"""Flat key=value run configuration.

Config files are plain text, one ``key = value`` pair per line, ``#`` starts
a comment. Every key is documented in :data:`SCHEMA`; unknown keys are
rejected. Lists are comma-separated.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .degrade import LETTER_TO_TASK, TASK_TO_TAG


class ConfigError(ValueError):
    """Malformed configuration: unknown key, bad type, or bad value."""


@dataclass(frozen=True)
class Field:
    kind: str  # int | float | bool | str | int_list | str_list
    default: object
    doc: str


SCHEMA: dict[str, Field] = {
    "schedule.T": Field("int", 50, "diffusion step count"),
    "schedule.beta_start": Field("float", 1e-4, "first beta of the linear schedule"),
    "schedule.beta_end": Field("float", 0.2, "last beta of the linear schedule"),
    "codec.in_channels": Field("int", 3, "image channels"),
    "codec.latent_channels": Field("int", 4, "latent channels"),
    "codec.downscale_factor": Field("int", 4, "spatial compression (2, 4, or 8)"),
    "codec.base_width": Field("int", 16, "channel width of the first codec stage"),
    "codec.skip_levels": Field("int", 2, "number of encoder feature taps exported"),
    "unet.widths": Field("int_list", (32, 64), "channel widths per resolution level"),
    "unet.res_blocks": Field("int", 2, "residual blocks per level"),
    "unet.attn_at_bottleneck": Field("bool", True, "content cross-attention at the bottleneck"),
    "unet.time_dim": Field("int", 32, "timestep embedding width"),
    "unet.content_dim": Field("int", 16, "content embedding width"),
    "unet.num_heads": Field("int", 1, "attention heads in the fusion blocks"),
    "daff.blocks": Field("int", 1, "fusion block pairs at the UNet input"),
    "daff.use_task_tag": Field("bool", True, "condition on the task tag (else tag 'none')"),
    "daem.num_experts": Field("int", 4, "expert branches per decoder stage"),
    "daem.k": Field("int", 1, "experts activated per token"),
    "daem.noise_std": Field("float", 0.1, "router exploration noise std (training only)"),
    "daem.kernel_sizes": Field("int_list", (3, 5, 7, 9), "expert receptive fields (odd)"),
    "daem.depth": Field("int", 1, "NAF blocks per expert branch"),
    "loss.lambda1": Field("float", 0.2, "structural (SSIM) loss weight"),
    "loss.lambda2": Field("float", 0.01, "expert load-balance loss weight"),
    "train.stage": Field("int", 1, "training stage (1 or 2)"),
    "train.lr": Field("float", 2e-4, "Adam learning rate"),
    "train.steps": Field("int", 1000, "optimizer steps for the stage"),
    "train.batch": Field("int", 8, "batch size"),
    "train.seed": Field("int", 0, "master seed for init, batching, and noise draws"),
    "train.freeze_phase_a_steps": Field("int", 500,
                                        "stage-1 steps training only the fusion stack"),
    "train.stage2_sampled_latents": Field("bool", False,
                                          "supervise stage 2 from sampled instead of "
                                          "encoded latents"),
    "data.manifest": Field("str", "", "path to the corpus manifest"),
    "data.tasks": Field("str_list", ("denoise",), "task names used by gen-data"),
    "ablation.no_fusion": Field("bool", False, "variant: no conditioning pathway"),
    "ablation.single_stream_only": Field("bool", False, "variant: single-stream fusion only"),
    "ablation.double_stream_only": Field("bool", False, "variant: double-stream fusion only"),
    "ablation.rsa_baseline": Field("bool", False, "variant: residual self-attention fusion"),
    "ablation.no_daem": Field("bool", False, "variant: decoder without the expert module"),
    "ablation.no_task_tag": Field("bool", False, "variant: all task tags forced to 'none'"),
}

ABLATION_FLAGS = tuple(k for k in SCHEMA if k.startswith("ablation."))


def _parse_value(key: str, kind: str, raw: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "str":
            return raw
        if kind == "int_list":
            return tuple(int(p) for p in raw.split(",") if p.strip())
        if kind == "str_list":
            return tuple(p.strip() for p in raw.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {kind}") from exc
    raise ConfigError(f"unknown field kind {kind}")


def _render_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("int_list", "str_list"):
        return ",".join(str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


class RunConfig:
    """Typed view over the flat key-value configuration."""

    def __init__(self, values: dict | None = None):
        self._values = {k: f.default for k, f in SCHEMA.items()}
        if values:
            for key, value in values.items():
                self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        field = SCHEMA[key]
        if isinstance(value, str):
            value = _parse_value(key, field.kind, value)
        elif field.kind == "int_list":
            value = tuple(int(v) for v in value)
        elif field.kind == "str_list":
            value = tuple(str(v) for v in value)
        elif field.kind == "float":
            value = float(value)
        self._values[key] = value
        self._validate_value(key, value)

    def _validate_value(self, key: str, value) -> None:
        if key == "train.stage" and value not in (1, 2):
            raise ConfigError("train.stage must be 1 or 2")
        if key == "data.tasks":
            for task in value:
                for part in task.split("+"):
                    name = LETTER_TO_TASK.get(part.strip(), part.strip())
                    if name not in TASK_TO_TAG:
                        raise ConfigError(f"unknown task {task!r} in data.tasks")

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def updated(self, overrides: dict) -> "RunConfig":
        cfg = RunConfig(dict(self._values))
        for k, v in overrides.items():
            cfg.set(k, v)
        return cfg

    def to_dict(self) -> dict:
        return dict(self._values)

    def to_text(self) -> str:
        lines = [f"{k} = {_render_value(SCHEMA[k].kind, self._values[k])}"
                 for k in sorted(self._values)]
        return "\n".join(lines) + "\n"

    def to_rendered_dict(self) -> dict[str, str]:
        return {k: _render_value(SCHEMA[k].kind, self._values[k]) for k in sorted(self._values)}

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, raw_line in enumerate(text.splitlines(), start=1):
            line = raw_line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
            key, _, value = line.partition("=")
            cfg.set(key.strip(), value.strip())
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    def enabled_ablations(self) -> list[str]:
        return [k.split(".", 1)[1] for k in ABLATION_FLAGS if self._values[k]]
