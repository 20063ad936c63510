"""Flat ``key = value`` run configuration.

Every tunable lives on :class:`RunConfig`. Files may contain blank lines and
``#`` comments; unknown keys and unparsable values raise :class:`ConfigError`
naming the key. Defaults are desk scale; ``docs/config.md`` lists the
full-scale values next to each key.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _opt(default, doc: str, choices: tuple | None = None):
    return field(default=default, metadata={"doc": doc, "choices": choices})


@dataclass(frozen=True)
class RunConfig:
    # general
    seed: int = _opt(0, "Master seed for every random stream (init, batches, guidance, noise).")
    # field network
    field_layers: int = _opt(4, "Hidden layers in the field MLP (full scale: 8).")
    field_width: int = _opt(64, "Hidden units per layer (full scale: 256).")
    field_skip: int = _opt(2, "Layer index that re-injects the encoded input (full scale: 5).")
    pe_frequencies: int = _opt(6, "Positional-encoding frequency count L (full scale: 10).")
    # rendering
    boundary_mode: str = _opt("expected", "Boundary mask handling.", ("expected", "bernoulli_straight_through"))
    scatter_mode: str = _opt("expected", "Scatterer presence handling.", ("expected", "bernoulli_straight_through"))
    w_reflect: float = _opt(0.5, "Weight of the reflection image in B-mode composition.")
    w_scatter: float = _opt(0.5, "Weight of the scattering image in B-mode composition.")
    psf_size: int = _opt(0, "Odd Gaussian point-spread kernel size; 0 disables the PSF.")
    psf_sigma_axial: float = _opt(1.0, "PSF standard deviation along depth, in pixels.")
    psf_sigma_lateral: float = _opt(1.0, "PSF standard deviation across scan lines, in pixels.")
    # field optimisation
    iterations: int = _opt(2000, "Field optimisation steps (full scale: 300000).")
    batch_size: int = _opt(512, "Scan lines per step (full scale: 4096).")
    lr_start: float = _opt(5e-4, "Initial learning rate of the exponential schedule.")
    lr_end: float = _opt(5e-5, "Learning rate reached at the last step.")
    photometric_reduction: str = _opt("mean", "Reduce per-ray squared column errors over the ray batch by mean or sum.",
                                      ("sum", "mean"))
    grad_clip: float = _opt(10.0, "Global gradient-norm clip; 0 disables clipping.")
    lambda_border: float = _opt(0.5, "Weight of the border-probability guidance loss.")
    lambda_scatter: float = _opt(0.25, "Weight of the scattering-density guidance loss.")
    use_border_loss: bool = _opt(True, "Ablation switch for the border-probability guidance loss.")
    use_scatter_loss: bool = _opt(True, "Ablation switch for the scattering-density guidance loss.")
    use_us_rendering: bool = _opt(True, "Render with the ultrasound model; false uses standard volume rendering.")
    guidance_every: int = _opt(10, "Apply guidance every k-th step.")
    guidance_patches: int = _opt(4, "Patches voxelised per guidance application.")
    guidance_step: int = _opt(-1, "Diffusion step used for guidance noising; -1 means T/10.")
    patch_fraction_min: float = _opt(0.1, "Smallest patch edge as a fraction of the scene extent.")
    patch_fraction_max: float = _opt(0.4, "Largest patch edge as a fraction of the scene extent.")
    checkpoint_every: int = _opt(0, "Write an intermediate checkpoint every k steps; 0 writes only the final one.")
    # diffusion prior
    diffusion_steps: int = _opt(100, "Diffusion step count T (full scale: 1000).")
    beta_start: float = _opt(1e-3, "First variance of the linear schedule (full scale: 1e-4).")
    beta_end: float = _opt(0.2, "Last variance of the linear schedule (full scale: 0.02).")
    denoiser_width: int = _opt(16, "Base channel count of the 3-D denoiser (full scale: 32).")
    prior_steps: int = _opt(400, "Base denoiser training steps (full scale: 30000).")
    prior_batch: int = _opt(4, "Patches per denoiser training step (full scale: 32).")
    prior_lr: float = _opt(1e-3, "Initial learning rate for denoiser training (cosine decay).")
    finetune_steps: int = _opt(200, "Low-rank adapter fine-tuning steps.")
    finetune_lr: float = _opt(1e-3, "Initial learning rate for adapter fine-tuning (cosine decay).")
    lora_rank: int = _opt(4, "Rank r of each low-rank adapter pair.")
    lora_scale: float = _opt(1.0, "Adapter scale delta in W' = W + delta * (A B).")

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            choices = f.metadata.get("choices")
            if choices and v not in choices:
                raise ConfigError(f"{f.name} must be one of {choices}, got {v!r}", f.name)
        positive_int = ("field_layers", "field_width", "iterations", "batch_size",
                        "guidance_every", "guidance_patches", "diffusion_steps",
                        "denoiser_width", "prior_batch", "lora_rank")
        for k in positive_int:
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1", k)
        for k in ("prior_steps", "finetune_steps", "checkpoint_every", "pe_frequencies", "psf_size"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0", k)
        if not 1 <= self.field_skip < self.field_layers:
            raise ConfigError("field_skip must satisfy 1 <= field_skip < field_layers", "field_skip")
        for k in ("lambda_border", "lambda_scatter", "w_reflect", "w_scatter", "grad_clip", "lora_scale"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be non-negative", k)
        if self.w_reflect + self.w_scatter > 1 + 1e-12:
            raise ConfigError("w_reflect + w_scatter must not exceed 1", "w_scatter")
        if self.psf_size and self.psf_size % 2 == 0:
            raise ConfigError("psf_size must be odd", "psf_size")
        for k in ("lr_start", "lr_end", "prior_lr", "finetune_lr", "psf_sigma_axial", "psf_sigma_lateral"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be positive", k)
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError("need 0 < beta_start <= beta_end < 1", "beta_end")
        if not 0 < self.patch_fraction_min <= self.patch_fraction_max <= 1:
            raise ConfigError("need 0 < patch_fraction_min <= patch_fraction_max <= 1", "patch_fraction_max")
        if self.guidance_step > self.diffusion_steps or self.guidance_step < -1:
            raise ConfigError("guidance_step must be -1 or within [0, diffusion_steps]", "guidance_step")

    # ------------------------------------------------------------------
    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def docs(cls) -> dict[str, str]:
        return {f.name: f.metadata["doc"] for f in dataclasses.fields(cls)}

    @property
    def effective_guidance_step(self) -> int:
        return self.diffusion_steps // 10 if self.guidance_step < 0 else self.guidance_step

    def replace(self, **overrides: Any) -> "RunConfig":
        unknown = set(overrides) - set(self.keys())
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f"unknown config key {key!r}", key)
        return dataclasses.replace(self, **overrides)

    def with_text_overrides(self, items: Mapping[str, str]) -> "RunConfig":
        return self.replace(**{k: _coerce(k, v) for k, v in items.items()})

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        items: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in cls.__dataclass_fields__:
                raise ConfigError(f"unknown config key {k!r} (line {lineno})", k)
            items[k] = v
        return cls().with_text_overrides(items)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _coerce(key: str, raw: str):
    fld = RunConfig.__dataclass_fields__.get(key)
    if fld is None:
        raise ConfigError(f"unknown config key {key!r}", key)
    kind = type(fld.default)
    try:
        if kind is bool:
            s = str(raw).strip().lower()
            if s in _BOOL_TRUE:
                return True
            if s in _BOOL_FALSE:
                return False
            raise ValueError(raw)
        if kind is int:
            return int(str(raw).strip())
        if kind is float:
            return float(str(raw).strip())
        return str(raw).strip()
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {kind.__name__}", key) from None


def config_markdown() -> str:
    """Markdown reference for every :class:`RunConfig` key."""
    rows = ["| key | default | description |", "| --- | --- | --- |"]
    for f in dataclasses.fields(RunConfig):
        d = f.default
        d = str(d).lower() if isinstance(d, bool) else d
        doc = f.metadata["doc"]
        if f.metadata.get("choices"):
            doc += " One of: " + ", ".join(f"`{c}`" for c in f.metadata["choices"]) + "."
        rows.append(f"| `{f.name}` | `{d}` | {doc} |")
    return "\n".join(rows)
