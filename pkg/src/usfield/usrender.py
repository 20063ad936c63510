"""Differentiable B-mode rendering along scan lines.

Two paths share the same field head:

* the ultrasound path: transmitted intensity with reflection, boundary and
  attenuation losses, followed by a reflect + scatter composition;
* a standard emission-absorption path (density := scattering density,
  colour := scattering intensity) used by the rendering ablation.

All functions take ``(..., S, 5)`` parameter tensors with the channel order of
:data:`usfield.core.PARAM_NAMES` and work in the dtype they are given.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .core.errors import ValidationError
from .core.rays import frame_rays
from .core.types import Pose, ProbeConfig, ScanRay

FieldFn = Callable[[torch.Tensor], torch.Tensor]

#: Counts rendered columns per path; the ablation harness inspects it.
RENDER_CALLS: Counter = Counter()

_MODES = ("expected", "bernoulli_straight_through")


@dataclass(frozen=True)
class RenderConfig:
    boundary_mode: str = "expected"
    scatter_mode: str = "expected"
    psf_size: int = 0
    psf_sigma_axial: float = 1.0
    psf_sigma_lateral: float = 1.0
    w_reflect: float = 0.5
    w_scatter: float = 0.5

    def __post_init__(self):
        if self.boundary_mode not in _MODES or self.scatter_mode not in _MODES:
            raise ValidationError(f"render modes must be one of {_MODES}")
        if self.w_reflect < 0 or self.w_scatter < 0 or self.w_reflect + self.w_scatter > 1 + 1e-12:
            raise ValidationError("compose weights must be non-negative with sum <= 1")
        if self.psf_size and self.psf_size % 2 == 0:
            raise ValidationError("psf_size must be odd")

    @property
    def psf_enabled(self) -> bool:
        return self.psf_size > 0

    @property
    def stochastic(self) -> bool:
        return self.boundary_mode != "expected" or self.scatter_mode != "expected"

    @classmethod
    def from_run(cls, run) -> "RenderConfig":
        return cls(run.boundary_mode, run.scatter_mode, run.psf_size, run.psf_sigma_axial,
                   run.psf_sigma_lateral, run.w_reflect, run.w_scatter)


def psf_kernel(size: int, sigma_axial: float, sigma_lateral: float) -> np.ndarray:
    """Normalised ``(size, size)`` Gaussian; rows run along depth."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    ka = np.exp(-0.5 * (r / sigma_axial) ** 2)
    kl = np.exp(-0.5 * (r / sigma_lateral) ** 2)
    k = np.outer(ka, kl)
    return k / k.sum()


def _check_finite(samples: torch.Tensor) -> None:
    if not torch.isfinite(samples).all():
        raise ValidationError("non-finite acoustic parameters")


def _straight_through(prob: torch.Tensor, generator) -> torch.Tensor:
    draw = (torch.rand(prob.shape, generator=generator, dtype=prob.dtype) < prob).to(prob.dtype)
    return draw + (prob - prob.detach())


def exclusive_cumprod(x: torch.Tensor) -> torch.Tensor:
    ones = torch.ones_like(x[..., :1])
    return torch.cumprod(torch.cat([ones, x[..., :-1]], dim=-1), dim=-1)


def exclusive_cumsum(x: torch.Tensor) -> torch.Tensor:
    zeros = torch.zeros_like(x[..., :1])
    return torch.cumsum(torch.cat([zeros, x[..., :-1]], dim=-1), dim=-1)


def transmit(
    samples: torch.Tensor,
    probe: ProbeConfig,
    cfg: RenderConfig | None = None,
    generator: torch.Generator | None = None,
    dt: float | None = None,
) -> torch.Tensor:
    """Transmitted intensity ``I[t]`` before each sample along the last-but-one axis.

    ``I[t] = I0 * prod_{n<t} (1 - beta_n) G_n * exp(-dt f sum_{n<t} alpha_n)``, with
    ``G = 1 - rho_b`` in expected mode or a straight-through Bernoulli draw.
    """
    cfg = cfg or RenderConfig()
    samples = torch.as_tensor(samples)
    if samples.shape[-1] != 5 or samples.ndim < 2 or samples.shape[-2] < 1:
        raise ValidationError("transmit needs (..., S >= 1, 5) samples")
    _check_finite(samples)
    step = probe.dt if dt is None else dt
    alpha, beta, rho_b = samples[..., 0], samples[..., 1], samples[..., 2]
    g = 1.0 - rho_b
    if cfg.boundary_mode != "expected":
        g = _straight_through(g, generator)
    keep = (1.0 - beta) * g * torch.exp(-(step * probe.frequency) * alpha)
    return probe.initial_intensity * exclusive_cumprod(keep)


def compose_terms(samples: torch.Tensor, intensity: torch.Tensor, cfg: RenderConfig,
                  generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Weighted reflection and scattering images, pre-PSF and pre-clamp."""
    if samples.shape[:-1] != intensity.shape:
        raise ValidationError(
            f"samples {tuple(samples.shape[:-1])} and intensity {tuple(intensity.shape)} disagree"
        )
    beta, rho_b, rho_s, phi = samples[..., 1], samples[..., 2], samples[..., 3], samples[..., 4]
    if cfg.scatter_mode != "expected":
        rho_s = _straight_through(rho_s, generator)
    reflect = cfg.w_reflect * intensity * beta * rho_b
    scatter = cfg.w_scatter * intensity * rho_s * phi
    return reflect, scatter


def apply_psf(scatter: torch.Tensor, cfg: RenderConfig, lateral: bool) -> torch.Tensor:
    """Blur ``(..., W, S)`` scatter terms; the lateral axis is used only for whole frames."""
    k = torch.as_tensor(psf_kernel(cfg.psf_size, cfg.psf_sigma_axial, cfg.psf_sigma_lateral),
                        dtype=scatter.dtype)
    pad = cfg.psf_size // 2
    lead = scatter.shape[:-2]
    x = scatter.reshape(-1, 1, *scatter.shape[-2:])
    if lateral:
        # (W, S) layout, so the kernel is transposed: dim -2 lateral, dim -1 axial
        x = F.conv2d(x, k.T[None, None], padding=pad)
    else:
        ka = k.sum(dim=1)
        x = F.conv2d(x, ka[None, None, None, :], padding=(0, pad))
    return x.reshape(*lead, *scatter.shape[-2:])


def compose_bmode(samples: torch.Tensor, intensity: torch.Tensor, cfg: RenderConfig | None = None,
                  generator: torch.Generator | None = None, frame: bool = False) -> torch.Tensor:
    """Echo intensity ``E[t] = clamp(w_r I beta rho_b + w_s I rho_s phi, 0, 1)``.

    With the PSF enabled the scattering term is blurred before clamping: with
    ``frame=True`` the leading ``(W, S)`` axes are treated as one image and the
    full 2-D kernel is used, otherwise only its axial profile.
    """
    cfg = cfg or RenderConfig()
    samples = torch.as_tensor(samples)
    intensity = torch.as_tensor(intensity)
    reflect, scatter = compose_terms(samples, intensity, cfg, generator)
    if cfg.psf_enabled:
        if scatter.ndim == 1:
            scatter = apply_psf(scatter[None], cfg, lateral=False)[0]
        else:
            scatter = apply_psf(scatter, cfg, lateral=frame)
    return torch.clamp(reflect + scatter, 0.0, 1.0)


def standard_column(samples: torch.Tensor, dt: float) -> torch.Tensor:
    """Per-depth emission of the standard path, ``T(t) (1 - exp(-sigma dt)) c / dt``.

    Summing the column times ``dt`` gives :func:`volume_standard`.
    """
    samples = torch.as_tensor(samples)
    _check_finite(samples)
    sigma, color = samples[..., 3], samples[..., 4]
    tau = sigma * dt
    trans = torch.exp(-exclusive_cumsum(tau))
    return trans * (-torch.expm1(-tau)) * color / dt


def volume_standard(samples: torch.Tensor, dt: float) -> torch.Tensor:
    """Emission-absorption pixel value of one ray (sum over the last-but-one axis)."""
    return (standard_column(samples, dt) * dt).sum(dim=-1)


def sample_points(origins: torch.Tensor, dirs: torch.Tensor, depths: torch.Tensor) -> torch.Tensor:
    """``o + t d`` for every ray and depth, ``(B, S, 3)``."""
    return origins[:, None, :] + depths[None, :, None] * dirs[:, None, :]


def render_columns(
    field: FieldFn,
    origins,
    dirs,
    probe: ProbeConfig,
    cfg: RenderConfig | None = None,
    standard: bool = False,
    generator: torch.Generator | None = None,
    dtype=torch.float32,
    frame: bool = False,
) -> torch.Tensor:
    """Render ``B`` scan lines into ``(B, S)`` columns in [0, 1]."""
    cfg = cfg or RenderConfig()
    o = torch.as_tensor(np.asarray(origins), dtype=dtype)
    d = torch.as_tensor(np.asarray(dirs), dtype=dtype)
    t = torch.as_tensor(probe.depths(), dtype=dtype)
    pts = sample_points(o, d, t)
    params = field(pts.reshape(-1, 3)).reshape(*pts.shape[:-1], 5)
    if standard:
        RENDER_CALLS["standard"] += o.shape[0]
        return torch.clamp(standard_column(params, probe.dt), 0.0, 1.0)
    RENDER_CALLS["ultrasound"] += o.shape[0]
    intensity = transmit(params, probe, cfg, generator)
    return compose_bmode(params, intensity, cfg, generator, frame=frame)


def field_dtype(field) -> torch.dtype:
    params = getattr(field, "parameters", None)
    if params is not None:
        first = next(iter(params()), None)
        if first is not None:
            return first.dtype
    return getattr(field, "dtype", torch.float64)


def render_frame(
    field: FieldFn,
    pose: Pose,
    probe: ProbeConfig,
    cfg: RenderConfig | None = None,
    standard: bool = False,
    seed: int | None = None,
) -> torch.Tensor:
    """Render a full ``(n_samples, n_scanlines)`` B-mode frame.

    ``field`` is any callable mapping ``(N, 3)`` points to ``(N, 5)`` parameters,
    e.g. a :class:`usfield.field.Field` or a phantom sampler. Stochastic modes
    draw from a generator seeded with ``seed`` (0 when omitted).
    """
    cfg = cfg or RenderConfig()
    origins, dirs, _ = frame_rays(probe, pose)
    gen = None
    if cfg.stochastic:
        gen = torch.Generator().manual_seed(0 if seed is None else int(seed))
    cols = render_columns(field, origins, dirs, probe, cfg, standard, gen,
                          dtype=field_dtype(field), frame=True)
    return cols.T


def render_volume_standard(field: FieldFn, ray: ScanRay) -> torch.Tensor:
    """Standard volume-rendered pixel value of one ray (scalar tensor)."""
    dtype = field_dtype(field)
    pts = torch.as_tensor(ray.points(), dtype=dtype)
    params = field(pts)
    RENDER_CALLS["standard"] += 1
    return volume_standard(params, ray.dt)
