"""DDPM operations on voxel patches: noising, training, fine-tuning and guidance."""

from __future__ import annotations

import logging
import math
from typing import Callable, Sequence

import numpy as np
import torch

from ..core.errors import TrainingDivergedError, ValidationError
from ..core.types import PATCH_SIZE, VoxelPatch
from .denoiser import Denoiser, DenoiserConfig
from .lora import AdaptedDenoiser
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

NoisePredictor = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def as_grids(patches, dtype=torch.float32) -> torch.Tensor:
    """Stack patches (``VoxelPatch``, arrays or tensors) into a ``(P, 32, 32, 32)`` tensor."""
    if isinstance(patches, torch.Tensor):
        g = patches.to(dtype)
    elif isinstance(patches, VoxelPatch):
        g = torch.tensor(patches.grid, dtype=dtype)
    elif isinstance(patches, np.ndarray):
        g = torch.as_tensor(patches, dtype=dtype)
    else:
        g = torch.stack([as_grids(p, dtype) for p in patches])
    if g.ndim == 3:
        g = g[None]
    if g.shape[-3:] != (PATCH_SIZE,) * 3:
        raise ValidationError(f"expected 32^3 grids, got {tuple(g.shape)}")
    return g


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    c = torch.as_tensor(np.asarray(values)[np.asarray(t)], dtype=like.dtype)
    return c.reshape(-1, *([1] * (like.ndim - 1))) if c.ndim else c


def forward_diffuse(x0, t, schedule: NoiseSchedule, noise) -> torch.Tensor:
    """Closed-form marginal ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` may be a scalar or one step per leading entry of ``x0``.
    """
    schedule.check_step(t)
    x0 = torch.as_tensor(x0)
    noise = torch.as_tensor(noise, dtype=x0.dtype)
    ab = _coef(schedule.alpha_bar, t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * noise


def forward_diffuse_stepwise(x0: np.ndarray, t: int, schedule: NoiseSchedule,
                             rng: np.random.Generator) -> np.ndarray:
    """Sample ``x_t`` by iterating ``q(x_s | x_{s-1}) = N(sqrt(1 - b_s) x_{s-1}, b_s I)``."""
    schedule.check_step(t)
    x = np.array(x0, dtype=np.float64, copy=True)
    for s in range(1, t + 1):
        b = schedule.betas[s]
        x = math.sqrt(1.0 - b) * x + math.sqrt(b) * rng.standard_normal(x.shape)
    return x


def denoise_estimate(model: NoisePredictor, noisy, t: int, schedule: NoiseSchedule) -> torch.Tensor:
    """Posterior-mean estimate of the clean grid, ``(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)``,
    clamped to [0, 1]. Runs without autograd: the result is a fixed target."""
    schedule.check_step(t)
    x = as_grids(noisy) if not isinstance(noisy, torch.Tensor) else noisy
    ab = float(schedule.alpha_bar[t])
    with torch.no_grad():
        steps = torch.full((x.shape[0],) if x.ndim == 4 else (), int(t), dtype=torch.long)
        eps = model(x, steps)
        x0 = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
    return torch.clamp(x0, 0.0, 1.0).detach()


def guidance_targets(model: NoisePredictor, border, scatter, t_g: int,
                     schedule: NoiseSchedule, seed: int,
                     channels: tuple[bool, bool] = (True, True)) -> tuple[torch.Tensor, torch.Tensor]:
    """Prior predictions for border-probability and scattering-density patches.

    Each channel is noised to ``t_g`` with its own draw from a generator seeded
    by ``seed`` and denoised independently; both are returned as
    ``(P, 32, 32, 32)`` tensors in [0, 1] with no autograd history. A channel
    switched off in ``channels`` skips the denoiser and returns its input; the
    noise draw is unchanged, so the other channel's target does not depend on it.
    """
    b = as_grids(border).detach()
    s = as_grids(scatter).detach()
    if b.shape != s.shape:
        raise ValidationError("border and scatter patches must have the same shape")
    g = torch.Generator().manual_seed(int(seed))
    x0 = torch.cat([b, s], dim=0)
    noise = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
    xt = forward_diffuse(x0, t_g, schedule, noise)
    n = b.shape[0]
    if all(channels):
        m = denoise_estimate(model, xt, t_g, schedule)
        return m[:n], m[n:]
    m_b = denoise_estimate(model, xt[:n], t_g, schedule) if channels[0] else b
    m_s = denoise_estimate(model, xt[n:], t_g, schedule) if channels[1] else s
    return m_b, m_s


# ----------------------------------------------------------------------
# training


def _cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * step / max(total, 1)))


def _denoising_loss(model: NoisePredictor, x0: torch.Tensor, t: torch.Tensor,
                    noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    xt = forward_diffuse(x0, t.numpy(), schedule, noise)
    return torch.mean((noise - model(xt, t)) ** 2)


def _fit(model, params, data: torch.Tensor, schedule: NoiseSchedule, steps: int, seed: int,
         lr: float, batch: int, label: str) -> list[float]:
    if data.shape[0] == 0:
        raise ValidationError(f"{label}: empty patch dataset")
    rng = np.random.default_rng(seed)
    g = torch.Generator().manual_seed(int(seed))
    opt = torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)
    losses: list[float] = []
    model.train()
    for step in range(steps):
        for group in opt.param_groups:
            group["lr"] = _cosine_lr(lr, step, steps)
        idx = rng.integers(0, data.shape[0], size=batch)
        t = torch.as_tensor(rng.integers(1, schedule.T + 1, size=batch), dtype=torch.long)
        x0 = data[idx]
        noise = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
        loss = _denoising_loss(model, x0, t, noise, schedule)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDivergedError(
                f"{label}: non-finite loss at step {step}", step,
                {"recent_losses": losses[-10:], "lr": opt.param_groups[0]["lr"]},
            )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(value)
        log.debug("%s step %d loss %.6f", label, step, value)
    model.eval()
    return losses


def train_base(patches, schedule: NoiseSchedule, steps: int, seed: int = 0, lr: float = 1e-3,
               batch: int = 4, config: DenoiserConfig | None = None) -> tuple[Denoiser, list[float]]:
    """Train a denoiser from scratch with the noise-prediction objective.

    Returns the model and the per-step loss history. ``steps = 0`` returns the
    seeded initialisation untouched.
    """
    data = as_grids(patches)
    model = Denoiser(config, seed=seed)
    losses = _fit(model, list(model.parameters()), data, schedule, steps, seed, lr, batch, "prior")
    return model, losses


def finetune_lora(base: Denoiser, patches, schedule: NoiseSchedule, steps: int, rank: int = 4,
                  scale: float = 1.0, seed: int = 0, lr: float = 1e-3,
                  batch: int = 4) -> tuple[AdaptedDenoiser, list[float]]:
    """Fit low-rank adapters on ``patches`` with the same objective as :func:`train_base`.

    Only the adapter factors are handed to the optimiser; the base weights are
    frozen and never modified.
    """
    data = as_grids(patches)
    model = AdaptedDenoiser(base, rank=rank, scale=scale, seed=seed)
    losses = _fit(model, model.adapter_parameters(), data, schedule, steps, seed, lr, batch, "finetune")
    return model, losses


def denoising_loss(model: NoisePredictor, patches, schedule: NoiseSchedule, seed: int = 0,
                   draws: int = 4) -> float:
    """Mean noise-prediction error over fixed random ``(t, eps)`` draws (evaluation helper)."""
    data = as_grids(patches)
    rng = np.random.default_rng(seed)
    g = torch.Generator().manual_seed(int(seed))
    total = 0.0
    with torch.no_grad():
        for _ in range(draws):
            t = torch.as_tensor(rng.integers(1, schedule.T + 1, size=data.shape[0]), dtype=torch.long)
            noise = torch.randn(data.shape, generator=g, dtype=data.dtype)
            total += float(_denoising_loss(model, data, t, noise, schedule))
    return total / draws


def ancestral_sample(model: NoisePredictor, schedule: NoiseSchedule, count: int = 1,
                     seed: int = 0) -> torch.Tensor:
    """Full reverse chain with ``Sigma_t = beta_t I`` (test utility)."""
    g = torch.Generator().manual_seed(int(seed))
    x = torch.randn((count,) + (PATCH_SIZE,) * 3, generator=g)
    with torch.no_grad():
        for t in range(schedule.T, 0, -1):
            b = float(schedule.betas[t])
            ab = float(schedule.alpha_bar[t])
            eps = model(x, torch.full((count,), t, dtype=torch.long))
            mean = (x - b / math.sqrt(1.0 - ab) * eps) / math.sqrt(1.0 - b)
            x = mean + (math.sqrt(b) * torch.randn(x.shape, generator=g) if t > 1 else 0.0)
    return torch.clamp(x, 0.0, 1.0)
