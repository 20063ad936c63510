"""End-to-end prior construction used by the CLI defaults, demos and tests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from ..core.config import RunConfig
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import finetune_lora, train_base
from .io import load_adapter, load_base, save_adapter, save_base
from .lora import AdaptedDenoiser
from .schedule import NoiseSchedule
from .shapes import procedural_patches


@dataclass
class PriorBundle:
    base: Denoiser
    adapter: AdaptedDenoiser
    schedule: NoiseSchedule
    base_losses: list[float]
    finetune_losses: list[float]


_PRIOR_KEYS = ("seed", "diffusion_steps", "beta_start", "beta_end", "denoiser_width", "prior_steps",
               "prior_batch", "prior_lr", "finetune_steps", "finetune_lr", "lora_rank", "lora_scale",
               "patch_fraction_min", "patch_fraction_max")


def prior_fingerprint(run: RunConfig, base_patches: int, finetune_count: int) -> str:
    d = {k: getattr(run, k) for k in _PRIOR_KEYS}
    d.update(base_patches=base_patches, finetune_patches=finetune_count)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def build_desk_prior(run: RunConfig | None = None, base_patches: int = 256, finetune_count: int = 128,
                     cache_dir=None) -> PriorBundle:
    """Train a base denoiser on procedural shapes and adapt it to phantom-like patches.

    The adapter is fitted on skin-anchored border-probability and
    scattering-density patches of randomly drawn layered phantoms. With
    ``cache_dir`` set, results are stored under a fingerprint of the relevant
    settings and reloaded on later calls (loss histories are then empty).
    """
    from ..phantom import finetune_patches

    run = run or RunConfig()
    schedule = NoiseSchedule.from_run(run)
    if cache_dir is not None:
        root = Path(cache_dir) / f"prior-{prior_fingerprint(run, base_patches, finetune_count)}"
        if (root / "base.ckpt").is_file() and (root / "adapter.ckpt").is_file():
            base, schedule, _ = load_base(root / "base.ckpt")
            adapter, _ = load_adapter(root / "adapter.ckpt", base)
            return PriorBundle(base, adapter, schedule, [], [])
    base, base_losses = train_base(procedural_patches(base_patches, seed=run.seed), schedule, run.prior_steps,
                                   seed=run.seed, lr=run.prior_lr, batch=run.prior_batch,
                                   config=DenoiserConfig(width=run.denoiser_width))
    ft = finetune_patches(finetune_count, seed=run.seed,
                          size_fraction=(run.patch_fraction_min, run.patch_fraction_max))
    adapter, ft_losses = finetune_lora(base, ft, schedule, run.finetune_steps, rank=run.lora_rank,
                                       scale=run.lora_scale, seed=run.seed, lr=run.finetune_lr,
                                       batch=run.prior_batch)
    if cache_dir is not None:
        save_base(root / "base.ckpt", base, schedule)
        save_adapter(root / "adapter.ckpt", adapter, schedule)
    return PriorBundle(base, adapter, schedule, base_losses, ft_losses)
