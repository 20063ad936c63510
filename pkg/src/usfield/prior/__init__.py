"""Voxel diffusion prior: schedule, denoiser, low-rank adapters and guidance."""

from .denoiser import Denoiser, DenoiserConfig, adaptable_weights
from .diffusion import (
    ancestral_sample,
    denoise_estimate,
    denoising_loss,
    finetune_lora,
    forward_diffuse,
    forward_diffuse_stepwise,
    guidance_targets,
    train_base,
)
from .io import load_prior, save_prior
from .lora import AdaptedDenoiser, parameter_hash
from .schedule import NoiseSchedule
from .shapes import procedural_patches

__all__ = [
    "AdaptedDenoiser", "Denoiser", "DenoiserConfig", "NoiseSchedule", "adaptable_weights",
    "ancestral_sample", "denoise_estimate", "denoising_loss", "finetune_lora",
    "forward_diffuse", "forward_diffuse_stepwise", "guidance_targets", "load_prior",
    "parameter_hash", "procedural_patches", "save_prior", "train_base",
]
