"""Ultrasound neural fields with a voxel diffusion prior."""

from . import core, evalkit, field, phantom, prior, train, usrender

__version__ = "0.1.0"

__all__ = ["core", "evalkit", "field", "phantom", "prior", "train", "usrender"]
