"""Procedural occupancy grids used to train the base denoiser."""

from __future__ import annotations

import numpy as np

from ..core.types import PATCH_SIZE

KINDS = ("sphere", "box", "slab", "layered")


def _coords(n: int = PATCH_SIZE) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c = (np.arange(n) + 0.5) / n
    return np.meshgrid(c, c, c, indexing="ij")


def sphere(rng: np.random.Generator) -> np.ndarray:
    x, y, z = _coords()
    r = rng.uniform(0.12, 0.4)
    cx, cy, cz = rng.uniform(r * 0.5, 1 - r * 0.5, size=3)
    return (((x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2) <= r * r).astype(np.float64)


def box(rng: np.random.Generator) -> np.ndarray:
    x, y, z = _coords()
    lo = rng.uniform(0.0, 0.6, size=3)
    hi = lo + rng.uniform(0.15, 0.5, size=3)
    return ((x >= lo[0]) & (x <= hi[0]) & (y >= lo[1]) & (y <= hi[1])
            & (z >= lo[2]) & (z <= hi[2])).astype(np.float64)


def slab(rng: np.random.Generator) -> np.ndarray:
    """Skin-like half space or thin sheet, roughly normal to the depth axis."""
    x, y, z = _coords()
    tilt = rng.normal(0.0, 0.08, size=2)
    depth = rng.uniform(0.1, 0.9)
    surf = z - depth - tilt[0] * (x - 0.5) - tilt[1] * (y - 0.5)
    if rng.random() < 0.5:
        return (surf <= 0).astype(np.float64)
    thickness = rng.uniform(1.0, 3.0) / PATCH_SIZE
    return (np.abs(surf) <= thickness / 2).astype(np.float64)


def layered(rng: np.random.Generator) -> np.ndarray:
    """Stack of depth layers with distinct levels, optionally with a sheet between them."""
    _, _, z = _coords()
    n_layers = rng.integers(2, 5)
    cuts = np.sort(rng.uniform(0.05, 0.95, size=n_layers - 1))
    levels = rng.uniform(0.0, 1.0, size=n_layers)
    out = np.full(z.shape, levels[0])
    for cut, lvl in zip(cuts, levels[1:]):
        out[z > cut] = lvl
    if rng.random() < 0.3:
        out[sphere(rng) > 0] = rng.uniform(0.0, 0.2)
    return out


_MAKERS = {"sphere": sphere, "box": box, "slab": slab, "layered": layered}


def procedural_patches(count: int, seed: int = 0, kinds=KINDS) -> np.ndarray:
    """``(count, 32, 32, 32)`` grids cycling through ``kinds`` with seeded parameters."""
    rng = np.random.default_rng(seed)
    kinds = tuple(kinds)
    return np.stack([_MAKERS[kinds[i % len(kinds)]](rng) for i in range(count)])
