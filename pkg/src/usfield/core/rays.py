"""Scan-line generation for linear and fan probes.

Probe-local axes: x is lateral (across the face), y is elevational and z is
the beam axis pointing into tissue. The face is centred on the local origin.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ValidationError
from .types import Pose, ProbeConfig, ScanRay


def lateral_positions(probe: ProbeConfig) -> np.ndarray:
    w = probe.n_scanlines
    return ((np.arange(w, dtype=np.float64) + 0.5) / w - 0.5) * probe.width


def local_rays(probe: ProbeConfig) -> tuple[np.ndarray, np.ndarray]:
    """Probe-frame origins and unit directions, each ``(n_scanlines, 3)``."""
    x = lateral_positions(probe)
    origins = np.stack([x, np.zeros_like(x), np.zeros_like(x)], axis=-1)
    if probe.geometry == "fan" and probe.fan_aperture > 0:
        # tan(theta) proportional to x puts every ray through one virtual apex
        half = probe.width / 2.0
        theta = np.arctan(x * math.tan(probe.fan_aperture / 2.0) / half)
    else:
        theta = np.zeros_like(x)
    dirs = np.stack([np.sin(theta), np.zeros_like(theta), np.cos(theta)], axis=-1)
    return origins, dirs


def frame_rays(probe: ProbeConfig, pose: Pose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World-space ``(origins, directions, depths)`` for every scan line of a frame."""
    o, d = local_rays(probe)
    dirs = pose.transform_dirs(d)
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    return pose.transform_points(o), dirs, probe.depths()


def ray_for_pixel(
    probe: ProbeConfig, pose: Pose, scanline_index: int, depth_count: int | None = None
) -> ScanRay:
    """The scan line feeding image column ``scanline_index``.

    Args:
        probe: probe geometry.
        pose: probe-to-world transform.
        scanline_index: column of the B-mode image.
        depth_count: number of samples; defaults to ``probe.n_samples``.
    """
    if not 0 <= scanline_index < probe.n_scanlines:
        raise ValidationError(
            f"scanline_index {scanline_index} out of range [0, {probe.n_scanlines})"
        )
    origins, dirs, _ = frame_rays(probe, pose)
    n = probe.n_samples if depth_count is None else int(depth_count)
    if n < 1:
        raise ValidationError("depth_count must be >= 1")
    return ScanRay(
        origins[scanline_index], dirs[scanline_index], probe.depths(n), probe.depth_extent / n
    )


def interpolate_poses(a: Pose, b: Pose, count: int) -> list[Pose]:
    """``count`` poses from ``a`` to ``b`` inclusive: linear translation, spherical rotation."""
    from scipy.spatial.transform import Rotation, Slerp

    if count < 1:
        raise ValidationError("count must be >= 1")
    ts = np.linspace(0.0, 1.0, count) if count > 1 else np.array([0.5])
    slerp = Slerp([0.0, 1.0], Rotation.from_matrix(np.stack([a.rotation, b.rotation])))
    rots = slerp(ts).as_matrix()
    return [Pose.from_rt(r, (1 - t) * a.translation + t * b.translation) for r, t in zip(rots, ts)]
