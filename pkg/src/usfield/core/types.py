"""Domain types: points, acoustic parameter samples, probe geometry, frames and patches.

All containers are frozen dataclasses; array fields are copied and marked
read-only on construction so instances can be shared between threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError

#: Column order of the five acoustic parameters everywhere in the package.
PARAM_NAMES = (
    "attenuation",
    "reflectance",
    "border_probability",
    "scattering_density",
    "scattering_intensity",
)
ATTENUATION, REFLECTANCE, BORDER, SCATTER_DENSITY, SCATTER_INTENSITY = range(5)

PATCH_SIZE = 32

_GEOMETRIES = ("linear", "fan")


def _frozen(arr, dtype=np.float64) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def as_point(q) -> np.ndarray:
    """Coerce ``q`` to a finite float64 3-vector."""
    p = np.asarray(q, dtype=np.float64).reshape(-1)
    if p.shape != (3,):
        raise ValidationError(f"a point needs 3 coordinates, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValidationError(f"point has non-finite coordinates: {p}")
    return p


@dataclass(frozen=True)
class ParameterSample:
    """Acoustic parameters at one point."""

    attenuation: float
    reflectance: float
    border_probability: float
    scattering_density: float
    scattering_intensity: float

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValidationError(f"non-finite parameter sample {vals}")
        if vals[0] < 0:
            raise ValidationError("attenuation must be non-negative")
        if np.any(vals[1:] < 0) or np.any(vals[1:] > 1):
            raise ValidationError("bounded parameters must lie in [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                self.attenuation,
                self.reflectance,
                self.border_probability,
                self.scattering_density,
                self.scattering_intensity,
            ],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, values) -> "ParameterSample":
        v = np.asarray(values, dtype=np.float64).reshape(5)
        return cls(*(float(x) for x in v))


def check_parameter_array(values: np.ndarray, atol: float = 0.0) -> None:
    """Raise if an ``(..., 5)`` array breaks the parameter range invariants."""
    v = np.asarray(values)
    if v.shape[-1] != 5:
        raise ValidationError(f"parameter arrays end in 5 channels, got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValidationError("non-finite parameter values")
    if np.any(v[..., 0] < -atol):
        raise ValidationError("negative attenuation")
    if np.any(v[..., 1:] < -atol) or np.any(v[..., 1:] > 1 + atol):
        raise ValidationError("bounded parameter outside [0, 1]")


@dataclass(frozen=True)
class ProbeConfig:
    """Transducer geometry and acquisition constants.

    ``width`` is the lateral extent of the probe face in scene units; rays
    are spaced evenly across it. For ``geometry="fan"`` the rays also tilt
    outward so that all of them meet at a virtual apex behind the face.
    """

    n_scanlines: int = 64
    n_samples: int = 128
    depth_extent: float = 2.0
    frequency: float = 1.0
    geometry: str = "linear"
    fan_aperture: float = 0.0
    initial_intensity: float = 1.0
    width: float = 1.0

    def __post_init__(self):
        if int(self.n_scanlines) < 1 or int(self.n_samples) < 1:
            raise ValidationError("n_scanlines and n_samples must be >= 1")
        if not self.depth_extent > 0:
            raise ValidationError("depth_extent must be positive")
        if not self.frequency > 0:
            raise ValidationError("frequency must be positive")
        if not self.initial_intensity > 0:
            raise ValidationError("initial_intensity must be positive")
        if not self.width > 0:
            raise ValidationError("width must be positive")
        if self.geometry not in _GEOMETRIES:
            raise ValidationError(f"geometry must be one of {_GEOMETRIES}, got {self.geometry!r}")
        if not (0.0 <= self.fan_aperture < math.pi):
            raise ValidationError("fan_aperture must lie in [0, pi)")

    @property
    def dt(self) -> float:
        return self.depth_extent / self.n_samples

    def depths(self, count: int | None = None) -> np.ndarray:
        """Sample distances ``dt, 2 dt, ..., depth_extent`` (uniform in ``(0, depth_extent]``)."""
        n = self.n_samples if count is None else int(count)
        dt = self.depth_extent / n
        return dt * np.arange(1, n + 1, dtype=np.float64)

    def to_json(self) -> dict:
        return {
            "n_scanlines": int(self.n_scanlines),
            "n_samples": int(self.n_samples),
            "depth_extent": float(self.depth_extent),
            "frequency": float(self.frequency),
            "geometry": self.geometry,
            "fan_aperture": float(self.fan_aperture),
            "initial_intensity": float(self.initial_intensity),
            "width": float(self.width),
        }

    @classmethod
    def from_json(cls, data: dict) -> "ProbeConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown probe keys: {sorted(unknown)}")
        kw = dict(data)
        for k in ("n_scanlines", "n_samples"):
            if k in kw:
                kw[k] = int(kw[k])
        return cls(**kw)


@dataclass(frozen=True)
class Pose:
    """Rigid probe-to-world transform stored as a row-major 4x4 matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape == (16,):
            m = m.reshape(4, 4)
        if m.shape != (4, 4):
            raise ValidationError(f"pose matrix must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValidationError("pose matrix has non-finite entries")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValidationError("pose last row must be (0, 0, 0, 1)")
        r = m[:3, :3]
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-5:
            raise ValidationError("pose rotation block is not orthonormal")
        object.__setattr__(self, "matrix", _frozen(m))

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, rotation, translation) -> "Pose":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.rotation.T + self.translation

    def transform_dirs(self, dirs: np.ndarray) -> np.ndarray:
        return np.asarray(dirs) @ self.rotation.T


def rotation_xyz(rx: float = 0.0, ry: float = 0.0, rz: float = 0.0) -> np.ndarray:
    """Rotation matrix ``Rz @ Ry @ Rx`` from angles in radians."""
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    rxm = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    rym = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rzm = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rzm @ rym @ rxm


@dataclass(frozen=True)
class ScanRay:
    origin: np.ndarray
    direction: np.ndarray
    depths: np.ndarray
    dt: float

    def __post_init__(self):
        o = as_point(self.origin)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValidationError("ray direction must be unit length")
        t = np.asarray(self.depths, dtype=np.float64).reshape(-1)
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValidationError("ray depths must be strictly increasing")
        if not self.dt > 0:
            raise ValidationError("dt must be positive")
        object.__setattr__(self, "origin", _frozen(o))
        object.__setattr__(self, "direction", _frozen(d))
        object.__setattr__(self, "depths", _frozen(t))

    def points(self) -> np.ndarray:
        """Sample positions ``o + t d`` as an ``(S, 3)`` array."""
        return self.origin[None, :] + self.depths[:, None] * self.direction[None, :]


@dataclass(frozen=True)
class ProbeFrame:
    image: np.ndarray
    pose: Pose
    frame_index: int

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 2:
            raise ValidationError(f"frame image must be 2-D, got shape {img.shape}")
        if np.any(img < 0) or np.any(img > 1) or not np.all(np.isfinite(img)):
            raise ValidationError("frame pixels must lie in [0, 1]")
        object.__setattr__(self, "image", _frozen(img))


def every_eighth_split(n: int, stride: int = 8) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Return ``(train, test)`` index tuples; test holds every ``stride``-th index from 0."""
    if n < 0:
        raise ValidationError("frame count must be non-negative")
    test = tuple(range(0, n, stride))
    held = set(test)
    train = tuple(i for i in range(n) if i not in held)
    return train, test


@dataclass(frozen=True)
class SweepDataset:
    frames: tuple[ProbeFrame, ...]
    probe: ProbeConfig
    train_indices: tuple[int, ...] = field(default=())
    test_indices: tuple[int, ...] = field(default=())

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        for pos, fr in enumerate(frames):
            if fr.image.shape != (self.probe.n_samples, self.probe.n_scanlines):
                raise ValidationError(
                    f"frame {fr.frame_index} has shape {fr.image.shape}, probe expects "
                    f"({self.probe.n_samples}, {self.probe.n_scanlines})"
                )
        if not self.train_indices and not self.test_indices:
            train, test = every_eighth_split(len(frames))
            object.__setattr__(self, "train_indices", train)
            object.__setattr__(self, "test_indices", test)
        tr, te = set(self.train_indices), set(self.test_indices)
        if tr & te or (tr | te) != set(range(len(frames))):
            raise ValidationError("train/test split must be disjoint and cover every frame")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def poses(self) -> list[Pose]:
        return [f.pose for f in self.frames]

    def images(self, indices: Sequence[int] | None = None) -> np.ndarray:
        idx = range(len(self.frames)) if indices is None else indices
        return np.stack([self.frames[i].image for i in idx])

    def subset(self, keep: Sequence[int]) -> "SweepDataset":
        """New dataset made of the frames at positions ``keep``, re-indexed and re-split."""
        frames = tuple(
            ProbeFrame(self.frames[i].image, self.frames[i].pose, n) for n, i in enumerate(keep)
        )
        return SweepDataset(frames, self.probe)


@dataclass(frozen=True)
class VoxelPatch:
    """A ``32^3`` grid of values in [0, 1] anchored in world space.

    ``grid[i, j, k]`` covers the cell at ``world_origin + (i, j, k) * edge_length / 32``.
    """

    grid: np.ndarray
    world_origin: np.ndarray
    edge_length: float

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        if g.shape != (PATCH_SIZE,) * 3:
            raise ValidationError(f"voxel patch must be 32^3, got {g.shape}")
        if not np.all(np.isfinite(g)) or g.min() < 0 or g.max() > 1:
            raise ValidationError("voxel patch values must lie in [0, 1]")
        if not self.edge_length > 0:
            raise ValidationError("edge_length must be positive")
        object.__setattr__(self, "grid", _frozen(g))
        object.__setattr__(self, "world_origin", _frozen(as_point(self.world_origin)))

    def lattice(self) -> np.ndarray:
        """World-space cell centres, shape ``(32, 32, 32, 3)``."""
        return patch_lattice(self.world_origin, self.edge_length)


def patch_lattice(origin, edge_length: float, size: int = PATCH_SIZE) -> np.ndarray:
    c = (np.arange(size, dtype=np.float64) + 0.5) * (edge_length / size)
    gx, gy, gz = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1) + np.asarray(origin, dtype=np.float64)
