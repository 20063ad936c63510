"""Synthetic ground truth: layered parameter volumes, skin-anchored patches and sweeps.

World convention: a phantom of edge ``extent`` spans ``x, y in [-extent/2, extent/2]``
and ``z in [0, extent]``; the skin is the ``z = 0`` face and depth grows with ``z``.

The sweep simulator renders with its own NumPy implementation of the
ultrasound model so it can serve as an independent oracle for
:mod:`usfield.usrender`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .core.errors import ValidationError
from .core.rays import frame_rays
from .core.types import (
    PARAM_NAMES,
    PATCH_SIZE,
    Pose,
    ProbeConfig,
    ProbeFrame,
    SweepDataset,
    VoxelPatch,
    patch_lattice,
    rotation_xyz,
)
from .usrender import RenderConfig, psf_kernel

_PARAM_INDEX = {n: i for i, n in enumerate(PARAM_NAMES)}


# ----------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class Layer:
    depth: tuple[float, float]
    attenuation: float
    scattering_density: float
    scattering_intensity: float


@dataclass(frozen=True)
class Interface:
    depth: float
    reflectance: float
    border_probability: float


@dataclass(frozen=True)
class Inclusion:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    overrides: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PhantomSpec:
    layers: tuple[Layer, ...] = ()
    interfaces: tuple[Interface, ...] = ()
    inclusions: tuple[Inclusion, ...] = ()
    resolution: int = 64
    extent: float = 2.0
    texture: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "interfaces", tuple(self.interfaces))
        object.__setattr__(self, "inclusions", tuple(self.inclusions))
        if self.resolution < 2 or not self.extent > 0:
            raise ValidationError("resolution must be >= 2 and extent positive")
        if self.texture < 0:
            raise ValidationError("texture must be non-negative")
        for ly in self.layers:
            z0, z1 = ly.depth
            if not (0 <= z0 < z1 <= self.extent):
                raise ValidationError(f"layer depth range {ly.depth} outside [0, {self.extent}]")
            if ly.attenuation < 0:
                raise ValidationError("layer attenuation must be non-negative")
            for v in (ly.scattering_density, ly.scattering_intensity):
                if not 0 <= v <= 1:
                    raise ValidationError("layer scattering values must lie in [0, 1]")
        slabs = []
        for itf in self.interfaces:
            if not 0 <= itf.depth <= self.extent:
                raise ValidationError(f"interface depth {itf.depth} outside the volume")
            for v in (itf.reflectance, itf.border_probability):
                if not 0 <= v <= 1:
                    raise ValidationError("interface reflectance/border values must lie in [0, 1]")
            slabs.append(self.depth_index(itf.depth))
        if len(set(slabs)) != len(slabs):
            raise ValidationError("interfaces overlap (two share one voxel slab)")
        for inc in self.inclusions:
            if len(inc.center) != 3 or len(inc.radii) != 3 or min(inc.radii) <= 0:
                raise ValidationError("inclusions need a 3-D centre and positive radii")
            bad = set(inc.overrides) - set(PARAM_NAMES)
            if bad:
                raise ValidationError(f"unknown inclusion override keys: {sorted(bad)}")

    @property
    def voxel_size(self) -> float:
        return self.extent / self.resolution

    def depth_index(self, depth: float) -> int:
        return min(int(depth / self.voxel_size), self.resolution - 1)

    # -- JSON ------------------------------------------------------------
    def to_json(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(x) for x in self.layers]
        d["interfaces"] = [asdict(x) for x in self.interfaces]
        d["inclusions"] = [asdict(x) for x in self.inclusions]
        return d

    @classmethod
    def from_json(cls, data: dict) -> "PhantomSpec":
        allowed = {"layers", "interfaces", "inclusions", "resolution", "extent", "texture", "seed"}
        _check_keys(data, allowed, "phantom spec")
        try:
            layers = []
            for i, ly in enumerate(data.get("layers", [])):
                _check_keys(ly, set(Layer.__dataclass_fields__), f"layers[{i}]")
                layers.append(Layer(tuple(ly["depth"]), float(ly["attenuation"]),
                                    float(ly["scattering_density"]), float(ly["scattering_intensity"])))
            interfaces = []
            for i, it in enumerate(data.get("interfaces", [])):
                _check_keys(it, set(Interface.__dataclass_fields__), f"interfaces[{i}]")
                interfaces.append(Interface(float(it["depth"]), float(it["reflectance"]),
                                            float(it["border_probability"])))
            inclusions = []
            for i, inc in enumerate(data.get("inclusions", [])):
                _check_keys(inc, set(Inclusion.__dataclass_fields__), f"inclusions[{i}]")
                inclusions.append(Inclusion(tuple(inc["center"]), tuple(inc["radii"]),
                                            dict(inc.get("overrides", {}))))
        except KeyError as exc:
            raise ValidationError(f"phantom spec is missing key {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"phantom spec has a malformed value: {exc}") from None
        return cls(tuple(layers), tuple(interfaces), tuple(inclusions),
                   int(data.get("resolution", 64)), float(data.get("extent", 2.0)),
                   float(data.get("texture", 0.0)), int(data.get("seed", 0)))

    @classmethod
    def from_file(cls, path) -> "PhantomSpec":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"phantom spec is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ValidationError("phantom spec must be a JSON object")
        return cls.from_json(data)


def _check_keys(d: dict, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise ValidationError(f"{where} must be a JSON object")
    unknown = set(d) - allowed
    if unknown:
        raise ValidationError(f"unknown key {sorted(unknown)[0]!r} in {where}")


def desk_phantom_spec(seed: int = 0) -> PhantomSpec:
    """Four tissue layers, three interfaces and a fluid pocket; the reference fixture."""
    return PhantomSpec(
        layers=(
            Layer((0.0, 0.25), 0.15, 0.5, 0.5),
            Layer((0.25, 0.8), 0.1, 0.5, 0.5),
            Layer((0.8, 1.5), 0.15, 0.7, 0.6),
            Layer((1.5, 2.0), 0.2, 0.7, 0.7),
        ),
        interfaces=(
            Interface(0.25, 0.3, 0.15),
            Interface(0.8, 0.3, 0.15),
            Interface(1.5, 0.3, 0.15),
        ),
        inclusions=(
            Inclusion((0.1, 0.0, 1.1), (0.35, 0.5, 0.2),
                      {"attenuation": 0.02, "scattering_density": 0.02, "scattering_intensity": 0.1}),
        ),
        seed=seed,
    )


def random_phantom_spec(rng: np.random.Generator, resolution: int = 64, extent: float = 2.0) -> PhantomSpec:
    """A randomly layered phantom of the same family as :func:`desk_phantom_spec`."""
    n = int(rng.integers(2, 6))
    cuts = np.sort(rng.uniform(0.1, 0.9, size=n - 1)) * extent
    h = extent / resolution
    # keep interfaces on distinct voxel slabs
    cuts = np.unique(np.floor(cuts / h)) * h
    bounds = np.concatenate([[0.0], cuts, [extent]])
    layers = tuple(
        Layer((float(z0), float(z1)), float(rng.uniform(0.1, 0.6)), float(rng.uniform(0.1, 0.9)),
              float(rng.uniform(0.2, 0.9)))
        for z0, z1 in zip(bounds[:-1], bounds[1:])
    )
    interfaces = tuple(
        Interface(float(c), float(rng.uniform(0.2, 0.5)), float(rng.uniform(0.3, 0.8))) for c in cuts
    )
    inclusions = []
    for _ in range(int(rng.integers(0, 3))):
        radii = rng.uniform(0.1, 0.5, size=3) * extent / 2
        center = (float(rng.uniform(-0.6, 0.6)), float(rng.uniform(-0.6, 0.6)),
                  float(rng.uniform(0.3, 0.8) * extent))
        inclusions.append(Inclusion(center, tuple(float(r) for r in radii),
                                    {"attenuation": float(rng.uniform(0.0, 0.1)),
                                     "scattering_density": float(rng.uniform(0.0, 0.1)),
                                     "scattering_intensity": float(rng.uniform(0.0, 0.3))}))
    return PhantomSpec(layers, interfaces, tuple(inclusions), resolution, extent)


# ----------------------------------------------------------------------
# volumes


@dataclass(frozen=True)
class ScalarVolume:
    """A cubic scalar grid; ``grid[i, j, k]`` is the cell centred at ``origin + (i, j, k, ) h + h / 2``."""

    grid: np.ndarray
    origin: np.ndarray
    voxel_size: float

    @property
    def resolution(self) -> int:
        return self.grid.shape[0]

    @property
    def extent(self) -> float:
        return self.resolution * self.voxel_size

    @property
    def skin_z(self) -> float:
        return float(self.origin[2])

    def sample(self, points: np.ndarray) -> np.ndarray:
        return trilinear(self.grid[None], self.origin, self.voxel_size, points)[..., 0]


@dataclass(frozen=True)
class ParameterVolume:
    """Five co-registered ``R^3`` grids in :data:`PARAM_NAMES` order, ``(5, R, R, R)``."""

    grids: np.ndarray
    origin: np.ndarray
    voxel_size: float

    def __post_init__(self):
        g = np.asarray(self.grids, dtype=np.float64)
        if g.ndim != 4 or g.shape[0] != 5 or len(set(g.shape[1:])) != 1:
            raise ValidationError(f"parameter volume must be (5, R, R, R), got {g.shape}")
        if not np.all(np.isfinite(g)) or g[0].min() < 0 or g[1:].min() < 0 or g[1:].max() > 1:
            raise ValidationError("parameter volume violates the parameter ranges")
        g.setflags(write=False)
        object.__setattr__(self, "grids", g)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))

    @property
    def resolution(self) -> int:
        return self.grids.shape[1]

    @property
    def extent(self) -> float:
        return self.resolution * self.voxel_size

    @property
    def skin_z(self) -> float:
        return float(self.origin[2])

    def channel(self, name: str) -> np.ndarray:
        return self.grids[_PARAM_INDEX[name]]

    def scalar(self, name: str) -> ScalarVolume:
        return ScalarVolume(self.channel(name), self.origin, self.voxel_size)

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Trilinear lookup at ``(..., 3)`` world points; zeros outside the volume."""
        return trilinear(self.grids, self.origin, self.voxel_size, points)


def trilinear(grids: np.ndarray, origin, voxel_size: float, points) -> np.ndarray:
    """Reference trilinear interpolation of ``(C, R, R, R)`` cell-centred grids.

    Points within half a cell of the boundary read the edge value; points
    outside the volume read zero (transparent exterior).
    """
    pts = np.asarray(points, dtype=np.float64)
    flat = pts.reshape(-1, 3)
    r = grids.shape[1]
    u = (flat - np.asarray(origin)) / voxel_size - 0.5
    inside = np.all((u >= -0.5) & (u <= r - 0.5), axis=1)
    u = np.clip(u, 0.0, r - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), r - 2)
    f = u - i0
    i1 = i0 + 1
    x0, y0, z0 = i0.T
    x1, y1, z1 = i1.T
    fx, fy, fz = f.T

    def at(ix, iy, iz):
        return grids[:, ix, iy, iz]

    c00 = at(x0, y0, z0) + fx * (at(x1, y0, z0) - at(x0, y0, z0))
    c10 = at(x0, y1, z0) + fx * (at(x1, y1, z0) - at(x0, y1, z0))
    c01 = at(x0, y0, z1) + fx * (at(x1, y0, z1) - at(x0, y0, z1))
    c11 = at(x0, y1, z1) + fx * (at(x1, y1, z1) - at(x0, y1, z1))
    c0 = c00 + fy * (c10 - c00)
    c1 = c01 + fy * (c11 - c01)
    out = (c0 + fz * (c1 - c0)).T
    out[~inside] = 0.0
    return out.reshape(*pts.shape[:-1], grids.shape[0])


def build_phantom(spec: PhantomSpec) -> ParameterVolume:
    """Rasterise ``spec``: layers top-down, 1-voxel interface sheets, then inclusions."""
    r, h = spec.resolution, spec.voxel_size
    grids = np.zeros((5, r, r, r))
    centers = (np.arange(r) + 0.5) * h
    for ly in spec.layers:
        sel = (centers >= ly.depth[0]) & (centers < ly.depth[1])
        if ly.depth[1] >= spec.extent:
            sel |= centers >= ly.depth[0]
        grids[_PARAM_INDEX["attenuation"], :, :, sel] = ly.attenuation
        grids[_PARAM_INDEX["scattering_density"], :, :, sel] = ly.scattering_density
        grids[_PARAM_INDEX["scattering_intensity"], :, :, sel] = ly.scattering_intensity
    for itf in spec.interfaces:
        k = spec.depth_index(itf.depth)
        grids[_PARAM_INDEX["reflectance"], :, :, k] = itf.reflectance
        grids[_PARAM_INDEX["border_probability"], :, :, k] = itf.border_probability
    origin = np.array([-spec.extent / 2, -spec.extent / 2, 0.0])
    if spec.inclusions:
        c = origin[0] + centers
        gx, gy = np.meshgrid(c, c, indexing="ij")
        gx, gy = gx[..., None], gy[..., None]
        gz = centers[None, None, :]
        for inc in spec.inclusions:
            (cx, cy, cz), (ax, ay, az) = inc.center, inc.radii
            mask = ((gx - cx) / ax) ** 2 + ((gy - cy) / ay) ** 2 + ((gz - cz) / az) ** 2 <= 1.0
            for name, value in inc.overrides.items():
                grids[_PARAM_INDEX[name]][mask] = value
    if spec.texture > 0:
        rng = np.random.default_rng(spec.seed)
        phi = grids[_PARAM_INDEX["scattering_intensity"]]
        jitter = 1.0 + spec.texture * rng.standard_normal(phi.shape)
        grids[_PARAM_INDEX["scattering_intensity"]] = np.clip(phi * jitter, 0.0, 1.0)
    return ParameterVolume(grids, origin, h)


class PhantomField:
    """Callable exposing a :class:`ParameterVolume` through the field interface.

    Maps ``(N, 3)`` torch points to ``(N, 5)`` parameters by trilinear lookup
    (``grid_sample``) with the same edge and exterior rules as :func:`trilinear`.
    """

    dtype = torch.float64

    def __init__(self, volume: ParameterVolume):
        self.volume = volume
        # (5, R, R, R) indexed [c, x, y, z] -> (1, 5, D=z, H=y, W=x)
        self._grid = torch.tensor(volume.grids).permute(0, 3, 2, 1)[None].contiguous()
        self._origin = torch.as_tensor(volume.origin)
        self._extent = volume.extent

    def __call__(self, points: torch.Tensor) -> torch.Tensor:
        p = torch.as_tensor(points, dtype=torch.float64)
        rel = (p - self._origin) / self._extent
        inside = ((rel >= 0) & (rel <= 1)).all(dim=-1)
        g = (2 * rel - 1).reshape(1, -1, 1, 1, 3)
        out = F.grid_sample(self._grid, g, mode="bilinear", padding_mode="border", align_corners=False)
        out = out.reshape(5, -1).T
        return out * inside[:, None].to(out.dtype)


# ----------------------------------------------------------------------
# meshes


@dataclass(frozen=True)
class TriangleMesh:
    """Closed triangle mesh; occupancy by ray-parity along ``+z``."""

    vertices: np.ndarray
    faces: np.ndarray

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        v = np.asarray(self.vertices, dtype=np.float64)
        return v.min(axis=0), v.max(axis=0)

    def _hits(self, xy: np.ndarray) -> list[np.ndarray]:
        v = np.asarray(self.vertices, dtype=np.float64)
        tri = v[np.asarray(self.faces)]
        a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
        out = []
        for px, py in xy:
            d0 = (b[:, 0] - a[:, 0]) * (py - a[:, 1]) - (b[:, 1] - a[:, 1]) * (px - a[:, 0])
            d1 = (c[:, 0] - b[:, 0]) * (py - b[:, 1]) - (c[:, 1] - b[:, 1]) * (px - b[:, 0])
            d2 = (a[:, 0] - c[:, 0]) * (py - c[:, 1]) - (a[:, 1] - c[:, 1]) * (px - c[:, 0])
            hit = ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))
            area = d0 + d1 + d2
            ok = hit & (np.abs(area) > 1e-15)
            w_a, w_b, w_c = d1[ok] / area[ok], d2[ok] / area[ok], d0[ok] / area[ok]
            z = w_a * a[ok, 2] + w_b * b[ok, 2] + w_c * c[ok, 2]
            out.append(np.unique(np.round(z, 12)))
        return out

    def surface_depth(self, x: float, y: float) -> float | None:
        """Smallest ``z`` where the vertical line at ``(x, y)`` meets the mesh."""
        z = self._hits(np.array([[x, y]]))[0]
        return float(z.min()) if z.size else None

    def occupancy(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        keys, inverse = np.unique(np.round(pts[:, :2], 12), axis=0, return_inverse=True)
        hits = self._hits(keys)
        occ = np.empty(len(pts))
        for n, (k, z) in enumerate(zip(inverse.reshape(-1), pts[:, 2])):
            occ[n] = float(np.count_nonzero(hits[k] < z) % 2)
        return occ.reshape(np.asarray(points).shape[:-1])


# ----------------------------------------------------------------------
# patches


def extract_patches(source, count: int, size_fraction: Sequence[float] = (0.1, 0.4), seed: int = 0,
                    channel: str = "border_probability", max_tries: int = 1000) -> list[VoxelPatch]:
    """Cubes with their top face on the skin, voxelised to ``32^3``.

    Args:
        source: a :class:`ParameterVolume` (read through ``channel``), a
            :class:`ScalarVolume`, or a :class:`TriangleMesh`.
        count: number of patches.
        size_fraction: ``(lo, hi)`` range of edge length as a fraction of the
            source's bounding extent; edges are drawn uniformly in it.
        seed: RNG seed.
        channel: parameter read from a :class:`ParameterVolume`.
        max_tries: placement attempts per patch for mesh sources.
    """
    if count < 1:
        raise ValidationError("count must be >= 1")
    lo, hi = (float(size_fraction[0]), float(size_fraction[-1]))
    if not 0 < lo <= hi <= 1:
        raise ValidationError("size_fraction must lie within (0, 1]")
    if isinstance(source, ParameterVolume):
        source = source.scalar(channel)
    rng = np.random.default_rng(seed)
    patches = []
    if isinstance(source, ScalarVolume):
        ext = source.extent
        for _ in range(count):
            edge = rng.uniform(lo, hi) * ext
            corner = source.origin[:2] + rng.uniform(0.0, 1.0, size=2) * (ext - edge)
            origin = np.array([corner[0], corner[1], source.skin_z])
            vals = source.sample(patch_lattice(origin, edge))
            patches.append(VoxelPatch(np.clip(vals, 0.0, 1.0), origin, edge))
        return patches
    if isinstance(source, TriangleMesh):
        bmin, bmax = source.bounds
        ext = float(np.max(bmax - bmin))
        for _ in range(count):
            edge = rng.uniform(lo, hi) * ext
            for _try in range(max_tries):
                cx, cy = rng.uniform(bmin[:2], bmax[:2])
                if cx - edge / 2 < bmin[0] or cx + edge / 2 > bmax[0] or \
                        cy - edge / 2 < bmin[1] or cy + edge / 2 > bmax[1]:
                    continue
                top = source.surface_depth(cx, cy)
                if top is None:
                    continue
                origin = np.array([cx - edge / 2, cy - edge / 2, top])
                vals = source.occupancy(patch_lattice(origin, edge))
                patches.append(VoxelPatch(np.clip(vals, 0.0, 1.0), origin, edge))
                break
            else:
                raise ValidationError(f"could not place a patch of edge {edge:.3f} in {max_tries} tries")
        return patches
    raise ValidationError(f"cannot extract patches from {type(source).__name__}")


# ----------------------------------------------------------------------
# sweeps


def sweep_trajectory(n_frames: int, length: float = 1.6, rock_deg: float = 8.0, tilt_deg: float = 4.0,
                     lateral: float = 0.1, seed: int = 0) -> list[Pose]:
    """Free-hand style sweep along ``y`` with the face on the skin.

    The probe rocks in-plane (about ``y``) and tilts out of plane (about ``x``)
    sinusoidally, with a small lateral drift; positions stay inside [-1, 1]^3.
    """
    if n_frames < 1:
        raise ValidationError("n_frames must be >= 1")
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * math.pi, size=3)
    poses = []
    for i in range(n_frames):
        s = 0.0 if n_frames == 1 else i / (n_frames - 1)
        y = -length / 2 + length * s
        rock = math.radians(rock_deg) * math.sin(2 * math.pi * 1.5 * s + phase[0])
        tilt = math.radians(tilt_deg) * math.sin(2 * math.pi * 1.0 * s + phase[1])
        x = lateral * math.sin(2 * math.pi * 0.75 * s + phase[2])
        poses.append(Pose.from_rt(rotation_xyz(tilt, rock, 0.0), [x, y, 0.0]))
    return poses


def reference_transmit(params: np.ndarray, probe: ProbeConfig, g: np.ndarray) -> np.ndarray:
    """``I[t]`` for ``(..., S, 5)`` parameters and boundary mask ``g``, by explicit accumulation."""
    alpha, beta = params[..., 0], params[..., 1]
    s = params.shape[-2]
    intensity = np.empty(params.shape[:-1])
    gain = np.ones(params.shape[:-2])
    absorbed = np.zeros(params.shape[:-2])
    for t in range(s):
        intensity[..., t] = probe.initial_intensity * gain * np.exp(-probe.frequency * probe.dt * absorbed)
        gain = gain * (1.0 - beta[..., t]) * g[..., t]
        absorbed = absorbed + alpha[..., t]
    return intensity


def reference_frame(volume: ParameterVolume, pose: Pose, probe: ProbeConfig,
                    cfg: RenderConfig | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Oracle B-mode frame ``(n_samples, n_scanlines)`` computed in NumPy."""
    cfg = cfg or RenderConfig()
    origins, dirs, depths = frame_rays(probe, pose)
    pts = origins[:, None, :] + depths[None, :, None] * dirs[:, None, :]
    params = volume.sample(pts)  # (W, S, 5)
    rho_b, rho_s = params[..., 2], params[..., 3]
    g = 1.0 - rho_b
    if cfg.boundary_mode != "expected":
        g = (rng.random(g.shape) < g).astype(np.float64)
    intensity = reference_transmit(params, probe, g)
    if cfg.scatter_mode != "expected":
        rho_s = (rng.random(rho_s.shape) < rho_s).astype(np.float64)
    reflect = cfg.w_reflect * intensity * params[..., 1] * rho_b
    scatter = cfg.w_scatter * intensity * rho_s * params[..., 4]
    reflect, scatter = reflect.T, scatter.T  # to (S, W)
    if cfg.psf_enabled:
        k = psf_kernel(cfg.psf_size, cfg.psf_sigma_axial, cfg.psf_sigma_lateral)
        scatter = ndimage.convolve(scatter, k, mode="constant", cval=0.0)
    return np.clip(reflect + scatter, 0.0, 1.0)


def simulate_sweep(volume: ParameterVolume, trajectory: Sequence[Pose], probe: ProbeConfig,
                   cfg: RenderConfig | None = None, seed: int = 0) -> SweepDataset:
    """Render a sweep of the known volume; frames are float images in [0, 1]."""
    if len(trajectory) == 0:
        raise ValidationError("trajectory must contain at least one pose")
    frames = []
    for i, pose in enumerate(trajectory):
        rng = np.random.default_rng([seed, i])
        img = reference_frame(volume, pose, probe, cfg, rng)
        frames.append(ProbeFrame(img, pose, i))
    return SweepDataset(tuple(frames), probe)


def finetune_patches(count: int, seed: int = 0, n_phantoms: int = 8,
                     channels: Sequence[str] = ("border_probability", "scattering_density"),
                     size_fraction: Sequence[float] = (0.1, 0.4)) -> list[VoxelPatch]:
    """Skin-anchored patches of the guided channels from randomly drawn phantoms.

    The draws use ``seed`` only, so the set is independent of any evaluation
    phantom built from :func:`desk_phantom_spec`.
    """
    rng = np.random.default_rng([seed, 17])
    volumes = [build_phantom(random_phantom_spec(rng)) for _ in range(n_phantoms)]
    out: list[VoxelPatch] = []
    per = int(math.ceil(count / (n_phantoms * len(channels))))
    for v_i, vol in enumerate(volumes):
        for c_i, ch in enumerate(channels):
            out.extend(extract_patches(vol, per, size_fraction, seed=int(rng.integers(2**31)), channel=ch))
    order = rng.permutation(len(out))[:count]
    return [out[i] for i in order]


def desk_fixture(n_frames: int = 20, probe: ProbeConfig | None = None, seed: int = 0,
                 cfg: RenderConfig | None = None) -> tuple[ParameterVolume, SweepDataset]:
    """The reference reconstruction fixture: desk phantom, sweep and simulated frames."""
    vol = build_phantom(desk_phantom_spec(seed))
    ds = simulate_sweep(vol, sweep_trajectory(n_frames, seed=seed), probe or ProbeConfig(), cfg, seed=seed)
    return vol, ds
