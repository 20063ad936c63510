import json
import math

import numpy as np
import pytest
import torch
from scipy import stats

from usfield.core import PARAM_NAMES, Pose, ProbeConfig, ValidationError
from usfield.core.types import patch_lattice
from usfield.phantom import (
    Inclusion,
    Interface,
    Layer,
    ParameterVolume,
    PhantomField,
    PhantomSpec,
    ScalarVolume,
    TriangleMesh,
    build_phantom,
    desk_phantom_spec,
    extract_patches,
    finetune_patches,
    reference_frame,
    simulate_sweep,
    sweep_trajectory,
)
from usfield.usrender import RenderConfig, render_frame

ALPHA, BETA, RHO_B, RHO_S, PHI = range(5)


def single_layer(alpha=0.5, **kw):
    return PhantomSpec(layers=(Layer((0.0, 2.0), alpha, 0.3, 0.4),), **kw)


def cube_mesh(lo, hi):
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    v = np.array([[x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
                  [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1]], dtype=float)
    f = np.array([[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7], [0, 1, 5], [0, 5, 4],
                  [1, 2, 6], [1, 6, 5], [2, 3, 7], [2, 7, 6], [3, 0, 4], [3, 4, 7]])
    return TriangleMesh(v, f)


# -- building ----------------------------------------------------------------------


def test_single_layer_fill():
    vol = build_phantom(single_layer(0.5))
    assert np.all(vol.channel("attenuation") == 0.5)
    assert np.all(vol.channel("reflectance") == 0) and np.all(vol.channel("border_probability") == 0)


def test_single_interface_paints_one_slab():
    spec = PhantomSpec(layers=(Layer((0.0, 2.0), 0.2, 0.3, 0.3),), interfaces=(Interface(1.0, 0.8, 0.6),))
    beta = build_phantom(spec).channel("reflectance")
    slabs = np.flatnonzero((beta == 0.8).all(axis=(0, 1)))
    assert slabs.tolist() == [spec.depth_index(1.0)]
    assert np.count_nonzero(beta) == spec.resolution ** 2


def test_layers_fill_top_down():
    spec = desk_phantom_spec()
    vol = build_phantom(spec)
    h = spec.voxel_size
    centres = (np.arange(spec.resolution) + 0.5) * h
    alpha_column = vol.channel("attenuation")[0, 0]  # far corner, away from the inclusion
    for ly in spec.layers:
        sel = (centres >= ly.depth[0]) & (centres < ly.depth[1])
        assert np.all(alpha_column[sel] == ly.attenuation)


def test_ellipsoid_voxel_count_matches_volume():
    radii = (0.5, 0.35, 0.25)
    spec = PhantomSpec(layers=(Layer((0.0, 2.0), 0.5, 0.3, 0.3),),
                       inclusions=(Inclusion((0.0, 0.1, 1.0), radii, {"attenuation": 0.05}),))
    vol = build_phantom(spec)
    count = np.count_nonzero(vol.channel("attenuation") == 0.05)
    analytic = 4 / 3 * math.pi * np.prod(radii) / spec.voxel_size ** 3
    assert abs(count - analytic) / analytic < 0.05


def test_build_is_deterministic_with_texture():
    spec = PhantomSpec(layers=(Layer((0.0, 2.0), 0.2, 0.5, 0.5),), texture=0.2, seed=4)
    a, b = build_phantom(spec), build_phantom(spec)
    assert np.array_equal(a.grids, b.grids)
    assert not np.array_equal(a.grids, build_phantom(PhantomSpec(spec.layers, texture=0.2, seed=5)).grids)


@pytest.mark.parametrize("bad", [
    dict(layers=(Layer((0.0, 2.5), 0.1, 0.1, 0.1),)),
    dict(layers=(Layer((0.5, 0.5), 0.1, 0.1, 0.1),)),
    dict(interfaces=(Interface(1.0, 0.5, 0.5), Interface(1.01, 0.5, 0.5))),
    dict(interfaces=(Interface(1.0, 1.5, 0.5),)),
    dict(inclusions=(Inclusion((0, 0, 1), (0.1, 0.1, 0.1), {"colour": 1.0}),)),
])
def test_invalid_specs_rejected(bad):
    with pytest.raises(ValidationError):
        PhantomSpec(**bad)


def test_spec_json_round_trip(tmp_path):
    spec = desk_phantom_spec(seed=3)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec.to_json()))
    assert PhantomSpec.from_file(path) == spec


def test_spec_json_unknown_key_named():
    with pytest.raises(ValidationError, match="thickness"):
        PhantomSpec.from_json({"layers": [{"depth": [0, 1], "attenuation": 0.1, "scattering_density": 0.1,
                                           "scattering_intensity": 0.1, "thickness": 2}]})


def test_volume_rejects_out_of_range():
    g = np.zeros((5, 4, 4, 4))
    g[1, 0, 0, 0] = 1.5
    with pytest.raises(ValidationError):
        ParameterVolume(g, np.zeros(3), 0.5)


# -- sampling ---------------------------------------------------------------------------


def test_sampling_exterior_is_zero_and_centres_exact():
    vol = build_phantom(desk_phantom_spec())
    h = vol.voxel_size
    assert np.all(vol.sample(np.array([[0.0, 0.0, -0.1], [1.2, 0.0, 0.5], [0.0, 0.0, 2.1]])) == 0)
    i, j, k = 5, 40, 20
    centre = vol.origin + (np.array([i, j, k]) + 0.5) * h
    np.testing.assert_array_equal(vol.sample(centre[None])[0], vol.grids[:, i, j, k])


def test_phantom_field_matches_numpy_sampler():
    vol = build_phantom(desk_phantom_spec())
    pts = np.random.default_rng(0).uniform([-1.1, -1.1, -0.1], [1.1, 1.1, 2.1], size=(5000, 3))
    out = PhantomField(vol)(torch.as_tensor(pts)).numpy()
    np.testing.assert_allclose(out, vol.sample(pts), rtol=0, atol=1e-12)


# -- patches ------------------------------------------------------------------------------


def test_full_fraction_patch_is_whole_cube():
    vol = build_phantom(desk_phantom_spec())
    (p,) = extract_patches(vol, 1, size_fraction=(1.0, 1.0), channel="attenuation")
    np.testing.assert_allclose(p.world_origin, vol.origin)
    assert p.edge_length == pytest.approx(vol.extent)
    np.testing.assert_array_equal(p.grid, vol.scalar("attenuation").sample(patch_lattice(vol.origin, vol.extent)))


def test_patches_anchor_on_skin_and_stay_inside():
    vol = build_phantom(desk_phantom_spec())
    for p in extract_patches(vol, 50, seed=1):
        assert p.grid.shape == (32, 32, 32)
        assert p.world_origin[2] == vol.skin_z
        assert np.all(p.world_origin[:2] >= vol.origin[:2] - 1e-12)
        assert np.all(p.world_origin[:2] + p.edge_length <= vol.origin[:2] + vol.extent + 1e-12)
        assert p.grid.min() >= 0 and p.grid.max() <= 1


def test_constant_volume_patch_is_constant():
    sv = ScalarVolume(np.full((16, 16, 16), 0.7), np.array([-1.0, -1.0, 0.0]), 0.125)
    for p in extract_patches(sv, 5, seed=2):
        np.testing.assert_allclose(p.grid, 0.7, rtol=0, atol=1e-15)


def test_patch_edge_lengths_uniform():
    sv = ScalarVolume(np.zeros((8, 8, 8)), np.array([-1.0, -1.0, 0.0]), 0.25)
    edges = [p.edge_length / sv.extent for p in extract_patches(sv, 1000, (0.1, 0.4), seed=3)]
    assert stats.kstest(edges, stats.uniform(loc=0.1, scale=0.3).cdf).pvalue > 0.01


def test_patch_argument_validation():
    sv = ScalarVolume(np.zeros((8, 8, 8)), np.zeros(3), 0.25)
    with pytest.raises(ValidationError):
        extract_patches(sv, 0)
    with pytest.raises(ValidationError):
        extract_patches(sv, 1, size_fraction=(0.0, 0.5))
    with pytest.raises(ValidationError):
        extract_patches(sv, 1, size_fraction=(0.5, 1.5))


def test_mesh_patches():
    mesh = cube_mesh((-1.0, -1.0, 0.2), (1.0, 1.0, 1.8))
    assert mesh.surface_depth(0.0, 0.0) == pytest.approx(0.2)
    assert mesh.occupancy(np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.9], [0.0, 0.0, 0.1]])).tolist() == [1, 0, 0]
    for p in extract_patches(mesh, 5, size_fraction=(0.2, 0.5), seed=0):
        assert p.world_origin[2] == pytest.approx(0.2)
        # a shallow cube inside the box is fully occupied
        assert p.grid.mean() > 0.9


def test_mesh_patch_too_large_fails():
    mesh = cube_mesh((0.0, 0.0, 0.0), (1.0, 0.2, 1.0))
    with pytest.raises(ValidationError):
        extract_patches(mesh, 1, size_fraction=(0.9, 1.0), max_tries=50)


def test_finetune_patches_are_deterministic():
    a = finetune_patches(8, seed=1, n_phantoms=2)
    b = finetune_patches(8, seed=1, n_phantoms=2)
    assert len(a) == 8
    assert all(np.array_equal(x.grid, y.grid) for x, y in zip(a, b))


# -- sweeps --------------------------------------------------------------------------------


def test_trajectory_stays_on_skin_and_in_box():
    poses = sweep_trajectory(20, seed=1)
    assert len(poses) == 20
    for p in poses:
        assert p.translation[2] == 0
        assert np.all(np.abs(p.translation) <= 1)
        np.testing.assert_allclose(p.rotation @ p.rotation.T, np.eye(3), atol=1e-12)


def test_empty_volume_renders_black():
    vol = ParameterVolume(np.zeros((5, 8, 8, 8)), np.array([-1.0, -1.0, 0.0]), 0.25)
    ds = simulate_sweep(vol, sweep_trajectory(3), ProbeConfig(n_scanlines=8, n_samples=16))
    assert all(np.all(f.image == 0) for f in ds.frames)


def test_simulation_is_deterministic():
    vol = build_phantom(desk_phantom_spec())
    probe = ProbeConfig(n_scanlines=16, n_samples=32)
    cfg = RenderConfig(boundary_mode="bernoulli_straight_through", scatter_mode="bernoulli_straight_through")
    a = simulate_sweep(vol, sweep_trajectory(4), probe, cfg, seed=2)
    b = simulate_sweep(vol, sweep_trajectory(4), probe, cfg, seed=2)
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a.frames, b.frames))


def test_empty_trajectory_rejected():
    with pytest.raises(ValidationError):
        simulate_sweep(build_phantom(single_layer()), [], ProbeConfig())


def test_interface_localisation():
    spec = PhantomSpec(layers=(Layer((0.0, 2.0), 0.05, 0.1, 0.2),), interfaces=(Interface(1.0, 0.6, 0.8),))
    probe = ProbeConfig()
    ds = simulate_sweep(build_phantom(spec), [Pose.identity()], probe)
    img = ds.frames[0].image
    k = spec.depth_index(1.0)
    expected = (k + 0.5) * spec.voxel_size / probe.dt - 1
    assert np.all(np.abs(img.argmax(axis=0) - expected) <= 1)


# -- oracle equivalence -------------------------------------------------------------------------


def _random_poses(n, seed):
    rng = np.random.default_rng(seed)
    from usfield.core.types import rotation_xyz

    return [Pose.from_rt(rotation_xyz(*rng.uniform(-0.15, 0.15, 3)),
                         [rng.uniform(-0.4, 0.4), rng.uniform(-0.8, 0.8), 0.0]) for _ in range(n)]


@pytest.mark.parametrize("cfg", [RenderConfig(), RenderConfig(psf_size=5, psf_sigma_axial=1.2, psf_sigma_lateral=0.8)],
                         ids=["plain", "psf"])
def test_rendering_the_phantom_reproduces_simulation(cfg):
    vol = build_phantom(desk_phantom_spec())
    probe = ProbeConfig()
    poses = _random_poses(10, seed=0)
    ds = simulate_sweep(vol, poses, probe, cfg)
    field = PhantomField(vol)
    for pose, frame in zip(poses, ds.frames):
        with torch.no_grad():
            img = render_frame(field, pose, probe, cfg).numpy()
        assert np.abs(img - frame.image).max() < 1e-6


def test_reference_frame_uses_all_parameters():
    vol = build_phantom(desk_phantom_spec())
    img = reference_frame(vol, Pose.identity(), ProbeConfig(n_scanlines=8, n_samples=64))
    assert img.shape == (64, 8)
    assert img.max() > 0 and img.min() >= 0 and img.max() <= 1
    assert set(PARAM_NAMES) == {"attenuation", "reflectance", "border_probability",
                                "scattering_density", "scattering_intensity"}
