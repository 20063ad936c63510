import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from usfield.core import (
    CheckpointError,
    ConfigError,
    LoadError,
    ParameterSample,
    Pose,
    ProbeConfig,
    ProbeFrame,
    RunConfig,
    SweepDataset,
    ValidationError,
    VoxelPatch,
    every_eighth_split,
    frame_rays,
    load_checkpoint,
    load_dataset,
    ray_for_pixel,
    rotation_xyz,
    save_checkpoint,
    write_dataset,
)
from usfield.core.checkpoint import decode_checkpoint, encode_checkpoint
from usfield.core.config import config_markdown
from usfield.core.rays import interpolate_poses
from usfield.field import Field, FieldConfig


def small_dataset(n=5, probe=None, seed=0):
    probe = probe or ProbeConfig(n_scanlines=8, n_samples=16)
    rng = np.random.default_rng(seed)
    frames = []
    for i in range(n):
        img = np.round(rng.random((probe.n_samples, probe.n_scanlines)) * 255) / 255
        pose = Pose.from_rt(rotation_xyz(0.1 * i, -0.05 * i, 0.02), [0.1 * i, -0.2, 0.0])
        frames.append(ProbeFrame(img, pose, i))
    return SweepDataset(tuple(frames), probe)


# -- types -------------------------------------------------------------


def test_parameter_sample_ranges():
    ParameterSample(0.0, 0.0, 1.0, 0.5, 1.0)
    with pytest.raises(ValidationError):
        ParameterSample(-0.1, 0, 0, 0, 0)
    with pytest.raises(ValidationError):
        ParameterSample(0, 1.5, 0, 0, 0)
    with pytest.raises(ValidationError):
        ParameterSample(float("nan"), 0, 0, 0, 0)


def test_pose_rejects_non_rigid_matrix():
    m = np.eye(4)
    m[0, 0] = 1.1
    with pytest.raises(ValidationError):
        Pose(m)
    m = np.eye(4)
    m[3, 0] = 1.0
    with pytest.raises(ValidationError):
        Pose(m)


def test_voxel_patch_invariants():
    VoxelPatch(np.zeros((32, 32, 32)), [0, 0, 0], 1.0)
    with pytest.raises(ValidationError):
        VoxelPatch(np.zeros((16, 32, 32)), [0, 0, 0], 1.0)
    with pytest.raises(ValidationError):
        VoxelPatch(np.full((32, 32, 32), 1.5), [0, 0, 0], 1.0)
    with pytest.raises(ValidationError):
        VoxelPatch(np.zeros((32, 32, 32)), [0, 0, 0], 0.0)


def test_probe_validation():
    with pytest.raises(ValidationError):
        ProbeConfig(n_scanlines=0)
    with pytest.raises(ValidationError):
        ProbeConfig(frequency=0)
    with pytest.raises(ValidationError):
        ProbeConfig(geometry="convex")
    with pytest.raises(ValidationError):
        ProbeConfig.from_json({"n_scanlines": 4, "bogus": 1})


# -- split ---------------------------------------------------------------


def test_split_85_frames():
    train, test = every_eighth_split(85)
    assert test == tuple(range(0, 81, 8))
    assert len(test) == 11 and len(train) == 74


def test_split_single_frame():
    train, test = every_eighth_split(1)
    assert test == (0,) and train == ()


@given(st.integers(min_value=1, max_value=500))
def test_split_property(n):
    train, test = every_eighth_split(n)
    assert len(test) == math.ceil(n / 8)
    assert set(train).isdisjoint(test) and set(train) | set(test) == set(range(n))
    if len(test) > 1:
        assert np.min(np.diff(test)) == 8


# -- rays ------------------------------------------------------------------


def test_center_scanline_on_midline():
    probe = ProbeConfig(n_scanlines=65, n_samples=10)
    ray = ray_for_pixel(probe, Pose.identity(), 32)
    np.testing.assert_allclose(ray.origin, [0, 0, 0], atol=1e-15)
    np.testing.assert_allclose(ray.direction, [0, 0, 1])


def test_linear_rays_parallel_and_evenly_spaced():
    probe = ProbeConfig(n_scanlines=16, n_samples=8, width=1.2)
    o, d, _ = frame_rays(probe, Pose.identity())
    np.testing.assert_allclose(d, np.tile([0, 0, 1.0], (16, 1)))
    gaps = np.diff(o[:, 0])
    np.testing.assert_allclose(gaps, 1.2 / 16)


def test_fan_zero_aperture_equals_linear():
    lin = ProbeConfig(n_scanlines=12, n_samples=8)
    fan = ProbeConfig(n_scanlines=12, n_samples=8, geometry="fan", fan_aperture=0.0)
    pose = Pose.from_rt(rotation_xyz(0.2, 0.1, -0.3), [0.1, 0.2, 0.3])
    for a, b in zip(frame_rays(lin, pose), frame_rays(fan, pose)):
        np.testing.assert_array_equal(a, b)


def test_fan_rays_share_apex_and_span_aperture():
    ap = 0.8
    probe = ProbeConfig(n_scanlines=9, n_samples=8, geometry="fan", fan_aperture=ap)
    o, d, _ = frame_rays(probe, Pose.identity())
    # back-project each ray to x = 0: all meet at the same depth behind the face
    s = -o[:, 0] / d[:, 0].clip(min=None) if False else None
    mask = np.abs(d[:, 0]) > 1e-12
    z_apex = o[mask, 2] - o[mask, 0] / d[mask, 0] * d[mask, 2]
    np.testing.assert_allclose(z_apex, z_apex[0])
    assert z_apex[0] < 0
    # the outermost scan lines sit at the face edges, inside the aperture
    ang = np.arctan2(d[:, 0], d[:, 2])
    assert np.all(np.abs(ang) <= ap / 2 + 1e-12)
    assert np.all(np.diff(ang) > 0)


def test_translation_equivariance():
    probe = ProbeConfig(n_scanlines=8, n_samples=4)
    a = ray_for_pixel(probe, Pose.identity(), 3)
    b = ray_for_pixel(probe, Pose.from_rt(np.eye(3), [0, 0, 1]), 3)
    np.testing.assert_allclose(b.origin - a.origin, [0, 0, 1])
    np.testing.assert_array_equal(a.direction, b.direction)


def test_ray_index_out_of_range():
    with pytest.raises(ValidationError):
        ray_for_pixel(ProbeConfig(n_scanlines=4), Pose.identity(), 4)


@settings(max_examples=50)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.integers(1, 64),
       st.sampled_from(["linear", "fan"]))
def test_ray_unit_direction_and_uniform_depths(rx, ry, rz, n, geometry):
    probe = ProbeConfig(n_scanlines=8, n_samples=n, depth_extent=1.7, geometry=geometry,
                        fan_aperture=0.6 if geometry == "fan" else 0.0)
    pose = Pose.from_rt(rotation_xyz(rx, ry, rz), [0.3, -0.1, 0.2])
    for j in range(8):
        r = ray_for_pixel(probe, pose, j)
        assert abs(np.linalg.norm(r.direction) - 1) < 1e-6
        assert np.all(np.abs(np.diff(r.depths) - r.dt) < 1e-9)
        assert 0 < r.depths[0] and abs(r.depths[-1] - 1.7) < 1e-12


def test_interpolated_poses_are_rigid_and_hit_endpoints():
    a = Pose.from_rt(rotation_xyz(0.1, 0.2, 0.0), [0, 0, 0])
    b = Pose.from_rt(rotation_xyz(-0.3, 0.1, 0.4), [0.5, -0.2, 0.1])
    ps = interpolate_poses(a, b, 5)
    np.testing.assert_allclose(ps[0].matrix, a.matrix, atol=1e-12)
    np.testing.assert_allclose(ps[-1].matrix, b.matrix, atol=1e-12)
    np.testing.assert_allclose(ps[2].translation, (a.translation + b.translation) / 2)


# -- dataset I/O -------------------------------------------------------------


def test_dataset_round_trip(tmp_path):
    ds = small_dataset(9)
    write_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.test_indices == (0, 8)
    for a, b in zip(ds.frames, back.frames):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.pose.matrix, b.pose.matrix)
    # writing the loaded copy again is byte-identical
    write_dataset(back, tmp_path / "e")
    for name in ("probe.json", "poses.json", "frames/00003.png"):
        assert (tmp_path / "d" / name).read_bytes() == (tmp_path / "e" / name).read_bytes()


def test_dataset_128x64_loads(tmp_path):
    ds = small_dataset(2, ProbeConfig(n_scanlines=64, n_samples=128))
    write_dataset(ds, tmp_path)
    assert load_dataset(tmp_path).frames[0].image.shape == (128, 64)


def test_dataset_single_frame_warns(tmp_path, caplog):
    write_dataset(small_dataset(1), tmp_path)
    with caplog.at_level("WARNING"):
        ds = load_dataset(tmp_path)
    assert ds.train_indices == () and ds.test_indices == (0,)
    assert "no training frames" in caplog.text


def test_dataset_missing_file_named(tmp_path):
    write_dataset(small_dataset(2), tmp_path)
    os.remove(tmp_path / "poses.json")
    with pytest.raises(LoadError, match="poses.json"):
        load_dataset(tmp_path)


def test_dataset_missing_frame_named(tmp_path):
    write_dataset(small_dataset(3), tmp_path)
    os.remove(tmp_path / "frames" / "00001.png")
    with pytest.raises(LoadError, match="00001.png"):
        load_dataset(tmp_path)


def test_dataset_dimension_mismatch(tmp_path):
    write_dataset(small_dataset(2), tmp_path)
    probe = json.loads((tmp_path / "probe.json").read_text())
    probe["n_samples"] = 32
    (tmp_path / "probe.json").write_text(json.dumps(probe))
    with pytest.raises(ValidationError):
        load_dataset(tmp_path)


def test_dataset_non_orthonormal_pose(tmp_path):
    write_dataset(small_dataset(2), tmp_path)
    poses = json.loads((tmp_path / "poses.json").read_text())
    poses[1]["matrix"][0] = 2.0
    (tmp_path / "poses.json").write_text(json.dumps(poses))
    with pytest.raises(ValidationError):
        load_dataset(tmp_path)


# -- checkpoints ---------------------------------------------------------------


def test_checkpoint_round_trip_field(tmp_path):
    f = Field(FieldConfig.desk(), seed=3)
    save_checkpoint(f.state_arrays(), tmp_path / "c.ckpt", {"note": "x"})
    arrays, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"note": "x"}
    for k, v in f.state_arrays().items():
        assert arrays[k].dtype == v.dtype
        np.testing.assert_array_equal(arrays[k], v)


def test_checkpoint_preserves_special_values(tmp_path):
    a = {"x": np.array([0.0, -0.0, np.inf, -np.inf, 1e-308, np.nan]), "i": np.arange(5, dtype=np.int64)}
    arrays, _ = decode_checkpoint(encode_checkpoint(a))
    assert arrays["x"].tobytes() == a["x"].tobytes()
    np.testing.assert_array_equal(arrays["i"], a["i"])


def test_checkpoint_truncated(tmp_path):
    p = save_checkpoint({"w": np.ones(100)}, tmp_path / "c.ckpt")
    data = p.read_bytes()
    p.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_checkpoint_corrupted_byte(tmp_path):
    p = save_checkpoint({"w": np.ones(100)}, tmp_path / "c.ckpt")
    data = bytearray(p.read_bytes())
    data[100] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_checkpoint_version_mismatch(tmp_path):
    import hashlib
    import struct

    data = bytearray(encode_checkpoint({"w": np.ones(3)}))
    struct.pack_into("<I", data, 8, 99)
    body = bytes(data[:-32])
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(body + hashlib.sha256(body).digest())


def test_checkpoint_atomic_overwrite(tmp_path, monkeypatch):
    p = save_checkpoint({"w": np.zeros(4)}, tmp_path / "c.ckpt")
    before = p.read_bytes()

    def die(*a, **k):
        raise KeyboardInterrupt("killed mid-write")

    monkeypatch.setattr(os, "replace", die)
    with pytest.raises(KeyboardInterrupt):
        save_checkpoint({"w": np.ones(4)}, p)
    assert p.read_bytes() == before
    assert [q.name for q in tmp_path.iterdir()] == ["c.ckpt"]


# -- config ---------------------------------------------------------------------


def test_config_text_round_trip():
    run = RunConfig(seed=5, lambda_border=0.7, use_us_rendering=False)
    assert RunConfig.from_text(run.to_text()) == run


def test_config_unknown_key_named():
    with pytest.raises(ConfigError, match="lamda_border"):
        RunConfig.from_text("lamda_border = 0.5\n")


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(iterations=0)
    with pytest.raises(ConfigError):
        RunConfig.from_text("w_reflect = 0.8\nw_scatter = 0.5")
    with pytest.raises(ConfigError):
        RunConfig.from_text("use_border_loss = maybe")
    with pytest.raises(ConfigError):
        RunConfig(boundary_mode="sometimes")


def test_config_defaults_respect_weight_ordering():
    run = RunConfig()
    assert run.lambda_border > run.lambda_scatter
    assert run.effective_guidance_step == run.diffusion_steps // 10


def test_config_docs_cover_every_key():
    md = config_markdown()
    for k in RunConfig.keys():
        assert f"`{k}`" in md
    doc = os.path.join(os.path.dirname(__file__), "..", "docs", "config.md")
    assert os.path.exists(doc)
    with open(doc) as fh:
        text = fh.read()
    for k in RunConfig.keys():
        assert f"`{k}`" in text, k
    assert md.strip() in text, "docs/config.md is stale; regenerate it from config_markdown()"
