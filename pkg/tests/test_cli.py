import json

import numpy as np
import pytest
import torch

from usfield import cli
from usfield.core import load_checkpoint, load_dataset
from usfield.phantom import desk_phantom_spec
from usfield.prior.io import load_adapter, load_base

MICRO = ["--set", "field_layers=2", "--set", "field_width=16", "--set", "field_skip=1",
         "--set", "pe_frequencies=3", "--set", "batch_size=32", "--set", "guidance_patches=1",
         "--set", "guidance_every=5"]


def run_ok(argv):
    res = cli.run([str(a) for a in argv])
    assert res.code == 0, argv
    return res


def run_fail(argv, capsys, code=1):
    capsys.readouterr()
    res = cli.run([str(a) for a in argv])
    err = capsys.readouterr().err
    assert res.code == code
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("error: ")
    return lines[0]


@pytest.fixture(scope="module")
def spec_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("spec") / "desk.json"
    path.write_text(json.dumps(desk_phantom_spec().to_json()))
    return path


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory, spec_file):
    out = tmp_path_factory.mktemp("ds") / "sweep"
    run_ok(["phantom", spec_file, "--frames", 10, "--scanlines", 16, "--samples", 32, "--out", out])
    return out


@pytest.fixture(scope="module")
def prior_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("prior")
    run_ok(["prior-train", "--patches", 4, "--steps", 2, "--set", "denoiser_width=4", "--set", "prior_batch=2",
            "--out", out])
    return out


# -- phantom -------------------------------------------------------------------------------


def test_phantom_writes_dataset(dataset_dir):
    assert (dataset_dir / "probe.json").is_file() and (dataset_dir / "poses.json").is_file()
    assert len(list((dataset_dir / "frames").glob("*.png"))) == 10
    ds = load_dataset(dataset_dir)
    assert ds.probe.n_scanlines == 16 and len(ds) == 10


def test_phantom_bad_spec_names_key(tmp_path, capsys):
    data = desk_phantom_spec().to_json()
    data["layers"][0]["thicknes"] = 1.0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(data))
    line = run_fail(["phantom", bad, "--out", tmp_path / "o"], capsys)
    assert "thicknes" in line


def test_phantom_seed_is_reproducible(tmp_path, spec_file):
    for name in ("a", "b"):
        run_ok(["phantom", spec_file, "--frames", 3, "--scanlines", 16, "--samples", 32, "--seed", 7,
                "--out", tmp_path / name])
    for f in sorted((tmp_path / "a" / "frames").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "frames" / f.name).read_bytes()
    assert (tmp_path / "a" / "poses.json").read_bytes() == (tmp_path / "b" / "poses.json").read_bytes()


def test_phantom_float_output(tmp_path, spec_file):
    run_ok(["phantom", spec_file, "--frames", 2, "--scanlines", 16, "--samples", 32, "--float-out",
            "--out", tmp_path])
    frames = np.load(tmp_path / "frames.npy")
    assert frames.shape == (2, 32, 16) and frames.min() >= 0 and frames.max() <= 1


# -- prior ------------------------------------------------------------------------------------


def test_prior_train_outputs(prior_dir):
    base, schedule, meta = load_base(prior_dir / "prior.ckpt")
    assert meta["kind"] == "prior" and schedule.T == 100
    lines = (prior_dir / "prior_losses.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 3


def test_finetune_zero_steps_is_identity_and_records_rank(prior_dir, tmp_path):
    run_ok(["prior-finetune", "--base", prior_dir / "prior.ckpt", "--steps", 0, "--rank", 4,
            "--patches", 2, "--out", tmp_path])
    _, meta = load_checkpoint(tmp_path / "adapter.ckpt")
    assert meta["rank"] == 4 and meta["kind"] == "adapter"
    base, _, _ = load_base(prior_dir / "prior.ckpt")
    adapter, _ = load_adapter(tmp_path / "adapter.ckpt", base)
    x = torch.randn(1, 32, 32, 32)
    with torch.no_grad():
        assert torch.equal(adapter(x, torch.tensor([5])), base(x, torch.tensor([5])))


def test_finetune_missing_base(tmp_path, capsys):
    run_fail(["prior-finetune", "--base", tmp_path / "nope.ckpt", "--out", tmp_path], capsys)


@pytest.mark.slow
def test_prior_train_loss_trends_down(tmp_path):
    run_ok(["prior-train", "--patches", 100, "--steps", 400, "--out", tmp_path])
    losses = np.loadtxt(tmp_path / "prior_losses.csv", delimiter=",", skiprows=1)[:, 1]
    blocks = losses.reshape(-1, 100).mean(axis=1)
    assert np.all(np.diff(blocks) < 0)


# -- train ---------------------------------------------------------------------------------------


def _train(dataset_dir, prior_dir, out, *extra):
    return run_ok(["train", dataset_dir, "--prior", prior_dir / "prior.ckpt", "--iterations", 10,
                   *MICRO, "--out", out, *extra])


def test_train_smoke(dataset_dir, prior_dir, tmp_path):
    res = _train(dataset_dir, prior_dir, tmp_path)
    assert (tmp_path / "checkpoint.ckpt").is_file()
    _, meta = load_checkpoint(tmp_path / "checkpoint.ckpt")
    assert meta["step"] == 10
    assert len((tmp_path / "losses.csv").read_text().splitlines()) == 11
    assert tmp_path / "checkpoint.ckpt" in res.artifacts


def test_train_seed_reproducible(dataset_dir, prior_dir, tmp_path):
    _train(dataset_dir, prior_dir, tmp_path / "a", "--seed", 7)
    _train(dataset_dir, prior_dir, tmp_path / "b", "--seed", 7)
    for name in ("losses.csv", "checkpoint.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_no_guidance_flag_is_zero_lambda(dataset_dir, tmp_path):
    base = ["train", dataset_dir, "--iterations", 10, *MICRO]
    run_ok(base + ["--no-guidance", "--out", tmp_path / "a"])
    run_ok(base + ["--set", "lambda_border=0", "--set", "lambda_scatter=0", "--out", tmp_path / "b"])
    assert (tmp_path / "a" / "losses.csv").read_bytes() == (tmp_path / "b" / "losses.csv").read_bytes()


def test_train_needs_prior_when_guided(dataset_dir, tmp_path, capsys):
    run_fail(["train", dataset_dir, "--iterations", 2, "--out", tmp_path], capsys)


def test_config_typo_names_key(dataset_dir, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("iterations = 3\nlamda_border = 0.3\n")
    line = run_fail(["train", dataset_dir, "--no-guidance", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert "lamda_border" in line
    line = run_fail(["train", dataset_dir, "--no-guidance", "--set", "iteratons=3", "--out", tmp_path / "o"], capsys)
    assert "iteratons" in line


def test_config_file_and_flag_precedence(dataset_dir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("iterations = 50\nseed = 3\n")
    run_ok(["train", dataset_dir, "--no-guidance", "--config", cfg, "--iterations", 4, *MICRO,
            "--out", tmp_path / "o"])
    _, meta = load_checkpoint(tmp_path / "o" / "checkpoint.ckpt")
    assert meta["step"] == 4 and meta["run"]["seed"] == 3


def test_missing_dataset_exit_code(tmp_path, capsys):
    run_fail(["train", tmp_path / "missing", "--no-guidance", "--out", tmp_path], capsys)


def test_ablate_table(dataset_dir, prior_dir, tmp_path):
    run_ok(["ablate", dataset_dir, "--prior", prior_dir / "prior.ckpt", "--iterations", 2, *MICRO,
            "--csv", "--out", tmp_path])
    rows = (tmp_path / "ablation.csv").read_text().splitlines()
    assert rows[0] == "variant,psnr,ssim,ms_ssim" and len(rows) == 5


# -- render and eval -------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, dataset_dir):
    out = tmp_path_factory.mktemp("trained")
    run_ok(["train", dataset_dir, "--no-guidance", "--iterations", 150, *MICRO, "--set", "lr_start=5e-3",
            "--set", "lr_end=5e-4", "--out", out])
    return out


def test_render_interpolated_poses(trained_dir, dataset_dir, tmp_path):
    run_ok(["render", trained_dir / "checkpoint.ckpt", "--dataset", dataset_dir, "--interpolate", 1, 2,
            "--count", 3, "--float-out", "--out", tmp_path])
    assert len(list((tmp_path / "frames").glob("*.png"))) == 3
    frames = np.load(tmp_path / "frames.npy")
    assert frames.shape == (3, 32, 16) and frames.min() >= 0 and frames.max() <= 1


def test_render_from_pose_file(trained_dir, dataset_dir, tmp_path):
    run_ok(["render", trained_dir / "checkpoint.ckpt", "--poses", dataset_dir / "poses.json", "--out", tmp_path])
    assert len(list((tmp_path / "frames").glob("*.png"))) == 10


def test_render_at_training_pose_beats_untrained(trained_dir, dataset_dir, tmp_path):
    from usfield.evalkit import psnr

    run_ok(["train", dataset_dir, "--no-guidance", "--iterations", 1, *MICRO, "--out", tmp_path / "u"])
    ds = load_dataset(dataset_dir)
    i = ds.train_indices[2]
    scores = []
    for ckpt in (trained_dir / "checkpoint.ckpt", tmp_path / "u" / "checkpoint.ckpt"):
        out = tmp_path / ckpt.parent.name
        run_ok(["render", ckpt, "--dataset", dataset_dir, "--float-out", "--out", out])
        scores.append(psnr(np.load(out / "frames.npy")[i], ds.frames[i].image))
    assert scores[0] > scores[1]


def test_render_architecture_mismatch(trained_dir, dataset_dir, tmp_path, capsys):
    run_fail(["render", trained_dir / "checkpoint.ckpt", "--dataset", dataset_dir, "--set", "field_width=8",
              "--out", tmp_path], capsys)


def test_eval_self_comparison(dataset_dir, tmp_path):
    run_ok(["eval", dataset_dir, "--dataset", dataset_dir, "--csv", "--out", tmp_path])
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["summary"]["psnr"]["mean"] == 100.0
    assert (tmp_path / "report.csv").is_file()


def test_eval_checkpoint(trained_dir, dataset_dir, tmp_path):
    run_ok(["eval", trained_dir / "checkpoint.ckpt", "--dataset", dataset_dir, "--out", tmp_path])
    report = json.loads((tmp_path / "report.json").read_text())
    assert len(report["frames"]) == len(load_dataset(dataset_dir).test_indices)


# -- parser contract ------------------------------------------------------------------------------------


def test_unknown_flag_exit_one(capsys):
    run_fail(["eval", "x", "--dataset", "y", "--bogus"], capsys)
    run_fail(["frobnicate"], capsys)


@pytest.mark.parametrize("command", sorted(cli.COMMANDS))
def test_help_lists_every_flag(command, capsys):
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction").choices[command]
    with pytest.raises(SystemExit) as info:
        cli.run([command, "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    flags = [o for a in sub._actions for o in a.option_strings if o.startswith("--")]
    for flag in ("--config", "--seed", "--out", "--log-level"):
        assert flag in flags
    for flag in flags:
        assert flag in text
