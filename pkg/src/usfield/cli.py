"""Command-line entry point: ``usfield <command> [options]``.

Every command accepts ``--config FILE`` (flat ``key = value`` run settings),
``--seed``, ``--out`` and ``--log-level``; explicit flags override the file.
Exit status is 0 on success, 1 for invalid input and 2 for runtime failures,
with a single ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core.checkpoint import save_checkpoint
from .core.config import RunConfig
from .core.dataset import frame_filename, load_dataset, write_dataset, write_png
from .core.errors import CheckpointError, ConfigError, LoadError, UsfieldError, ValidationError
from .core.rays import interpolate_poses
from .core.types import Pose, ProbeConfig

log = logging.getLogger("usfield")


class UsageError(ValidationError):
    """Bad command-line usage."""


@dataclass
class CommandResult:
    code: int = 0
    artifacts: list[Path] = field(default_factory=list)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="flat key = value run configuration file")
    p.add_argument("--seed", type=int, default=d, help="master seed (overrides the config file)")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--log-level", default=d, choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                   help="logging verbosity (default WARNING)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="usfield", description="Ultrasound neural fields with a voxel diffusion prior.")
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _common(p, suppress=True)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")
        return p

    p = add("phantom", "Build a phantom from a JSON spec and simulate a probe sweep into a dataset directory.")
    p.add_argument("spec", help="phantom spec JSON file")
    p.add_argument("--frames", type=int, default=20, help="number of frames in the sweep")
    p.add_argument("--length", type=float, default=1.6, help="sweep length along y")
    p.add_argument("--rock", type=float, default=8.0, help="in-plane rocking amplitude (degrees)")
    p.add_argument("--tilt", type=float, default=4.0, help="out-of-plane tilt amplitude (degrees)")
    p.add_argument("--lateral", type=float, default=0.1, help="lateral drift amplitude")
    p.add_argument("--scanlines", type=int, default=64, help="scan lines per frame")
    p.add_argument("--samples", type=int, default=128, help="samples per scan line")
    p.add_argument("--depth", type=float, default=2.0, help="imaging depth")
    p.add_argument("--geometry", choices=["linear", "fan"], default="linear", help="probe geometry")
    p.add_argument("--fan-aperture", type=float, default=0.0, help="fan opening angle in radians")
    p.add_argument("--float-out", action="store_true", help="also write unquantised frames to frames.npy")

    p = add("prior-train", "Train the base voxel denoiser on procedural or phantom patches.")
    p.add_argument("--patches", type=int, default=256, help="number of training patches")
    p.add_argument("--phantom", help="extract patches from this phantom spec instead of procedural shapes")
    p.add_argument("--steps", type=int, help="training steps (config: prior_steps)")

    p = add("prior-finetune", "Fit low-rank adapters to a trained base denoiser.")
    p.add_argument("--base", required=True, help="base prior checkpoint")
    p.add_argument("--patches", type=int, default=128, help="number of fine-tuning patches")
    p.add_argument("--phantom", help="extract patches from this phantom spec instead of random phantoms")
    p.add_argument("--steps", type=int, help="fine-tuning steps (config: finetune_steps)")
    p.add_argument("--rank", type=int, help="adapter rank (config: lora_rank)")
    p.add_argument("--scale", type=float, help="adapter scale (config: lora_scale)")

    for name, text in (("train", "Fit a field to a sweep dataset."),
                       ("ablate", "Train the full model and its three ablations and tabulate test metrics.")):
        p = add(name, text)
        p.add_argument("dataset", help="sweep dataset directory")
        p.add_argument("--prior", help="base prior checkpoint (required unless guidance is off)")
        p.add_argument("--adapter", help="adapter checkpoint attached to the prior")
        p.add_argument("--iterations", type=int, help="optimisation steps (config: iterations)")
        p.add_argument("--no-guidance", action="store_true", help="set both guidance weights to 0")
        if name == "train":
            p.add_argument("--resume", help="continue from this training checkpoint")
        else:
            p.add_argument("--seeds", type=int, nargs="+", help="seeds to average over (default: --seed)")
            p.add_argument("--csv", action="store_true", help="also write ablation.csv")

    p = add("render", "Render B-mode frames from a trained field at given poses.")
    p.add_argument("checkpoint", help="field checkpoint")
    p.add_argument("--poses", help="poses JSON file (dataset poses.json format)")
    p.add_argument("--dataset", help="render at this dataset's poses")
    p.add_argument("--interpolate", type=int, nargs=2, metavar=("I", "J"),
                   help="render poses interpolated between dataset frames I and J")
    p.add_argument("--count", type=int, default=5, help="number of interpolated poses")
    p.add_argument("--float-out", action="store_true", help="also write unquantised frames to frames.npy")

    p = add("eval", "Score a field checkpoint (or a frame directory) on a dataset's test split.")
    p.add_argument("source", help="field checkpoint, or a dataset directory of predicted frames")
    p.add_argument("--dataset", required=True, help="reference dataset directory")
    p.add_argument("--csv", action="store_true", help="also write report.csv")
    return parser


# ----------------------------------------------------------------------
# helpers


def _run_config(args) -> RunConfig:
    run = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    run = run.with_text_overrides(overrides)
    if getattr(args, "seed", None) is not None:
        run = run.replace(seed=args.seed)
    return run


def _out_dir(args, default: str) -> Path:
    out = Path(getattr(args, "out", None) or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _losses_csv(losses: Sequence[float]) -> str:
    return "step,loss\n" + "".join(f"{i},{float(v)!r}\n" for i, v in enumerate(losses))


def _load_prior_for(args, run: RunConfig, guidance: bool):
    from .prior.io import load_prior

    if not guidance:
        return None, None
    if not args.prior:
        raise UsageError("--prior is required unless guidance is disabled (--no-guidance)")
    return load_prior(_existing(args.prior), _existing(args.adapter) if args.adapter else None)


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise LoadError(f"file not found: {p}", p)
    return p


def _train_run(args) -> RunConfig:
    run = _run_config(args)
    if args.iterations is not None:
        run = run.replace(iterations=args.iterations)
    if args.no_guidance:
        run = run.replace(lambda_border=0.0, lambda_scatter=0.0)
    return run


def _read_poses(path) -> list[Pose]:
    try:
        entries = json.loads(_existing(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(entries, list):
        raise ValidationError("poses file must hold a list")
    try:
        return [Pose(np.asarray(e["matrix"], dtype=np.float64).reshape(4, 4)) for e in entries]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed pose entry: {exc}") from None


# ----------------------------------------------------------------------
# commands


def cmd_phantom(args) -> CommandResult:
    from .phantom import PhantomSpec, build_phantom, simulate_sweep, sweep_trajectory
    from .usrender import RenderConfig

    run = _run_config(args)
    spec = PhantomSpec.from_file(_existing(args.spec))
    probe = ProbeConfig(n_scanlines=args.scanlines, n_samples=args.samples, depth_extent=args.depth,
                        geometry=args.geometry, fan_aperture=args.fan_aperture)
    poses = sweep_trajectory(args.frames, args.length, args.rock, args.tilt, args.lateral, seed=run.seed)
    ds = simulate_sweep(build_phantom(spec), poses, probe, RenderConfig.from_run(run), seed=run.seed)
    out = _out_dir(args, "sweep")
    write_dataset(ds, out)
    arts = [out]
    if args.float_out:
        np.save(out / "frames.npy", ds.images())
        arts.append(out / "frames.npy")
    print(f"wrote {len(ds)} frames to {out}")
    return CommandResult(0, arts)


def _patches_from_spec(path, count: int, run: RunConfig, seed: int):
    from .phantom import PhantomSpec, build_phantom, extract_patches

    vol = build_phantom(PhantomSpec.from_file(_existing(path)))
    frac = (run.patch_fraction_min, run.patch_fraction_max)
    half = max(1, count // 2)
    return (extract_patches(vol, half, frac, seed, "border_probability")
            + extract_patches(vol, max(1, count - half), frac, seed + 1, "scattering_density"))


def cmd_prior_train(args) -> CommandResult:
    from .prior import NoiseSchedule, procedural_patches, train_base
    from .prior.denoiser import DenoiserConfig
    from .prior.io import save_base

    run = _run_config(args)
    steps = run.prior_steps if args.steps is None else args.steps
    if steps < 0 or args.patches < 1:
        raise UsageError("--steps must be >= 0 and --patches >= 1")
    schedule = NoiseSchedule.from_run(run)
    patches = (_patches_from_spec(args.phantom, args.patches, run, run.seed) if args.phantom
               else procedural_patches(args.patches, seed=run.seed))
    model, losses = train_base(patches, schedule, steps, seed=run.seed, lr=run.prior_lr,
                               batch=run.prior_batch, config=DenoiserConfig(width=run.denoiser_width))
    out = _out_dir(args, "prior")
    ckpt = save_base(out / "prior.ckpt", model, schedule)
    (out / "prior_losses.csv").write_text(_losses_csv(losses))
    print(f"wrote {ckpt}")
    return CommandResult(0, [ckpt, out / "prior_losses.csv"])


def cmd_prior_finetune(args) -> CommandResult:
    from .phantom import finetune_patches
    from .prior import finetune_lora
    from .prior.io import load_base, save_adapter

    run = _run_config(args)
    base, schedule, _ = load_base(_existing(args.base))
    steps = run.finetune_steps if args.steps is None else args.steps
    rank = run.lora_rank if args.rank is None else args.rank
    scale = run.lora_scale if args.scale is None else args.scale
    if steps < 0 or rank < 1 or scale < 0 or args.patches < 1:
        raise UsageError("need --steps >= 0, --rank >= 1, --scale >= 0 and --patches >= 1")
    patches = (_patches_from_spec(args.phantom, args.patches, run, run.seed) if args.phantom
               else finetune_patches(args.patches, seed=run.seed,
                                     size_fraction=(run.patch_fraction_min, run.patch_fraction_max)))
    adapter, losses = finetune_lora(base, patches, schedule, steps, rank=rank, scale=scale,
                                    seed=run.seed, lr=run.finetune_lr, batch=run.prior_batch)
    out = _out_dir(args, "prior")
    ckpt = save_adapter(out / "adapter.ckpt", adapter, schedule)
    (out / "finetune_losses.csv").write_text(_losses_csv(losses))
    print(f"wrote {ckpt}")
    return CommandResult(0, [ckpt, out / "finetune_losses.csv"])


def cmd_train(args) -> CommandResult:
    from .train import TrainConfig, train_field

    run = _train_run(args)
    ds = load_dataset(args.dataset)
    prior, schedule = _load_prior_for(args, run, TrainConfig.from_run(run).guidance_active)
    out = _out_dir(args, "run")
    (out / "config.txt").write_text(run.to_text())
    res = train_field(ds, prior, run, schedule, out_dir=out,
                      resume=_existing(args.resume) if args.resume else None)
    print(f"wrote {res.checkpoint} ({len(res.history)} steps, final photometric "
          f"{res.history[-1][1]:.6g})" if res.history else f"wrote {res.checkpoint}")
    return CommandResult(0, [res.checkpoint, out / "losses.csv", out / "config.txt"])


def cmd_ablate(args) -> CommandResult:
    from .train import TrainConfig, ablation_suite

    run = _train_run(args)
    ds = load_dataset(args.dataset)
    prior, schedule = _load_prior_for(args, run, TrainConfig.from_run(run).guidance_active)
    out = _out_dir(args, "ablation")
    result = ablation_suite(ds, prior, run, schedule, seeds=args.seeds or [run.seed], out_dir=out)
    table = result.table()
    (out / "ablation.txt").write_text(table + "\n")
    arts = [out / "ablation.txt"]
    if args.csv:
        (out / "ablation.csv").write_text(result.to_csv())
        arts.append(out / "ablation.csv")
    print(table)
    return CommandResult(0, arts)


def _field_from_checkpoint(args, path):
    from .field import FieldConfig
    from .train import load_field, render_config_from_meta

    fld, meta = load_field(_existing(path))
    if getattr(args, "config", None) or getattr(args, "set", None):
        run = _run_config(args)
        want = FieldConfig(run.field_layers, run.field_width, run.field_skip, run.pe_frequencies)
        if want != fld.config:
            raise ValidationError("configured field architecture does not match the checkpoint")
    return fld, meta, render_config_from_meta(meta)


def cmd_render(args) -> CommandResult:
    import torch

    from .usrender import render_frame

    fld, meta, rcfg = _field_from_checkpoint(args, args.checkpoint)
    standard = not meta.get("use_us_rendering", True)
    if args.dataset:
        ds = load_dataset(args.dataset)
        probe = ds.probe
        poses = ds.poses
        if args.interpolate:
            i, j = args.interpolate
            if not (0 <= i < len(ds) and 0 <= j < len(ds)):
                raise UsageError(f"--interpolate indices must lie in [0, {len(ds)})")
            poses = interpolate_poses(ds.poses[i], ds.poses[j], args.count)
    elif args.poses:
        if args.interpolate:
            raise UsageError("--interpolate needs --dataset")
        poses = _read_poses(args.poses)
        if "probe" not in meta:
            raise ValidationError("checkpoint carries no probe geometry; pass --dataset")
        probe = ProbeConfig.from_json(meta["probe"])
    else:
        raise UsageError("give --poses or --dataset")
    out = _out_dir(args, "render")
    (out / "frames").mkdir(exist_ok=True)
    imgs = []
    with torch.no_grad():
        for n, pose in enumerate(poses):
            img = render_frame(fld, pose, probe, rcfg, standard=standard, seed=n).double().numpy()
            write_png(img, out / "frames" / frame_filename(n))
            imgs.append(img)
    (out / "poses.json").write_text(json.dumps(
        [{"frame": n, "matrix": [float(v) for v in p.matrix.reshape(-1)]} for n, p in enumerate(poses)], indent=1))
    (out / "probe.json").write_text(json.dumps(probe.to_json(), indent=2))
    arts = [out / "frames", out / "poses.json"]
    if args.float_out:
        np.save(out / "frames.npy", np.stack(imgs))
        arts.append(out / "frames.npy")
    print(f"wrote {len(poses)} frames to {out / 'frames'}")
    return CommandResult(0, arts)


def cmd_eval(args) -> CommandResult:
    from .evalkit import evaluate

    ref = load_dataset(args.dataset)
    src = Path(args.source)
    if src.is_dir():
        pred = load_dataset(src)
        report = evaluate(pred, ref, label=str(src))
    else:
        fld, meta, rcfg = _field_from_checkpoint(args, src)
        report = evaluate(fld, ref, rcfg, standard=not meta.get("use_us_rendering", True), label=str(src))
    out = _out_dir(args, "eval")
    path = report.write(out / "report.json", out / "report.csv" if args.csv else None)
    print(report.table())
    return CommandResult(0, [path] + ([out / "report.csv"] if args.csv else []))


COMMANDS = {
    "phantom": cmd_phantom,
    "prior-train": cmd_prior_train,
    "prior-finetune": cmd_prior_finetune,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "render": cmd_render,
    "eval": cmd_eval,
}


def run(argv: Sequence[str] | None = None) -> CommandResult:
    """Parse ``argv`` and execute the command, mapping failures to exit codes."""
    try:
        args = build_parser().parse_args(argv)
        level = getattr(args, "log_level", None) or "WARNING"
        logging.basicConfig(level=getattr(logging, level), format="%(levelname)s %(name)s: %(message)s")
        logging.getLogger("usfield").setLevel(getattr(logging, level))
        return COMMANDS[args.command](args)
    except (ValidationError, LoadError, CheckpointError) as exc:
        _fail(exc)
        return CommandResult(1)
    except UsfieldError as exc:
        _fail(exc)
        return CommandResult(2)
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        _fail(exc)
        return CommandResult(2)


def _fail(exc: BaseException) -> None:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    return run(argv).code


if __name__ == "__main__":
    sys.exit(main())
