"""Field optimisation: photometric loss, diffusion-guided patch losses, schedules and ablations."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .core.checkpoint import load_checkpoint, namespace, prefixed, save_checkpoint
from .core.config import RunConfig
from .core.errors import CheckpointError, TrainingDivergedError, ValidationError
from .core.rays import frame_rays
from .core.types import PATCH_SIZE, ProbeConfig, ScanRay, SweepDataset, patch_lattice
from .evalkit import MetricReport, evaluate
from .field import Field, FieldConfig, field_eval_batch
from .prior.diffusion import guidance_targets
from .prior.schedule import NoiseSchedule
from .usrender import RenderConfig, render_columns

log = logging.getLogger(__name__)

#: Scene box in normalised world units: lateral [-1, 1], depth [0, 2] below the skin.
SCENE_LO = np.array([-1.0, -1.0, 0.0])
SCENE_HI = np.array([1.0, 1.0, 2.0])
SCENE_EXTENT = 2.0

HISTORY_COLUMNS = ("step", "photometric", "L_rho_b", "L_rho_s", "total", "lr")


# ----------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class LossWeights:
    border: float = 0.5
    scatter: float = 0.25

    def __post_init__(self):
        if self.border < 0 or self.scatter < 0:
            raise ValidationError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 512
    lr_start: float = 5e-4
    lr_end: float = 5e-5
    grad_clip: float = 10.0
    guidance_every: int = 10
    guidance_patches: int = 4
    guidance_step: int = 10
    use_border_loss: bool = True
    use_scatter_loss: bool = True
    use_us_rendering: bool = True
    photometric_reduction: str = "mean"
    patch_fraction: tuple[float, float] = (0.1, 0.4)
    checkpoint_every: int = 0
    seed: int = 0
    weights: LossWeights = LossWeights()
    render: RenderConfig = RenderConfig()
    field: FieldConfig = field(default_factory=FieldConfig.desk)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.guidance_every < 1 or self.guidance_patches < 1:
            raise ValidationError("guidance cadence and patch count must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.photometric_reduction not in ("sum", "mean"):
            raise ValidationError("photometric_reduction must be 'sum' or 'mean'")

    @classmethod
    def from_run(cls, run: RunConfig) -> "TrainConfig":
        return cls(
            iterations=run.iterations, batch_size=run.batch_size, lr_start=run.lr_start,
            lr_end=run.lr_end, grad_clip=run.grad_clip, guidance_every=run.guidance_every,
            guidance_patches=run.guidance_patches, guidance_step=run.effective_guidance_step,
            use_border_loss=run.use_border_loss, use_scatter_loss=run.use_scatter_loss,
            use_us_rendering=run.use_us_rendering, photometric_reduction=run.photometric_reduction,
            patch_fraction=(run.patch_fraction_min, run.patch_fraction_max),
            checkpoint_every=run.checkpoint_every, seed=run.seed,
            weights=LossWeights(run.lambda_border, run.lambda_scatter),
            render=RenderConfig.from_run(run),
            field=FieldConfig(run.field_layers, run.field_width, run.field_skip, run.pe_frequencies),
        )

    @property
    def effective_weights(self) -> LossWeights:
        """Weights after the ablation switches are applied."""
        return LossWeights(self.weights.border if self.use_border_loss else 0.0,
                           self.weights.scatter if self.use_scatter_loss else 0.0)

    @property
    def guidance_active(self) -> bool:
        w = self.effective_weights
        return w.border > 0 or w.scatter > 0


def lr_at(step: int, iterations: int, start: float = 5e-4, end: float = 5e-5) -> float:
    """Exponential decay from ``start`` at step 0 to ``end`` at the last step."""
    if iterations <= 1:
        return start
    return start * (end / start) ** (step / (iterations - 1))


# ----------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossReport:
    photometric: float
    border: float
    scatter: float
    total: float

    @classmethod
    def from_parts(cls, photometric: float, border: float, scatter: float,
                   weights: LossWeights) -> "LossReport":
        total = photometric + weights.border * border + weights.scatter * scatter
        return cls(float(photometric), float(border), float(scatter), float(total))


def photometric_loss(pred: torch.Tensor, target: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Squared L2 distance per column, summed (or averaged) over the batch."""
    if pred.shape != target.shape:
        raise ValidationError(f"rendered {tuple(pred.shape)} vs target {tuple(target.shape)}")
    per_ray = ((pred - target) ** 2).sum(dim=-1)
    return per_ray.sum() if reduction == "sum" else per_ray.mean()


def total_loss(pred: torch.Tensor, target: torch.Tensor, guidance=(0.0, 0.0),
               weights: LossWeights = LossWeights(),
               reduction: str = "sum") -> tuple[torch.Tensor, LossReport]:
    """Photometric term plus weighted guidance terms.

    Returns the differentiable total and a :class:`LossReport` of plain floats.
    """
    photo = photometric_loss(pred, target, reduction)
    lb, ls = (torch.as_tensor(g, dtype=photo.dtype) for g in guidance)
    total = photo
    if weights.border != 0:
        total = total + weights.border * lb
    if weights.scatter != 0:
        total = total + weights.scatter * ls
    return total, LossReport.from_parts(photo.item(), lb.item(), ls.item(), weights)


# ----------------------------------------------------------------------
# ray batches


@dataclass(frozen=True)
class RayBatch:
    origins: np.ndarray      # (B, 3)
    directions: np.ndarray   # (B, 3)
    targets: np.ndarray      # (B, S)
    frames: np.ndarray       # (B,) dataset frame positions
    scanlines: np.ndarray    # (B,)
    probe: ProbeConfig

    def __len__(self) -> int:
        return self.origins.shape[0]

    def rays(self) -> list[ScanRay]:
        d = self.probe.depths()
        return [ScanRay(o, v, d, self.probe.dt) for o, v in zip(self.origins, self.directions)]

    def __iter__(self):
        return iter(zip(self.rays(), self.targets))


class RayTable:
    """Every (train frame, scan line) ray of a dataset, flattened for sampling."""

    def __init__(self, dataset: SweepDataset):
        if not dataset.train_indices:
            raise ValidationError("the train split is empty")
        self.dataset = dataset
        w = dataset.probe.n_scanlines
        o, d, c, f, s = [], [], [], [], []
        for i in dataset.train_indices:
            fr = dataset.frames[i]
            origins, dirs, _ = frame_rays(dataset.probe, fr.pose)
            o.append(origins)
            d.append(dirs)
            c.append(fr.image.T)
            f.append(np.full(w, i))
            s.append(np.arange(w))
        self.origins = np.concatenate(o)
        self.directions = np.concatenate(d)
        self.columns = np.concatenate(c)
        self.frames = np.concatenate(f)
        self.scanlines = np.concatenate(s)

    def __len__(self) -> int:
        return self.origins.shape[0]

    def sample(self, batch_size: int, seed: int, step: int) -> RayBatch:
        n = len(self)
        rng = np.random.default_rng([seed, step])
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        return RayBatch(self.origins[idx], self.directions[idx], self.columns[idx],
                        self.frames[idx], self.scanlines[idx], self.dataset.probe)

    def swept_region(self) -> tuple[np.ndarray, np.ndarray]:
        """Lateral bounding box ``(lo, hi)`` of the probe faces over the train split."""
        xy = self.origins[:, :2]
        return xy.min(axis=0), xy.max(axis=0)


def sample_ray_batch(dataset: SweepDataset, batch_size: int, seed: int, step: int) -> RayBatch:
    """Uniform draw without replacement over (train frame, scan line) pairs.

    Deterministic in ``(seed, step)``; targets are the frames' pixel columns.
    """
    return RayTable(dataset).sample(batch_size, seed, step)


# ----------------------------------------------------------------------
# guidance


@dataclass(frozen=True)
class PatchPlacement:
    origin: np.ndarray
    edge: float

    def lattice(self) -> np.ndarray:
        return patch_lattice(self.origin, self.edge)


def place_patches(region: tuple[np.ndarray, np.ndarray], count: int, fraction: Sequence[float],
                  rng: np.random.Generator, extent: float = SCENE_EXTENT) -> list[PatchPlacement]:
    """Skin-anchored cubes placed uniformly inside the lateral ``region``.

    Edges are drawn from ``fraction * extent``; a cube wider than the region is
    centred on it and then kept inside the scene box.
    """
    lo, hi = np.asarray(region[0], dtype=np.float64), np.asarray(region[1], dtype=np.float64)
    out = []
    for _ in range(count):
        edge = float(rng.uniform(fraction[0], fraction[1]) * extent)
        span = hi - lo - edge
        corner = np.where(span > 0, lo + rng.uniform(0.0, 1.0, size=2) * np.maximum(span, 0.0),
                          (lo + hi - edge) / 2)
        corner = np.clip(corner, SCENE_LO[:2], SCENE_HI[:2] - edge)
        out.append(PatchPlacement(np.array([corner[0], corner[1], SCENE_LO[2]]), edge))
    return out


def _check_placement(p: PatchPlacement) -> None:
    lo, hi = p.origin, p.origin + p.edge
    if np.any(lo < SCENE_LO - 1e-9) or np.any(hi > SCENE_HI + 1e-9):
        raise ValidationError(f"patch at {p.origin.tolist()} with edge {p.edge:.4g} leaves the scene box")


def guidance_losses(field_state: Callable, placements: Sequence[PatchPlacement], prior,
                    t_g: int, schedule: NoiseSchedule, seed: int,
                    channels: tuple[bool, bool] = (True, True)) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean squared gap between field patches and the prior's denoised versions.

    The field is voxelised on each placement's ``32^3`` lattice; border
    probability and scattering density patches are noised to ``t_g`` and
    denoised by ``prior`` with gradients blocked, so only the field receives
    gradient. Returns ``(L_rho_b, L_rho_s)`` averaged over all patches; a
    channel switched off in ``channels`` skips the denoiser and returns 0.
    """
    for p in placements:
        _check_placement(p)
    pts = np.concatenate([p.lattice().reshape(-1, 3) for p in placements])
    params = field_eval_batch(field_state, pts)
    shape = (len(placements),) + (PATCH_SIZE,) * 3
    g_b = params[:, 2].reshape(shape)
    g_s = params[:, 3].reshape(shape)
    m_b, m_s = guidance_targets(prior, g_b.detach(), g_s.detach(), t_g, schedule, seed, channels)
    return torch.mean((g_b - m_b.to(g_b.dtype)) ** 2), torch.mean((g_s - m_s.to(g_s.dtype)) ** 2)


def guidance_loss(field_state: Callable, placement, prior, t_g: int, schedule: NoiseSchedule,
                  seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Single-patch form of :func:`guidance_losses`; ``placement`` is ``(origin, edge)``."""
    if not isinstance(placement, PatchPlacement):
        origin, edge = placement
        placement = PatchPlacement(np.asarray(origin, dtype=np.float64), float(edge))
    return guidance_losses(field_state, [placement], prior, t_g, schedule, seed)


# ----------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    field: Field
    history: list[tuple]
    config: TrainConfig
    checkpoint: Path | None = None
    seconds: float = 0.0

    def losses(self, column: str = "photometric") -> np.ndarray:
        k = HISTORY_COLUMNS.index(column)
        return np.array([row[k] for row in self.history])


def history_csv(history: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for row in history:
        w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    return buf.getvalue()


def _optimizer(field_state: Field, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.RAdam(field_state.parameters(), lr=cfg.lr_start, betas=(0.9, 0.999), eps=1e-8)


def _optim_arrays(opt: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for k, v in st.items():
            out[f"{idx}/{k}"] = torch.as_tensor(v).detach().numpy().copy()
    return out


def _load_optim(opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray]) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for key, v in arrays.items():
        idx, name = key.split("/", 1)
        state.setdefault(int(idx), {})[name] = torch.from_numpy(np.array(v))
    sd["state"] = state
    opt.load_state_dict(sd)


def save_training_checkpoint(path, field_state: Field, opt: torch.optim.Optimizer | None, step: int,
                             history: Sequence[tuple], cfg: TrainConfig, probe: ProbeConfig | None,
                             run: RunConfig | None = None) -> Path:
    arrays = prefixed(field_state.state_arrays(), "field")
    if opt is not None:
        arrays.update(prefixed(_optim_arrays(opt), "optim"))
    arrays["history/values"] = np.asarray(history, dtype=np.float64).reshape(-1, len(HISTORY_COLUMNS))
    meta = {
        "kind": "field",
        "step": int(step),
        "field": cfg.field.to_json(),
        "render": {k: getattr(cfg.render, k) for k in cfg.render.__dataclass_fields__},
        "use_us_rendering": cfg.use_us_rendering,
        "seed": cfg.seed,
    }
    if probe is not None:
        meta["probe"] = probe.to_json()
    if run is not None:
        meta["run"] = run.to_dict()
    return save_checkpoint(arrays, path, meta)


def load_field(path) -> tuple[Field, dict]:
    """Field weights and checkpoint metadata from a training checkpoint."""
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "field":
        raise CheckpointError(f"{path} is not a field checkpoint")
    fld = Field.from_arrays(namespace(arrays, "field"), FieldConfig.from_json(meta["field"]))
    fld.eval()
    return fld, meta


def render_config_from_meta(meta: dict) -> RenderConfig:
    return RenderConfig(**meta["render"]) if "render" in meta else RenderConfig()


def _step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(np.random.SeedSequence([seed, step, 2]).generate_state(1)[0]))


def train_field(dataset: SweepDataset, prior, config: TrainConfig | RunConfig,
                schedule: NoiseSchedule | None = None, out_dir=None, resume=None,
                run: RunConfig | None = None,
                callback: Callable[[int, LossReport], None] | None = None) -> TrainResult:
    """Fit a field to the train split of ``dataset``.

    Each step renders a random ray batch (ultrasound model, or standard volume
    rendering when ``use_us_rendering`` is off) and takes an RAdam step on the
    squared column error. Every ``guidance_every`` steps the prior's denoised
    versions of randomly placed skin-anchored field patches are added as
    fixed targets. When both effective guidance weights are zero the prior is
    never consulted.

    Args:
        dataset: training sweep.
        prior: noise predictor ``(x, t) -> eps``; may be ``None`` when guidance is off.
        config: a :class:`TrainConfig`, or a :class:`RunConfig` converted with
            :meth:`TrainConfig.from_run`.
        schedule: diffusion schedule of ``prior``.
        out_dir: when set, receives ``checkpoint.ckpt`` (final, and every
            ``checkpoint_every`` steps) and ``losses.csv``.
        resume: checkpoint to continue from, restoring weights, optimiser
            state and loss history.
        run: full run configuration to embed in checkpoints.
        callback: called with ``(step, report)`` after every step.

    Raises:
        TrainingDivergedError: a non-finite loss; the pre-step weights are
            written to ``out_dir`` first.
    """
    if isinstance(config, RunConfig):
        run = run or config
        config = TrainConfig.from_run(config)
    cfg = config
    if cfg.guidance_active and (prior is None or schedule is None):
        raise ValidationError("guidance is enabled but no prior model/schedule was given")
    table = RayTable(dataset)
    region = table.swept_region()
    weights = cfg.effective_weights
    torch.manual_seed(cfg.seed)

    fld = Field(cfg.field, seed=cfg.seed)
    opt = _optimizer(fld, cfg)
    history: list[tuple] = []
    start = 0
    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        if meta.get("kind") != "field":
            raise CheckpointError(f"{resume} is not a field checkpoint")
        if FieldConfig.from_json(meta["field"]) != cfg.field:
            raise CheckpointError("checkpoint field architecture does not match the configuration")
        fld.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in namespace(arrays, "field").items()})
        optim = namespace(arrays, "optim")
        if optim:
            _load_optim(opt, optim)
        history = [tuple([int(r[0])] + [float(x) for x in r[1:]]) for r in arrays["history/values"]]
        start = int(meta["step"])

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.ckpt" if out is not None else None

    t0 = time.perf_counter()
    fld.train()
    for step in range(start, cfg.iterations):
        lr = lr_at(step, cfg.iterations, cfg.lr_start, cfg.lr_end)
        for group in opt.param_groups:
            group["lr"] = lr
        batch = table.sample(cfg.batch_size, cfg.seed, step)
        gen = _step_generator(cfg.seed, step) if cfg.render.stochastic else None
        pred = render_columns(fld, batch.origins, batch.directions, dataset.probe, cfg.render,
                              standard=not cfg.use_us_rendering, generator=gen)
        target = torch.as_tensor(batch.targets, dtype=pred.dtype)
        guidance = (0.0, 0.0)
        if cfg.guidance_active and step % cfg.guidance_every == 0:
            rng = np.random.default_rng([cfg.seed, step, 1])
            placements = place_patches(region, cfg.guidance_patches, cfg.patch_fraction, rng)
            g_seed = int(rng.integers(0, 2**31 - 1))
            active = (weights.border > 0, weights.scatter > 0)
            lb, ls = guidance_losses(fld, placements, prior, cfg.guidance_step, schedule, g_seed, active)
            guidance = (lb if weights.border > 0 else torch.zeros(()),
                        ls if weights.scatter > 0 else torch.zeros(()))
        loss, report = total_loss(pred, target, guidance, weights, cfg.photometric_reduction)
        if not math.isfinite(report.total):
            if ckpt_path is not None:
                save_training_checkpoint(ckpt_path, fld, opt, step, history, cfg, dataset.probe, run)
                (out / "losses.csv").write_text(history_csv(history))
            raise TrainingDivergedError(
                f"non-finite loss at step {step}", step,
                {"photometric": report.photometric, "L_rho_b": report.border,
                 "L_rho_s": report.scatter, "lr": lr, "checkpoint": str(ckpt_path) if ckpt_path else None},
            )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(fld.parameters(), cfg.grad_clip)
        opt.step()
        history.append((step, report.photometric, report.border, report.scatter, report.total, lr))
        if step % 100 == 0 or step == cfg.iterations - 1:
            log.info("step %d photometric %.5g L_rho_b %.4g L_rho_s %.4g lr %.3g",
                     step, report.photometric, report.border, report.scatter, lr)
        if callback is not None:
            callback(step, report)
        if ckpt_path is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 \
                and step + 1 < cfg.iterations:
            save_training_checkpoint(ckpt_path, fld, opt, step + 1, history, cfg, dataset.probe, run)
    fld.eval()
    if ckpt_path is not None:
        save_training_checkpoint(ckpt_path, fld, opt, cfg.iterations, history, cfg, dataset.probe, run)
        (out / "losses.csv").write_text(history_csv(history))
    return TrainResult(fld, history, cfg, ckpt_path, time.perf_counter() - t0)


# ----------------------------------------------------------------------
# ablations

ABLATIONS = {
    "full": {},
    "w/o L_rho_b": {"use_border_loss": False},
    "w/o L_rho_s": {"use_scatter_loss": False},
    "w/o I(t)": {"use_us_rendering": False},
}


@dataclass
class AblationResult:
    reports: dict[str, list[MetricReport]]
    seeds: tuple[int, ...]

    def mean(self, variant: str, metric: str = "psnr") -> float:
        attr = {"psnr": "mean_psnr", "ssim": "mean_ssim", "ms_ssim": "mean_ms_ssim"}[metric]
        return float(np.mean([getattr(r, attr) for r in self.reports[variant]]))

    def rows(self) -> list[tuple[str, float, float, float]]:
        return [(name, self.mean(name, "psnr"), self.mean(name, "ssim"), self.mean(name, "ms_ssim"))
                for name in self.reports]

    def table(self) -> str:
        lines = [f"{'variant':<14} {'PSNR (dB)':>10} {'SSIM':>8} {'MS-SSIM':>8}"]
        for name, p, s, m in self.rows():
            lines.append(f"{name:<14} {p:>10.3f} {s:>8.4f} {m:>8.4f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "psnr", "ssim", "ms_ssim"])
        for row in self.rows():
            w.writerow([row[0]] + [repr(v) for v in row[1:]])
        return buf.getvalue()


def ablation_suite(dataset: SweepDataset, prior, base: RunConfig, schedule: NoiseSchedule | None = None,
                   seeds: Sequence[int] | None = None, out_dir=None,
                   variants: Sequence[str] = tuple(ABLATIONS)) -> AblationResult:
    """Train and evaluate the full model and its three ablations for every seed."""
    seeds = tuple(seeds) if seeds is not None else (base.seed,)
    reports: dict[str, list[MetricReport]] = {v: [] for v in variants}
    for seed in seeds:
        for name in variants:
            run = base.replace(seed=seed, **ABLATIONS[name])
            sub = None
            if out_dir is not None:
                sub = Path(out_dir) / f"seed{seed}" / name.replace("/", "").replace(" ", "_")
            res = train_field(dataset, prior, run, schedule, out_dir=sub)
            rep = evaluate(res.field, dataset, RenderConfig.from_run(run),
                           standard=not run.use_us_rendering, label=f"{name} seed {seed}")
            log.info("%s seed %d: PSNR %.3f SSIM %.4f", name, seed, rep.mean_psnr, rep.mean_ssim)
            reports[name].append(rep)
    return AblationResult(reports, seeds)


def drop_training_frames(dataset: SweepDataset, every: int = 4) -> SweepDataset:
    """Sparse-view variant: remove every ``every``-th training frame, keep the test split.

    Frames are re-indexed; the returned split marks the surviving test frames.
    """
    train = list(dataset.train_indices)
    dropped = set(train[every - 1::every])
    keep = [i for i in range(len(dataset)) if i not in dropped]
    test_set = set(dataset.test_indices)
    frames = tuple(replace(dataset.frames[i], frame_index=n) for n, i in enumerate(keep))
    test = tuple(n for n, i in enumerate(keep) if i in test_set)
    tr = tuple(n for n, i in enumerate(keep) if i not in test_set)
    return SweepDataset(frames, dataset.probe, tr, test)
