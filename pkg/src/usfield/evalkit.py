"""Image-quality metrics and test-split evaluation reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import ndimage

from .core.errors import ValidationError
from .core.types import SweepDataset
from .usrender import RenderConfig, render_frame

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

#: Optional perceptual scorer: ``scorer(prediction, reference) -> float``.
PerceptualScorer = Callable[[np.ndarray, np.ndarray], float]


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give :data:`PSNR_CAP`."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    w = np.exp(-0.5 * (r / sigma) ** 2)
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, w, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, w, axis=1, mode="reflect")
    pad = (w.size - 1) // 2
    return out[pad:img.shape[0] - pad, pad:img.shape[1] - pad]


def _ssim_terms(a, b, data_range, window, sigma, k1, k2):
    if min(a.shape) < window:
        raise ValidationError(f"images of shape {a.shape} are smaller than the {window}x{window} window")
    w = _gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a ** 2
    var_b = _filter_valid(b * b, w) - mu_b ** 2
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum, cs


def ssim(a, b, data_range: float = 1.0, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over all fully covered 11x11 Gaussian windows."""
    a, b = _pair(a, b)
    lum, cs = _ssim_terms(a, b, data_range, window, sigma, k1, k2)
    return float(np.mean(lum * cs))


def ms_ssim(a, b, data_range: float = 1.0, scales: int = 5, window: int = 11, sigma: float = 1.5,
            k1: float = 0.01, k2: float = 0.03) -> float:
    """Multi-scale SSIM with the standard five-scale weights.

    Images too small for ``scales`` dyadic levels use fewer scales, with the
    retained weights renormalised, and a warning is issued.
    """
    a, b = _pair(a, b)
    usable = 1
    while usable < scales and min(a.shape) // 2 ** usable >= window:
        usable += 1
    if usable < scales:
        warnings.warn(f"image {a.shape} supports only {usable} of {scales} MS-SSIM scales", stacklevel=2)
    weights = np.asarray(MS_SSIM_WEIGHTS[:usable])
    weights = weights / weights.sum()
    values = []
    for level in range(usable):
        lum, cs = _ssim_terms(a, b, data_range, window, sigma, k1, k2)
        if level == usable - 1:
            values.append(np.mean(lum * cs))
        else:
            values.append(np.mean(cs))
            a = _downsample(a)
            b = _downsample(b)
    values = np.maximum(np.asarray(values), 0.0)
    return float(np.prod(values ** weights))


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    x = img[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


# ----------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    """Per-frame metrics for a test split plus their aggregates."""

    frame_indices: list[int]
    psnr: list[float]
    ssim: list[float]
    ms_ssim: list[float]
    perceptual: list[float] | None = None
    label: str = ""
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frame_indices)

    @staticmethod
    def _stats(values: Sequence[float]) -> tuple[float, float]:
        v = np.asarray(values, dtype=np.float64)
        return float(v.mean()), float(v.std())

    @property
    def mean_psnr(self) -> float:
        return self._stats(self.psnr)[0]

    @property
    def mean_ssim(self) -> float:
        return self._stats(self.ssim)[0]

    @property
    def mean_ms_ssim(self) -> float:
        return self._stats(self.ms_ssim)[0]

    def summary(self) -> dict:
        out = {}
        for name in ("psnr", "ssim", "ms_ssim", "perceptual"):
            vals = getattr(self, name)
            if vals is None:
                continue
            mean, std = self._stats(vals)
            out[name] = {"mean": mean, "std": std}
        return out

    def to_json(self) -> dict:
        rows = []
        for n, idx in enumerate(self.frame_indices):
            row = {"frame": idx, "psnr": self.psnr[n], "ssim": self.ssim[n], "ms_ssim": self.ms_ssim[n]}
            if self.perceptual is not None:
                row["perceptual"] = self.perceptual[n]
            rows.append(row)
        return {"label": self.label, "frames": rows, "summary": self.summary(), **self.extra}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["frame", "psnr", "ssim", "ms_ssim"] + (["perceptual"] if self.perceptual is not None else [])
        w.writerow(cols)
        for row in self.to_json()["frames"]:
            w.writerow([row[c] for c in cols])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'frame':>6} {'PSNR (dB)':>10} {'SSIM':>8} {'MS-SSIM':>8}"]
        for n, idx in enumerate(self.frame_indices):
            lines.append(f"{idx:>6} {self.psnr[n]:>10.3f} {self.ssim[n]:>8.4f} {self.ms_ssim[n]:>8.4f}")
        s = self.summary()
        lines.append(f"{'mean':>6} {s['psnr']['mean']:>10.3f} {s['ssim']['mean']:>8.4f} {s['ms_ssim']['mean']:>8.4f}")
        lines.append(f"{'std':>6} {s['psnr']['std']:>10.3f} {s['ssim']['std']:>8.4f} {s['ms_ssim']['std']:>8.4f}")
        return "\n".join(lines)

    def write(self, path, csv_path=None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        if csv_path is not None:
            Path(csv_path).write_text(self.to_csv())
        return path


def compare_frames(predictions: Sequence[np.ndarray], references: Sequence[np.ndarray],
                   frame_indices: Sequence[int], perceptual: PerceptualScorer | None = None,
                   label: str = "") -> MetricReport:
    """Score each prediction against its reference frame."""
    if len(predictions) != len(references) or len(predictions) != len(frame_indices):
        raise ValidationError("prediction, reference and index counts differ")
    if len(predictions) == 0:
        raise ValidationError("nothing to evaluate: the test split is empty")
    p_vals, s_vals, m_vals, l_vals = [], [], [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for pred, ref in zip(predictions, references):
            p_vals.append(psnr(pred, ref))
            s_vals.append(ssim(pred, ref))
            m_vals.append(ms_ssim(pred, ref))
            if perceptual is not None:
                l_vals.append(float(perceptual(pred, ref)))
    return MetricReport(list(frame_indices), p_vals, s_vals, m_vals,
                        l_vals if perceptual is not None else None, label)


def render_test_frames(field_state, dataset: SweepDataset, cfg: RenderConfig | None = None,
                       standard: bool = False, indices: Sequence[int] | None = None) -> list[np.ndarray]:
    idx = dataset.test_indices if indices is None else indices
    out = []
    with torch.no_grad():
        for i in idx:
            img = render_frame(field_state, dataset.frames[i].pose, dataset.probe, cfg, standard=standard, seed=i)
            out.append(img.double().numpy())
    return out


def evaluate(source, dataset: SweepDataset, cfg: RenderConfig | None = None, standard: bool = False,
             perceptual: PerceptualScorer | None = None, label: str = "") -> MetricReport:
    """Metrics on the test split of ``dataset``.

    Args:
        source: a field (any callable ``(N, 3) -> (N, 5)``) whose renders are
            scored, or a :class:`SweepDataset` of pre-rendered frames aligned
            with ``dataset`` by position.
        dataset: reference sweep; only its test split is used.
        cfg: rendering settings for field sources.
        standard: render with the standard volume path instead of the
            ultrasound model.
        perceptual: optional learned perceptual scorer.
        label: name stored in the report.
    """
    idx = list(dataset.test_indices)
    if not idx:
        raise ValidationError("test split is empty")
    refs = [dataset.frames[i].image for i in idx]
    if isinstance(source, SweepDataset):
        if len(source) < len(dataset):
            raise ValidationError(f"prediction set has {len(source)} frames, need {len(dataset)}")
        preds = [source.frames[i].image for i in idx]
    else:
        preds = render_test_frames(source, dataset, cfg, standard, idx)
    return compare_frames(preds, refs, idx, perceptual, label)
