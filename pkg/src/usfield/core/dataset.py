"""Reading and writing sweep directories.

Layout::

    probe.json          probe geometry
    poses.json          [{"frame": int, "matrix": [16 floats, row-major]}, ...]
    frames/00000.png    8-bit grayscale, one per pose
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import LoadError, ValidationError
from .types import Pose, ProbeConfig, ProbeFrame, SweepDataset

log = logging.getLogger(__name__)


def _read_json(path: Path):
    if not path.is_file():
        raise LoadError(f"missing required file {path.name} in {path.parent}", path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path.name} is not valid JSON: {exc}", path) from exc


def frame_filename(index: int) -> str:
    return f"{index:05d}.png"


def load_dataset(path) -> SweepDataset:
    """Load a sweep directory; frames are ordered by index and split every 8th from 0."""
    root = Path(path)
    if not root.is_dir():
        raise LoadError(f"dataset directory {root} does not exist", root)
    probe = ProbeConfig.from_json(_read_json(root / "probe.json"))
    pose_entries = _read_json(root / "poses.json")
    if not isinstance(pose_entries, list):
        raise ValidationError("poses.json must hold a list")
    frames_dir = root / "frames"
    if not frames_dir.is_dir():
        raise LoadError(f"missing frames/ directory in {root}", frames_dir)

    frames = []
    for entry in sorted(pose_entries, key=lambda e: int(e["frame"])):
        idx = int(entry["frame"])
        pose = Pose(np.asarray(entry["matrix"], dtype=np.float64).reshape(4, 4))
        fpath = frames_dir / frame_filename(idx)
        if not fpath.is_file():
            raise LoadError(f"missing frame image {fpath.name}", fpath)
        with Image.open(fpath) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        if arr.shape != (probe.n_samples, probe.n_scanlines):
            raise ValidationError(
                f"{fpath.name} is {arr.shape[0]}x{arr.shape[1]}, probe expects "
                f"{probe.n_samples}x{probe.n_scanlines}"
            )
        frames.append(ProbeFrame(arr, pose, idx))
    if [f.frame_index for f in frames] != list(range(len(frames))):
        raise ValidationError("frame indices must be contiguous from 0")
    ds = SweepDataset(tuple(frames), probe)
    if not ds.train_indices:
        log.warning("sweep of %d frame(s) leaves no training frames", len(ds))
    return ds


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_png(image: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(image), mode="L").save(path)


def write_dataset(ds: SweepDataset, path) -> Path:
    """Write ``ds`` in the directory layout read by :func:`load_dataset`."""
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "probe.json").write_text(json.dumps(ds.probe.to_json(), indent=2))
    poses = [
        {"frame": int(f.frame_index), "matrix": [float(v) for v in f.pose.matrix.reshape(-1)]}
        for f in ds.frames
    ]
    (root / "poses.json").write_text(json.dumps(poses, indent=1))
    for f in ds.frames:
        tmp = root / "frames" / (frame_filename(f.frame_index) + ".tmp")
        with open(tmp, "wb") as fh:
            Image.fromarray(to_uint8(f.image), mode="L").save(fh, format="PNG")
        os.replace(tmp, root / "frames" / frame_filename(f.frame_index))
    return root
