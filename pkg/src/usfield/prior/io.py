"""Prior persistence in the shared checkpoint container.

Base weights live under ``prior/``; adapters under ``prior/adapter/`` with
their rank and scale in the header, so an adapter file can be shipped alone
and attached to the base it was trained on (checked by parameter hash).
"""

from __future__ import annotations

from pathlib import Path

from ..core.checkpoint import load_checkpoint, namespace, prefixed, save_checkpoint
from ..core.errors import CheckpointError
from .denoiser import Denoiser, DenoiserConfig
from .lora import AdaptedDenoiser, parameter_hash
from .schedule import NoiseSchedule


def _schedule_meta(schedule: NoiseSchedule) -> dict:
    return {"T": schedule.T, "beta_start": schedule.beta_start, "beta_end": schedule.beta_end}


def save_base(path, base: Denoiser, schedule: NoiseSchedule, extra: dict | None = None) -> Path:
    meta = {
        "kind": "prior",
        "denoiser": base.config.to_json(),
        "schedule": _schedule_meta(schedule),
        "base_hash": parameter_hash(base),
        **(extra or {}),
    }
    return save_checkpoint(prefixed(base.state_arrays(), "prior"), path, meta)


def save_adapter(path, adapter: AdaptedDenoiser, schedule: NoiseSchedule,
                 extra: dict | None = None) -> Path:
    meta = {
        "kind": "adapter",
        "rank": adapter.rank,
        "scale": adapter.scale,
        "base_hash": parameter_hash(adapter.base),
        "schedule": _schedule_meta(schedule),
        **(extra or {}),
    }
    return save_checkpoint(prefixed(adapter.adapter_arrays(), "prior/adapter"), path, meta)


def load_base(path) -> tuple[Denoiser, NoiseSchedule, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "prior":
        raise CheckpointError(f"{path} is not a base prior checkpoint")
    base_arrays = {k: v for k, v in namespace(arrays, "prior").items() if not k.startswith("adapter/")}
    model = Denoiser.from_arrays(base_arrays, DenoiserConfig.from_json(meta["denoiser"]))
    model.eval()
    return model, NoiseSchedule(**meta["schedule"]), meta


def load_adapter(path, base: Denoiser) -> tuple[AdaptedDenoiser, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "adapter":
        raise CheckpointError(f"{path} is not an adapter checkpoint")
    if meta["base_hash"] != parameter_hash(base):
        raise CheckpointError("adapter was trained on a different base model")
    model = AdaptedDenoiser.from_arrays(base, namespace(arrays, "prior/adapter"), meta["rank"], meta["scale"])
    model.eval()
    return model, meta


def save_prior(path, base: Denoiser, schedule: NoiseSchedule, adapter: AdaptedDenoiser | None = None,
               adapter_path=None) -> None:
    """Write the base checkpoint and, when given, the adapter next to it."""
    save_base(path, base, schedule)
    if adapter is not None:
        save_adapter(adapter_path or Path(str(path) + ".adapter"), adapter, schedule)


def load_prior(path, adapter_path=None):
    """Load a base prior, wrapped in its adapter when ``adapter_path`` is given.

    Returns ``(model, schedule)``.
    """
    base, schedule, _ = load_base(path)
    if adapter_path is None:
        return base, schedule
    adapter, _ = load_adapter(adapter_path, base)
    return adapter, schedule
