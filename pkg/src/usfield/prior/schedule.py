"""Variance schedules for the voxel diffusion prior."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core.errors import ValidationError


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear variance schedule over steps ``1..T``.

    Step 0 is the clean sample: ``betas[0] = 0`` and ``alpha_bar[0] = 1``, so
    ``alpha_bar[t] = prod_{s <= t} (1 - betas[s])``.
    """

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    betas: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.T < 1:
            raise ValidationError("schedule needs T >= 1")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValidationError("need 0 < beta_start <= beta_end < 1")
        b = np.concatenate([[0.0], np.linspace(self.beta_start, self.beta_end, self.T)])
        ab = np.cumprod(1.0 - b)
        b.setflags(write=False)
        ab.setflags(write=False)
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "alpha_bar", ab)

    @classmethod
    def desk(cls) -> "NoiseSchedule":
        """T = 100 with the endpoints scaled by 1000 / T so the last step is near pure noise."""
        return cls(100, 1e-3, 0.2)

    @classmethod
    def from_run(cls, run) -> "NoiseSchedule":
        return cls(run.diffusion_steps, run.beta_start, run.beta_end)

    def check_step(self, t) -> None:
        ts = np.asarray(t)
        if np.any(ts < 0) or np.any(ts > self.T):
            raise ValidationError(f"diffusion step {t} outside [0, {self.T}]")
