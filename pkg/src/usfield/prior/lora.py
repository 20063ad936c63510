"""Low-rank adapters over a frozen denoiser: ``W' = W + delta * (A @ B)``."""

from __future__ import annotations

import hashlib
import math

import numpy as np
import torch
import torch.nn as nn
from torch.func import functional_call

from ..core.errors import ValidationError
from .denoiser import Denoiser, adaptable_weights


def _key(name: str) -> str:
    return name.replace(".", "__")


class AdaptedDenoiser(nn.Module):
    """A frozen :class:`Denoiser` plus trainable ``(A, B)`` pairs for each adapted weight.

    For a weight of shape ``(d_out, ...)`` flattened to ``(d_out, d_in)``, ``A`` is
    ``(d_out, r)`` and ``B`` is ``(r, d_in)``. ``B`` starts at zero, so a fresh
    adapter reproduces the base model exactly.
    """

    def __init__(self, base: Denoiser, rank: int = 4, scale: float = 1.0, seed: int = 0,
                 targets: list[str] | None = None):
        super().__init__()
        if rank < 1:
            raise ValidationError("adapter rank must be >= 1")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = int(rank)
        self.scale = float(scale)
        self.targets = list(targets) if targets is not None else adaptable_weights(base)
        params = dict(base.named_parameters())
        g = torch.Generator().manual_seed(int(seed))
        self.A = nn.ParameterDict()
        self.B = nn.ParameterDict()
        for name in self.targets:
            w = params[name]
            d_out, d_in = w.shape[0], int(np.prod(w.shape[1:]))
            r = self.rank
            bound = 1.0 / math.sqrt(d_in)
            a = (torch.rand(d_out, r, generator=g, dtype=w.dtype) * 2 - 1) * bound
            self.A[_key(name)] = nn.Parameter(a)
            self.B[_key(name)] = nn.Parameter(torch.zeros(r, d_in, dtype=w.dtype))

    def adapter_parameters(self):
        return list(self.A.values()) + list(self.B.values())

    def effective_weights(self) -> dict[str, torch.Tensor]:
        params = dict(self.base.named_parameters())
        out = {}
        for name in self.targets:
            w = params[name]
            delta = (self.A[_key(name)] @ self.B[_key(name)]).reshape(w.shape)
            out[name] = w + self.scale * delta
        return out

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        return functional_call(self.base, self.effective_weights(), (x, t))

    # -- persistence ----------------------------------------------------
    def adapter_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.targets:
            out[f"A/{name}"] = self.A[_key(name)].detach().cpu().numpy().copy()
            out[f"B/{name}"] = self.B[_key(name)].detach().cpu().numpy().copy()
        return out

    @classmethod
    def from_arrays(cls, base: Denoiser, arrays: dict[str, np.ndarray], rank: int, scale: float):
        targets = sorted(k[2:] for k in arrays if k.startswith("A/"))
        model = cls(base, rank, scale, targets=targets)
        with torch.no_grad():
            for name in targets:
                model.A[_key(name)].copy_(torch.from_numpy(arrays[f"A/{name}"]))
                model.B[_key(name)].copy_(torch.from_numpy(arrays[f"B/{name}"]))
        return model


def parameter_hash(model: nn.Module) -> str:
    """SHA-256 over every tensor of ``model.state_dict()`` (names and raw bytes)."""
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
