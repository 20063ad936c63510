"""Coordinate network mapping a 3-D point to five acoustic parameters."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core.errors import ValidationError
from .core.types import ParameterSample, as_point


@dataclass(frozen=True)
class FieldConfig:
    n_layers: int = 8
    hidden_width: int = 256
    skip_at_layer: int = 5
    pe_frequencies: int = 10
    # pre-activation offsets of the five heads; keeps the initial medium mostly
    # transparent so intensity survives to the bottom of the frame
    output_bias: tuple[float, float, float, float, float] = (-2.0, -5.0, -5.0, 0.0, 0.0)

    def __post_init__(self):
        if self.n_layers < 2:
            raise ValidationError("n_layers must be >= 2")
        if not 1 <= self.skip_at_layer < self.n_layers:
            raise ValidationError("skip_at_layer must satisfy 1 <= skip < n_layers")
        if self.pe_frequencies < 0:
            raise ValidationError("pe_frequencies must be >= 0")
        if self.hidden_width < 1:
            raise ValidationError("hidden_width must be >= 1")
        object.__setattr__(self, "output_bias", tuple(float(b) for b in self.output_bias))

    @classmethod
    def desk(cls) -> "FieldConfig":
        return cls(n_layers=4, hidden_width=64, skip_at_layer=2, pe_frequencies=6)

    @property
    def encoded_dim(self) -> int:
        return 3 + 6 * self.pe_frequencies

    def to_json(self) -> dict:
        d = asdict(self)
        d["output_bias"] = list(self.output_bias)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "FieldConfig":
        d = dict(d)
        if "output_bias" in d:
            d["output_bias"] = tuple(d["output_bias"])
        return cls(**d)


def positional_encode(q: torch.Tensor, n_freqs: int) -> torch.Tensor:
    """``(q, sin(2^0 pi q), cos(2^0 pi q), ..., sin(2^{L-1} pi q), cos(2^{L-1} pi q))``.

    Works on any ``(..., 3)`` tensor; output has ``3 + 6 L`` channels.
    """
    q = torch.as_tensor(q)
    parts = [q]
    for k in range(n_freqs):
        arg = (2.0**k * math.pi) * q
        parts.append(torch.sin(arg))
        parts.append(torch.cos(arg))
    return torch.cat(parts, dim=-1)


class Field(nn.Module):
    """ReLU MLP with one skip connection and range-constrained output heads.

    Attenuation goes through softplus (non-negative); the other four outputs
    through a logistic squash into [0, 1]. No view-direction input.
    """

    def __init__(self, config: FieldConfig | None = None, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.config = config or FieldConfig.desk()
        c = self.config
        enc = c.encoded_dim
        layers = []
        for i in range(c.n_layers):
            d_in = enc if i == 0 else c.hidden_width
            if i == c.skip_at_layer:
                d_in += enc
            layers.append(nn.Linear(d_in, c.hidden_width, dtype=dtype))
        self.layers = nn.ModuleList(layers)
        self.head = nn.Linear(c.hidden_width, 5, dtype=dtype)
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(int(seed))
        for lin in list(self.layers) + [self.head]:
            bound = 1.0 / math.sqrt(lin.in_features)
            lin.weight.copy_(torch.rand(lin.weight.shape, generator=g, dtype=torch.float64) * 2 * bound - bound)
            lin.bias.copy_(torch.rand(lin.bias.shape, generator=g, dtype=torch.float64) * 2 * bound - bound)
        self.head.bias.add_(torch.tensor(self.config.output_bias, dtype=self.head.bias.dtype))

    def raw(self, points: torch.Tensor) -> torch.Tensor:
        """Pre-activation head outputs, ``(N, 5)``."""
        enc = positional_encode(points, self.config.pe_frequencies)
        h = enc
        for i, lin in enumerate(self.layers):
            if i == self.config.skip_at_layer:
                h = torch.cat([h, enc], dim=-1)
            h = F.relu(lin(h))
        return self.head(h)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        return activate(self.raw(points))

    # -- persistence ----------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], config: FieldConfig) -> "Field":
        dtype = torch.from_numpy(np.asarray(next(iter(arrays.values())))).dtype
        f = cls(config, dtype=dtype)
        sd = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
        f.load_state_dict(sd, strict=True)
        return f


def activate(raw: torch.Tensor) -> torch.Tensor:
    return torch.cat([F.softplus(raw[..., :1]), torch.sigmoid(raw[..., 1:])], dim=-1)


def field_eval_batch(state: Field, points) -> torch.Tensor:
    """Evaluate the field at ``(N, 3)`` points; returns ``(N, 5)`` parameters."""
    p = torch.as_tensor(points, dtype=next(state.parameters()).dtype)
    if p.ndim != 2 or p.shape[-1] != 3:
        raise ValidationError(f"points must be (N, 3), got {tuple(p.shape)}")
    if not torch.isfinite(p).all():
        raise ValidationError("non-finite query point")
    return state(p)


def field_eval(state: Field, q) -> ParameterSample:
    """Parameters at a single point, as a validated :class:`ParameterSample`."""
    p = as_point(q)
    with torch.no_grad():
        out = field_eval_batch(state, p[None, :])[0]
    return ParameterSample.from_array(out.double().numpy())
