"""3-D convolutional noise predictor for ``32^3`` single-channel grids."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core.errors import ValidationError
from ..core.types import PATCH_SIZE


@dataclass(frozen=True)
class DenoiserConfig:
    """UNet shape. The desk preset has three resolution levels and no attention;
    ``full()`` mirrors the larger pretrained layout (width 32, four levels,
    two residual blocks per level, attention at the two coarsest levels)."""

    width: int = 16
    mults: tuple[int, ...] = (1, 2, 4)
    res_blocks: int = 1
    attention_levels: tuple[int, ...] = ()
    # encoder blocks at full resolution; the desk preset skips them for speed
    first_level_blocks: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mults", tuple(int(m) for m in self.mults))
        object.__setattr__(self, "attention_levels", tuple(int(a) for a in self.attention_levels))
        if self.width < 1 or not self.mults or self.res_blocks < 1 or self.first_level_blocks < 0:
            raise ValidationError("invalid denoiser configuration")
        if PATCH_SIZE % (2 ** (len(self.mults) - 1)):
            raise ValidationError("too many resolution levels for 32^3 input")

    @classmethod
    def full(cls) -> "DenoiserConfig":
        return cls(32, (1, 2, 4, 8), 2, (2, 3), 2)

    def to_json(self) -> dict:
        d = asdict(self)
        d["mults"] = list(self.mults)
        d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DenoiserConfig":
        return cls(d["width"], tuple(d["mults"]), d["res_blocks"], tuple(d["attention_levels"]),
                   d.get("first_level_blocks", 0))


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.to(torch.float32)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(ch: int) -> nn.GroupNorm:
    groups = 8 if ch % 8 == 0 else 4 if ch % 4 == 0 else 1
    return nn.GroupNorm(groups, ch)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb: int):
        super().__init__()
        self.norm1 = _norm(c_in)
        self.conv1 = nn.Conv3d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(temb, c_out)
        self.norm2 = _norm(c_out)
        self.conv2 = nn.Conv3d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv3d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(emb))[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.norm = _norm(ch)
        self.qkv = nn.Conv3d(ch, 3 * ch, 1)
        self.proj = nn.Conv3d(ch, ch, 1)

    def forward(self, x, emb=None):
        b, c = x.shape[:2]
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, -1).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(x.shape)
        return x + self.proj(out)


class Denoiser(nn.Module):
    """Noise predictor ``eps(x_t, t)``; input and output are ``(B, 32, 32, 32)``."""

    def __init__(self, config: DenoiserConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = cfg = config or DenoiserConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(seed))
            self._build(cfg)

    def _build(self, cfg: DenoiserConfig) -> None:
        w = cfg.width
        temb = 4 * w
        self.temb_dim = w
        self.time_mlp = nn.Sequential(nn.Linear(w, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.inp = nn.Conv3d(1, w, 3, padding=1)
        chans = [w * m for m in cfg.mults]

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        skips = [w]
        c = w
        for lvl, ch in enumerate(chans):
            blocks = nn.ModuleList()
            n_blocks = cfg.first_level_blocks if lvl == 0 else cfg.res_blocks
            if n_blocks == 0 and c != ch:
                n_blocks = 1
            for _ in range(n_blocks):
                blocks.append(ResBlock(c, ch, temb))
                c = ch
                if lvl in cfg.attention_levels:
                    blocks.append(AttentionBlock(c))
            self.down.append(blocks)
            skips.append(c)
            last = lvl == len(chans) - 1
            self.downsample.append(nn.Identity() if last else nn.Conv3d(c, c, 3, stride=2, padding=1))

        self.mid = nn.ModuleList([ResBlock(c, c, temb)])
        if cfg.attention_levels:
            self.mid.append(AttentionBlock(c))
        self.mid.append(ResBlock(c, c, temb))

        self.up = nn.ModuleList()
        for lvl in reversed(range(len(chans))):
            ch = chans[lvl]
            blocks = nn.ModuleList()
            skip = skips.pop()
            for i in range(cfg.res_blocks):
                blocks.append(ResBlock(c + (skip if i == 0 else 0), ch, temb))
                c = ch
                if lvl in cfg.attention_levels:
                    blocks.append(AttentionBlock(c))
            self.up.append(blocks)
        self.out_norm = _norm(c + skips[-1])
        self.out = nn.Conv3d(c + skips.pop(), 1, 3, padding=1)

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        squeeze = x.ndim == 4
        if squeeze:
            x = x[:, None]
        if x.shape[-3:] != (PATCH_SIZE,) * 3:
            raise ValidationError(f"denoiser expects 32^3 grids, got {tuple(x.shape[-3:])}")
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        emb = self.time_mlp(timestep_embedding(t, self.temb_dim))

        h = self.inp(x)
        stack = [h]
        for blocks, down in zip(self.down, self.downsample):
            for blk in blocks:
                h = blk(h, emb)
            stack.append(h)
            h = down(h)
        for blk in self.mid:
            h = blk(h, emb)
        for blocks in self.up:
            skip = stack.pop()
            if h.shape[-1] != skip.shape[-1]:
                h = F.interpolate(h, size=skip.shape[-3:], mode="nearest")
            h = torch.cat([h, skip], dim=1)
            for blk in blocks:
                h = blk(h, emb)
        skip = stack.pop()
        h = torch.cat([h, skip], dim=1)
        out = self.out(F.silu(self.out_norm(h)))
        return out[:, 0] if squeeze else out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], config: DenoiserConfig) -> "Denoiser":
        model = cls(config)
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
        return model


def adaptable_weights(model: nn.Module) -> list[str]:
    """Names of every convolution and dense weight, the targets of low-rank adaptation."""
    names = []
    for mod_name, mod in model.named_modules():
        if isinstance(mod, (nn.Conv3d, nn.Linear)):
            names.append(f"{mod_name}.weight" if mod_name else "weight")
    return names
