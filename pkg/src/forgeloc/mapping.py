"""Trainable mapping networks: LMM over the image latent, FLMM over SRM residuals, and fusion."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError


@dataclass(frozen=True)
class MappingConfig:
    c_latent: int = 16
    lmm_blocks: int = 4
    lmm_width: int = 64
    patch: int = 4
    grid: int = 16  # latent grid side (tokens per side)
    flmm_depth: int = 4
    flmm_width: int = 128
    flmm_heads: int = 4
    flmm_mlp_ratio: int = 4
    c_f: int | None = None  # defaults to c_latent
    # SRM responses of [0, 1] images have a standard deviation of a few hundredths;
    # this fixed gain lifts them to roughly unit scale before patch embedding
    residual_gain: float = 32.0

    @property
    def c_f_(self) -> int:
        return self.c_latent if self.c_f is None else self.c_f


class ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class LMM(nn.Module):
    """Shape-preserving residual conv stack; ``out = z + head(body(stem(z)))``.

    The head is zero-initialised so a fresh LMM is the identity map.
    """

    def __init__(self, c_latent: int = 16, blocks: int = 4, width: int = 64):
        super().__init__()
        self.c_latent = c_latent
        self.stem = nn.Conv2d(c_latent, width, 3, padding=1)
        self.body = nn.Sequential(*[ResBlock(width) for _ in range(blocks)])
        self.head = nn.Conv2d(width, c_latent, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, z):
        if z.dim() != 4 or z.shape[1] != self.c_latent:
            raise ShapeError(f"LMM expects (N, {self.c_latent}, h, w), got {tuple(z.shape)}")
        return z + self.head(F.silu(self.body(self.stem(z))))


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) * (d // self.heads) ** -0.5
        out = att.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class FLMM(nn.Module):
    """ViT-style encoder lifting an ``(N, 3, H, W)`` residual to an ``(N, c_f, H/p, W/p)`` grid.

    Tokens are the non-overlapping p×p patches in row-major order. Inputs whose
    token grid differs from ``grid × grid`` (e.g. resized evaluation images) use
    a resampled positional table.
    """

    def __init__(self, patch: int = 4, grid: int = 16, width: int = 128, depth: int = 4, heads: int = 4,
                 c_f: int = 16, mlp_ratio: int = 4, in_ch: int = 3, residual_gain: float = 1.0):
        super().__init__()
        self.patch = patch
        self.residual_gain = residual_gain
        self.grid = grid
        self.embed = nn.Conv2d(in_ch, width, patch, stride=patch)
        self.pos = nn.Parameter(torch.zeros(1, grid * grid, width))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.Sequential(*[TransformerBlock(width, heads, mlp_ratio) for _ in range(depth)])
        self.norm = nn.LayerNorm(width)
        self.out = nn.Linear(width, c_f)

    def pos_for(self, gh: int, gw: int) -> torch.Tensor:
        """Positional table for a ``gh × gw`` token grid, bilinearly resampled if it differs from training."""
        if (gh, gw) == (self.grid, self.grid):
            return self.pos
        table = self.pos.transpose(1, 2).reshape(1, -1, self.grid, self.grid)
        table = F.interpolate(table, size=(gh, gw), mode="bilinear", align_corners=False)
        return table.flatten(2).transpose(1, 2)

    def forward(self, f):
        n, _, h, w = f.shape
        if h % self.patch or w % self.patch:
            raise ShapeError(f"residual {h}x{w} not divisible by patch size {self.patch}")
        gh, gw = h // self.patch, w // self.patch
        tokens = self.embed(f * self.residual_gain).flatten(2).transpose(1, 2) + self.pos_for(gh, gw)
        tokens = self.out(self.norm(self.blocks(tokens)))
        return tokens.transpose(1, 2).reshape(n, -1, gh, gw)


class Fusion(nn.Module):
    """Channel concatenation followed by a 1×1 projection back to ``c_latent`` channels.

    Initialised to pass the LMM latent through unchanged.
    """

    def __init__(self, c_latent: int = 16, c_f: int = 16):
        super().__init__()
        self.c_latent, self.c_f = c_latent, c_f
        self.proj = nn.Conv2d(c_latent + c_f, c_latent, 1)
        with torch.no_grad():
            self.proj.weight.zero_()
            self.proj.bias.zero_()
            self.proj.weight[:, :c_latent, 0, 0] = torch.eye(c_latent)

    def forward(self, z_lmm, z_f):
        if z_lmm.shape[-2:] != z_f.shape[-2:]:
            raise ShapeError(f"spatial shapes differ: {tuple(z_lmm.shape[-2:])} vs {tuple(z_f.shape[-2:])}")
        if z_lmm.shape[1] != self.c_latent or z_f.shape[1] != self.c_f:
            raise ShapeError(f"channel counts {z_lmm.shape[1]}+{z_f.shape[1]} != {self.c_latent}+{self.c_f}")
        return self.proj(torch.cat([z_lmm, z_f], dim=1))


class MappingNets(nn.Module):
    """LMM + FLMM + fusion bundle with ablation switches."""

    def __init__(self, config: MappingConfig = MappingConfig()):
        super().__init__()
        self.config = config
        self.lmm = LMM(config.c_latent, config.lmm_blocks, config.lmm_width)
        self.flmm = FLMM(config.patch, config.grid, config.flmm_width, config.flmm_depth, config.flmm_heads,
                         config.c_f_, config.flmm_mlp_ratio, residual_gain=config.residual_gain)
        self.fusion = Fusion(config.c_latent, config.c_f_)

    def forward(self, z_i, residual, ablation=frozenset()):
        if "no_srm_flmm" in ablation:
            n, _, h, w = z_i.shape
            z_f = z_i.new_zeros(n, self.config.c_f_, h, w)
        else:
            z_f = self.flmm(residual)
        if "no_vae_lmm" in ablation:
            z_lat = torch.zeros_like(z_i)
        elif "no_lmm" in ablation:
            z_lat = z_i
        else:
            z_lat = self.lmm(z_i)
        return self.fusion(z_lat, z_f)
