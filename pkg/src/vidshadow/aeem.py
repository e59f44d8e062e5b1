"""Adaptive exposure estimation: per-patch transformer regression of [w, b].

The input frame is split into a small grid of patches (one token each), the
tokens run through a pre-norm transformer encoder, and a linear head emits
per-patch relighting coefficients. The gain is parameterized as
``w = 1 + softplus(h)`` so relighting always brightens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ExposureParams, Frame, ValidationError


@dataclass(frozen=True)
class AeemConfig:
    grid: int = 2            # N = grid**2 patches
    token_dim: int = 256
    n_blocks: int = 6
    n_heads: int = 4
    mlp_ratio: float = 4.0
    patch_pool: int = 32     # patches are area-resized to patch_pool**2 before projection
    per_channel: bool = True # False: one scalar [w, b] per patch, broadcast over RGB

    def __post_init__(self):
        if self.token_dim % self.n_heads:
            raise ValidationError("token_dim must be divisible by n_heads")
        if self.grid < 1 or self.patch_pool < 1 or self.n_blocks < 1:
            raise ValidationError("grid, patch_pool, n_blocks must be >= 1")

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid


class SelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    """Pre-norm block: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class AeemModel(nn.Module):
    def __init__(self, cfg: AeemConfig):
        super().__init__()
        self.cfg = cfg
        in_dim = 3 * cfg.patch_pool * cfg.patch_pool
        self.proj = nn.Linear(in_dim, cfg.token_dim)
        self.pos = nn.Parameter(torch.zeros(1, cfg.n_patches, cfg.token_dim))
        nn.init.normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.token_dim, cfg.n_heads, cfg.mlp_ratio)
            for _ in range(cfg.n_blocks)
        )
        self.norm = nn.LayerNorm(cfg.token_dim)
        self.head = nn.Linear(cfg.token_dim, 6 if cfg.per_channel else 2)

    def forward(self, frames: torch.Tensor):
        """frames: (B, 3, H, W) -> (w, b), each (B, N, 3)."""
        b, _, h, w = frames.shape
        g = self.cfg.grid
        if h % g or w % g:
            raise ValidationError(f"frame dims {h}x{w} not divisible by grid {g}")
        ph, pw = h // g, w // g
        # row-major patches: token n = r * grid + c
        patches = frames.reshape(b, 3, g, ph, g, pw).permute(0, 2, 4, 1, 3, 5)
        patches = patches.reshape(b * g * g, 3, ph, pw)
        pooled = F.adaptive_avg_pool2d(patches, self.cfg.patch_pool)
        tokens = self.proj(pooled.reshape(b, g * g, -1))
        x = tokens + self.pos
        for blk in self.blocks:
            x = blk(x)
        out = self.head(self.norm(x))
        if self.cfg.per_channel:
            w_hat = 1.0 + F.softplus(out[..., :3])
            b_hat = out[..., 3:]
        else:
            w_hat = (1.0 + F.softplus(out[..., :1])).expand(-1, -1, 3)
            b_hat = out[..., 1:].expand(-1, -1, 3)
        return w_hat, b_hat


def estimate_exposure(model: AeemModel, frame: Frame) -> ExposureParams:
    """Run the estimator on one frame; deterministic for fixed parameters."""
    x = torch.from_numpy(np.array(frame.data)).unsqueeze(0)
    x = x.to(next(model.parameters()).dtype)
    with torch.no_grad():
        w, b = model(x)
    return ExposureParams.from_arrays(w[0].double().numpy(), b[0].double().numpy())


def relight_tensor(frames: torch.Tensor, w: torch.Tensor, b: torch.Tensor,
                   grid: int, clamp: bool = True) -> torch.Tensor:
    """Differentiable per-patch affine relighting of (B, 3, H, W) frames.

    ``w`` and ``b`` are (B, N, 3) in row-major patch order.
    """
    bsz, _, h, ww = frames.shape
    if h % grid or ww % grid:
        raise ValidationError(f"frame dims {h}x{ww} not divisible by grid {grid}")
    ph, pw = h // grid, ww // grid
    x = frames.reshape(bsz, 3, grid, ph, grid, pw)
    wmap = w.reshape(bsz, grid, grid, 3).permute(0, 3, 1, 2)[:, :, :, None, :, None]
    bmap = b.reshape(bsz, grid, grid, 3).permute(0, 3, 1, 2)[:, :, :, None, :, None]
    out = (x * wmap + bmap).reshape(bsz, 3, h, ww)
    return out.clamp(0.0, 1.0) if clamp else out


def relight(frame: Frame, params: ExposureParams) -> Frame:
    """Re-expose one frame by its per-patch [w, b]; output clamped to [0, 1]."""
    g = params.grid
    _, h, w = frame.data.shape
    if h % g or w % g:
        raise ValidationError(f"params grid {g} does not match frame dims {h}x{w}")
    wv, bv = params.as_arrays()
    x = torch.from_numpy(frame.data.astype(np.float64)).unsqueeze(0)
    out = relight_tensor(x, torch.from_numpy(wv).unsqueeze(0),
                         torch.from_numpy(bv).unsqueeze(0), g)
    return Frame(out[0].numpy().astype(np.float32))
