"""Multi-characteristics fusion: channel-attention blocks and the final
progressive residual prediction.

Every component is residual, so a network with all-zero weights is the
identity map on the input frame. The fusion stage never resamples: physical
and temporal features are upsampled to the input resolution on entry and all
blocks preserve shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ValidationError


@dataclass(frozen=True)
class FusionConfig:
    width: int = 32      # fusion channel count (desk scale: 16)
    k: int = 8           # SCABs per TAB (desk scale: 2)
    n_tabs: int = 3      # fixed by the three-stage progressive design

    def __post_init__(self):
        if self.width < 4:
            raise ValidationError("fusion width must be >= 4")
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if self.n_tabs != 3:
            raise ValidationError("the fusion stage uses exactly 3 TABs")


class Scab(nn.Module):
    """Self channel attention: conv body + squeeze-excite gate from GAP."""

    def __init__(self, width: int):
        super().__init__()
        mid = max(width // 4, 4)
        self.body = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1), nn.PReLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.PReLU(),
        )
        self.gate = nn.Sequential(
            nn.Conv2d(width, mid, 1), nn.PReLU(),
            nn.Conv2d(mid, width, 1), nn.Sigmoid(),
        )

    def forward(self, x):
        g = self.body(x)
        a = self.gate(F.adaptive_avg_pool2d(g, 1))
        return g * a


class Ccab(nn.Module):
    """Cross channel attention: fold temporal features in, then run like SCAB."""

    def __init__(self, width: int, te_width: int | None = None):
        super().__init__()
        self.reduce = nn.Conv2d(width + (te_width or width), width, 1)
        self.scab = Scab(width)

    def forward(self, x, f_te):
        if x.shape[-2:] != f_te.shape[-2:]:
            raise ValidationError(
                f"spatial mismatch: {tuple(x.shape[-2:])} vs {tuple(f_te.shape[-2:])}"
            )
        return self.scab(self.reduce(torch.cat((x, f_te), dim=1)))


class Tab(nn.Module):
    """Temporal-aware attention block: residual around k SCABs + one CCAB."""

    def __init__(self, width: int, k: int, te_width: int | None = None):
        super().__init__()
        self.scabs = nn.Sequential(*[Scab(width) for _ in range(k)])
        self.ccab = Ccab(width, te_width)

    def forward(self, x, f_te):
        return x + self.ccab(self.scabs(x), f_te)


class FusionHead(nn.Module):
    """Three progressive TABs plus the final residual image prediction."""

    def __init__(self, cfg: FusionConfig, ph_channels: int, te_width: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.adapter = nn.Conv2d(ph_channels + cfg.width, cfg.width, 1)
        self.tabs = nn.ModuleList(
            Tab(cfg.width, cfg.k, te_width) for _ in range(cfg.n_tabs)
        )
        self.final = nn.Conv2d(cfg.width, 3, 1)
        # residual head starts at zero: the untrained network is the identity
        nn.init.zeros_(self.final.weight)
        nn.init.zeros_(self.final.bias)

    def forward(self, frame, f_ph, f_sp, f_te, d_feats):
        """Returns the pre-clamp prediction (B, 3, H, W)."""
        h, w = frame.shape[-2:]
        if f_sp.shape[-2:] != (h, w) or any(d.shape[-2:] != (h, w) for d in d_feats):
            raise ValidationError("spatio features and decoder taps must be full resolution")
        if len(d_feats) != 3:
            raise ValidationError("fusion expects exactly 3 decoder taps")
        f_ph = F.interpolate(f_ph, size=(h, w), mode="bilinear", align_corners=False)
        f_te = F.interpolate(f_te, size=(h, w), mode="bilinear", align_corners=False)
        b1 = self.tabs[0](self.adapter(torch.cat((f_ph, f_sp), dim=1)), f_te)
        b2 = self.tabs[1](b1 + d_feats[0], f_te)
        b3 = self.tabs[2](b2 + d_feats[1], f_te)
        out = frame + self.final(b3 + d_feats[2])
        assert out.shape == frame.shape, "fusion must preserve resolution"
        return out


class ConcatFusion(nn.Module):
    """Ablation stand-in: plain concatenation + 1x1 convolutions, no attention."""

    def __init__(self, cfg: FusionConfig, ph_channels: int, te_width: int | None = None):
        super().__init__()
        self.adapter = nn.Conv2d(ph_channels + cfg.width + (te_width or cfg.width),
                                 cfg.width, 1)
        self.final = nn.Conv2d(cfg.width, 3, 1)
        nn.init.zeros_(self.final.weight)
        nn.init.zeros_(self.final.bias)

    def forward(self, frame, f_ph, f_sp, f_te, d_feats):
        h, w = frame.shape[-2:]
        f_ph = F.interpolate(f_ph, size=(h, w), mode="bilinear", align_corners=False)
        f_te = F.interpolate(f_te, size=(h, w), mode="bilinear", align_corners=False)
        b = self.adapter(torch.cat((f_ph, f_sp, f_te), dim=1))
        return frame + self.final(b + d_feats[2])
