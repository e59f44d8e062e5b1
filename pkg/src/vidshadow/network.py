"""Full shadow removal network: three branches plus progressive fusion.

``ShadowRemovalNet.forward`` consumes a batch of frames and the color
rendering of their optical flow, and returns every supervised quantity. All
residual output heads start at zero, so a freshly constructed (and a fully
zeroed) network maps the input frame to itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
import torch.nn as nn

from .aeem import AeemConfig, AeemModel, relight_tensor
from .context import SpatioBranch, TemporalBranch
from .core import ValidationError
from .fusion import ConcatFusion, FusionConfig, FusionHead
from .physical import PhysicalBranch, PhysicalConfig

VARIANTS = ("full", "no_aeem", "fixed_exposure", "no_msam", "no_mask_head", "concat_fusion")


@dataclass(frozen=True)
class NetConfig:
    aeem: AeemConfig = field(default_factory=AeemConfig)
    physical: PhysicalConfig = field(default_factory=PhysicalConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}")

    def resolved_aeem(self) -> AeemConfig:
        if self.variant == "fixed_exposure":
            return replace(self.aeem, grid=1)
        return self.aeem


def desk_config(variant: str = "full") -> NetConfig:
    """Small CPU-friendly configuration used by the scaled-down experiments."""
    return NetConfig(
        aeem=AeemConfig(grid=2, token_dim=64, n_blocks=2, n_heads=4, patch_pool=16),
        physical=PhysicalConfig(base_channels=16, depth=4, branch_scale=2),
        fusion=FusionConfig(width=16, k=2),
        variant=variant,
    )


class ShadowRemovalNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        v = cfg.variant
        self.use_aeem = v != "no_aeem"
        use_msam = v != "no_msam"
        use_mask_head = v != "no_mask_head"
        width = cfg.fusion.width

        self.aeem = AeemModel(cfg.resolved_aeem()) if self.use_aeem else None
        self.physical = PhysicalBranch(cfg.physical, width,
                                       use_msam=use_msam, use_mask_head=use_mask_head)
        self.spatio = SpatioBranch(width)
        self.temporal = TemporalBranch(width, cfg.physical.branch_scale)
        fusion_cls = ConcatFusion if v == "concat_fusion" else FusionHead
        self.fusion = fusion_cls(cfg.fusion, cfg.physical.base_channels, width)

    def forward(self, frame: torch.Tensor, flow_rgb: torch.Tensor) -> dict:
        """frame, flow_rgb: (B, 3, H, W). Returns all supervised outputs."""
        if frame.shape != flow_rgb.shape:
            raise ValidationError("frame and flow rendering must share a shape")
        if self.use_aeem:
            w_hat, b_hat = self.aeem(frame)
            relit = relight_tensor(frame, w_hat, b_hat, self.aeem.cfg.grid)
        else:
            w_hat = b_hat = None
            relit = frame
        ph = self.physical(frame, relit)
        f_sp = self.spatio(frame)
        f_te = self.temporal(flow_rgb)
        r_final_pre = self.fusion(frame, ph["f_ph"], f_sp, f_te, ph["d_feats"])
        return {
            "r_final_pre": r_final_pre,
            "r_final": r_final_pre.clamp(0.0, 1.0),
            "r_middle": ph["r_middle"],
            "m_pred": ph["m_pred"],
            "w": w_hat,
            "b": b_hat,
            "relit": relit,
            "frame_s": ph["frame_s"],
        }


def zero_all_parameters(model: nn.Module) -> None:
    """Zero every learnable parameter (makes the network the identity map)."""
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
