"""Loss functions and LAB-space evaluation metrics.

Losses operate on torch tensors so they are differentiable; metrics operate
on numpy arrays / core types and are pure evaluation code. The contract
metric is literal RMSE in CIELAB; MAE-in-LAB is computed alongside because
part of the shadow-removal literature reports that quantity under the RMSE
name.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .core import Frame, Mask, ValidationError

CHARBONNIER_EPS = 1e-3
BCE_CLIP = 1e-6


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # exposure regression
    beta: float = 1.0   # shadow mask segmentation
    gamma: float = 1.0  # restoration

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValidationError("loss weights must be >= 0")


def charbonnier(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Smooth L1 surrogate: mean of sqrt((a-b)^2 + eps^2), eps = 1e-3."""
    if a.shape != b.shape:
        raise ValidationError(f"charbonnier shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.sqrt((a - b) ** 2 + CHARBONNIER_EPS ** 2).mean()


def loss_reg(pred_w: torch.Tensor, pred_b: torch.Tensor,
             gt_w: torch.Tensor, gt_b: torch.Tensor) -> torch.Tensor:
    """Exposure-parameter regression loss, summed over the N patches.

    All arguments are (..., N, 3) tensors; the Charbonnier terms are taken
    per patch over the channel vectors.
    """
    if pred_w.shape != gt_w.shape or pred_b.shape != gt_b.shape:
        raise ValidationError("exposure grids disagree between prediction and ground truth")
    n = pred_w.shape[-2]
    total = pred_w.new_zeros(())
    for i in range(n):
        total = total + charbonnier(pred_w[..., i, :], gt_w[..., i, :])
        total = total + charbonnier(pred_b[..., i, :], gt_b[..., i, :])
    return total


def loss_seg(m_pred: torch.Tensor, m_gt: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy; predictions are pre-clipped to avoid saturation."""
    if m_pred.shape != m_gt.shape:
        raise ValidationError(f"mask shape mismatch: {tuple(m_pred.shape)} vs {tuple(m_gt.shape)}")
    p = m_pred.clamp(BCE_CLIP, 1.0 - BCE_CLIP)
    return -(m_gt * torch.log(p) + (1.0 - m_gt) * torch.log(1.0 - p)).mean()


def downsample_mask(m: torch.Tensor, scale: int) -> torch.Tensor:
    """Area-downsample a binary mask and re-binarize at 0.5."""
    if scale == 1:
        return m
    return (F.avg_pool2d(m, scale) > 0.5).to(m.dtype)


def loss_res(r_middle: torch.Tensor, r_final: torch.Tensor, r_gt: torch.Tensor) -> torch.Tensor:
    """Restoration loss: coarse estimate vs area-downsampled GT + final vs full GT."""
    if r_final.shape != r_gt.shape:
        raise ValidationError("final prediction and ground truth shapes differ")
    scale = r_gt.shape[-1] // r_middle.shape[-1]
    if r_middle.shape[-1] * scale != r_gt.shape[-1] or r_middle.shape[-2] * scale != r_gt.shape[-2]:
        raise ValidationError("coarse prediction is not an integer downsampling of ground truth")
    gt_s = F.avg_pool2d(r_gt, scale) if scale > 1 else r_gt
    return charbonnier(r_middle, gt_s) + charbonnier(r_final, r_gt)


def total_loss(reg: torch.Tensor, seg: torch.Tensor, res: torch.Tensor,
               weights: LossWeights) -> torch.Tensor:
    return weights.alpha * reg + weights.beta * seg + weights.gamma * res


# ---------------------------------------------------------------------------
# CIELAB conversion and RMSE metrics
# ---------------------------------------------------------------------------

# sRGB (D65) -> XYZ; rows sum to the D65 white point used below.
_RGB2XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_WHITE = _RGB2XYZ.sum(axis=1)  # (0.95047, 1.0, 1.08883)


def rgb_to_lab(frame: Frame) -> np.ndarray:
    """Convert a [0,1] sRGB-encoded frame to CIELAB, shape (3, H, W) float64."""
    rgb = frame.data.astype(np.float64)
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = np.einsum("ij,jhw->ihw", _RGB2XYZ, lin)
    t = xyz / _WHITE[:, None, None]
    delta = 6.0 / 29.0
    f = np.where(t > delta ** 3, np.cbrt(t), t / (3 * delta ** 2) + 4.0 / 29.0)
    fx, fy, fz = f
    lab = np.empty_like(xyz)
    lab[0] = 116.0 * fy - 16.0
    lab[1] = 500.0 * (fx - fy)
    lab[2] = 200.0 * (fy - fz)
    return lab


@dataclass
class RegionStats:
    """Pixel-pooled accumulator for one region (sum of squared LAB distance / 3)."""

    sq_sum: float = 0.0
    abs_sum: float = 0.0
    count: int = 0

    def add(self, sq: np.ndarray, ab: np.ndarray) -> None:
        self.sq_sum += float(sq.sum())
        self.abs_sum += float(ab.sum())
        self.count += int(sq.size)

    def rmse(self):
        return float(np.sqrt(self.sq_sum / self.count)) if self.count else None

    def mae(self):
        return self.abs_sum / self.count if self.count else None


@dataclass
class MetricAccumulator:
    """Pools pixels across frames/videos for shadow / non-shadow / all regions."""

    shadow: RegionStats = field(default_factory=RegionStats)
    non_shadow: RegionStats = field(default_factory=RegionStats)
    all: RegionStats = field(default_factory=RegionStats)

    def add_pair(self, pred: Frame, gt: Frame, mask: Mask) -> None:
        if pred.data.shape != gt.data.shape or mask.data.shape[1:] != gt.data.shape[1:]:
            raise ValidationError("metric inputs are not spatially aligned")
        if not mask.is_binary():
            raise ValidationError("metric mask must be binary")
        diff = rgb_to_lab(pred) - rgb_to_lab(gt)
        sq = (diff ** 2).sum(axis=0) / 3.0       # (H, W)
        ab = np.abs(diff).sum(axis=0) / 3.0
        m = mask.data[0] > 0.5
        self.shadow.add(sq[m], ab[m])
        self.non_shadow.add(sq[~m], ab[~m])
        self.all.add(sq, ab)

    def report(self) -> dict:
        out = {}
        flags = []
        for name, stats in (("shadow", self.shadow), ("non_shadow", self.non_shadow),
                            ("all", self.all)):
            r = stats.rmse()
            if r is None:
                flags.append(f"empty_{name}_region")
            else:
                out[name] = r
                out[f"mae_{name}"] = stats.mae()
        if flags:
            out["flags"] = flags
        return out


def rmse_lab(pred: Frame, gt: Frame, mask: Mask) -> dict:
    """LAB RMSE (and MAE) for one frame pair, split by shadow region.

    Returns a dict with keys ``shadow``, ``non_shadow``, ``all`` (RMSE in LAB
    units) plus ``mae_*`` counterparts; a region with no pixels is omitted
    and listed under ``flags``.
    """
    acc = MetricAccumulator()
    acc.add_pair(pred, gt, mask)
    return acc.report()
