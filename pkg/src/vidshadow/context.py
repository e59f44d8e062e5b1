"""Spatio and temporal characteristic branches plus the optical-flow provider.

The spatio branch works at the original frame resolution (no downsampling) so
fine texture survives to the fusion stage. The temporal branch encodes a
color rendering of the optical flow at the physical branch's scale. Flow
comes either from dataset ground truth or from a block-matching fallback for
footage without stored flow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .core import FlowField, Frame, ValidationError
from .fusion import Scab


class MissingDataError(RuntimeError):
    """The ground-truth flow provider was asked for flow that is not stored."""


@dataclass(frozen=True)
class FlowProvider:
    kind: str = "ground_truth"   # "ground_truth" or "block_matching"
    block: int = 8
    search_radius: int = 4

    def __post_init__(self):
        if self.kind not in ("ground_truth", "block_matching"):
            raise ValidationError(f"unknown flow provider {self.kind!r}")

    def estimate(self, frame_t: Frame, frame_t1: Frame,
                 stored: FlowField | None = None) -> FlowField:
        return flow_estimate(self, frame_t, frame_t1, stored)


def flow_estimate(provider: FlowProvider, frame_t: Frame, frame_t1: Frame,
                  stored: FlowField | None = None) -> FlowField:
    if frame_t.data.shape != frame_t1.data.shape:
        raise ValidationError("flow estimation needs equally sized frames")
    if provider.kind == "ground_truth":
        if stored is None:
            raise MissingDataError("ground_truth flow provider has no stored flow")
        return stored
    return block_matching_flow(frame_t, frame_t1, provider.block, provider.search_radius)


def block_matching_flow(frame_t: Frame, frame_t1: Frame,
                        block: int = 8, radius: int = 4) -> FlowField:
    """Integer per-block displacement by SAD, bilinearly smoothed to per-pixel.

    Candidate displacements are scanned nearest-to-zero first, so exact cost
    ties resolve toward zero motion.
    """
    a = frame_t.data.astype(np.float64)
    b = frame_t1.data.astype(np.float64)
    _, h, w = a.shape
    pad = np.pad(b, ((0, 0), (radius, radius), (radius, radius)), mode="edge")

    nby, nbx = -(-h // block), -(-w // block)
    y_edges = [min(i * block, h) for i in range(nby + 1)]
    x_edges = [min(j * block, w) for j in range(nbx + 1)]

    candidates = sorted(
        ((dv, du) for dv in range(-radius, radius + 1) for du in range(-radius, radius + 1)),
        key=lambda d: (abs(d[0]) + abs(d[1]), d[0] * d[0] + d[1] * d[1], d[0], d[1]),
    )
    y0, y1 = np.array(y_edges[:-1]), np.array(y_edges[1:])
    x0, x1 = np.array(x_edges[:-1]), np.array(x_edges[1:])
    costs = np.empty((len(candidates), nby, nbx))
    for ci, (dv, du) in enumerate(candidates):
        shifted = pad[:, radius + dv:radius + dv + h, radius + du:radius + du + w]
        err = np.abs(a - shifted).sum(axis=0)
        ii = np.pad(np.cumsum(np.cumsum(err, axis=0), axis=1), ((1, 0), (1, 0)))
        costs[ci] = (ii[np.ix_(y1, x1)] - ii[np.ix_(y0, x1)]
                     - ii[np.ix_(y1, x0)] + ii[np.ix_(y0, x0)])
    best = np.argmin(costs, axis=0)  # first minimum wins: ties go toward zero
    cand = np.asarray(candidates)    # (n, 2) as (dv, du)
    block_v = cand[best, 0].astype(np.float64)
    block_u = cand[best, 1].astype(np.float64)

    # bilinear interpolation from block centers to pixels
    cy = np.array([(y_edges[i] + y_edges[i + 1] - 1) / 2 for i in range(nby)])
    cx = np.array([(x_edges[j] + x_edges[j + 1] - 1) / 2 for j in range(nbx)])
    yi = np.interp(np.arange(h), cy, np.arange(nby))
    xi = np.interp(np.arange(w), cx, np.arange(nbx))
    coords = np.stack(np.meshgrid(yi, xi, indexing="ij"))
    u = ndimage.map_coordinates(block_u, coords, order=1, mode="nearest")
    v = ndimage.map_coordinates(block_v, coords, order=1, mode="nearest")
    return FlowField(np.stack((u, v)).astype(np.float32))


# ---------------------------------------------------------------------------
# Flow color rendering
# ---------------------------------------------------------------------------

def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)
    rgb = np.empty((3,) + h.shape)
    for idx, (r_, g_, b_) in enumerate(((v, t, p), (q, v, p), (p, v, t),
                                        (p, q, v), (t, p, v), (v, p, q))):
        m = i == idx
        rgb[0][m], rgb[1][m], rgb[2][m] = r_[m], g_[m], b_[m]
    return rgb


def flow_to_color(flow: FlowField) -> Frame:
    """Polar flow rendering: hue = direction, saturation = capped magnitude."""
    u = flow.data[0].astype(np.float64)
    v = flow.data[1].astype(np.float64)
    _, h, w = flow.data.shape
    hue = np.arctan2(v, u) / (2.0 * np.pi) % 1.0
    mag = np.hypot(u, v)
    sat = np.minimum(mag / (0.25 * max(h, w)), 1.0)
    val = np.ones_like(sat)
    rgb = _hsv_to_rgb(hue, sat, val)
    return Frame(np.clip(rgb, 0.0, 1.0).astype(np.float32))


# ---------------------------------------------------------------------------
# Feature branches
# ---------------------------------------------------------------------------

class SpatioBranch(nn.Module):
    """Full-resolution texture features: one 3x3 conv + one SCAB."""

    def __init__(self, width: int):
        super().__init__()
        self.conv = nn.Conv2d(3, width, 3, padding=1)
        self.scab = Scab(width)

    def forward(self, frame):
        out = self.scab(self.conv(frame))
        assert out.shape[-2:] == frame.shape[-2:], "spatio branch must preserve resolution"
        return out


class TemporalBranch(nn.Module):
    """Flow-derived features at branch scale: 3x3 conv + SCAB on the color rendering."""

    def __init__(self, width: int, branch_scale: int = 2):
        super().__init__()
        self.branch_scale = branch_scale
        self.conv = nn.Conv2d(3, width, 3, padding=1)
        self.scab = Scab(width)

    def forward(self, flow_rgb):
        x = F.avg_pool2d(flow_rgb, self.branch_scale) if self.branch_scale > 1 else flow_rgb
        return self.scab(self.conv(x))


def spatio_features(branch: SpatioBranch, frame: Frame) -> np.ndarray:
    x = torch.from_numpy(np.array(frame.data)).unsqueeze(0)
    x = x.to(next(branch.parameters()).dtype)
    with torch.no_grad():
        return branch(x)[0].numpy()


def temporal_features(branch: TemporalBranch, flow: FlowField) -> np.ndarray:
    rgb = flow_to_color(flow)
    x = torch.from_numpy(np.array(rgb.data)).unsqueeze(0)
    x = x.to(next(branch.parameters()).dtype)
    with torch.no_grad():
        return branch(x)[0].numpy()
