"""Synthetic-to-real adaptation without retraining.

A real frame is pulled toward the synthetic domain by swapping the
low-frequency amplitude spectrum with a reference synthetic image (Fourier
domain adaptation), run through the trained remover, and mapped back by a
second swap against the original frame. The reference is picked once per
video by color-histogram distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .context import FlowProvider
from .core import Frame, ValidationError
from .trainer import build_model, infer_video, load_checkpoint, video_flow_for_frame


@dataclass(frozen=True)
class FdaConfig:
    delta: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.delta <= 0.5:
            raise ValidationError("delta must lie in [0, 0.5]")


@dataclass(frozen=True)
class ColorHistogram:
    """8x8x8 RGB histogram, L1-normalized."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.float64)
        if c.shape != (8, 8, 8):
            raise ValidationError(f"histogram must be 8x8x8, got {c.shape}")
        if (c < 0).any() or abs(c.sum() - 1.0) > 1e-9:
            raise ValidationError("histogram must be non-negative and sum to 1")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)


def fda(source: Frame, target: Frame, delta: float) -> Frame:
    """Replace the centered low-frequency amplitude of source by target's.

    The swap window is a centered rectangle with half-extents
    floor(delta*H) x floor(delta*W); delta=0 swaps nothing (even the DC term
    stays) and delta=0.5 swaps the whole spectrum. The source phase is kept,
    the real part is taken, and the result is clamped to [0, 1].
    """
    FdaConfig(delta)
    if source.data.shape != target.data.shape:
        raise ValidationError(
            f"fda needs equal shapes, got {source.data.shape} vs {target.data.shape}; "
            "resize the target to the source dims first"
        )
    _, h, w = source.data.shape
    bh, bw = int(np.floor(delta * h)), int(np.floor(delta * w))
    out = np.empty_like(source.data, dtype=np.float64)
    for c in range(3):
        fs = np.fft.fft2(source.data[c].astype(np.float64))
        ft = np.fft.fft2(target.data[c].astype(np.float64))
        amp = np.fft.fftshift(np.abs(fs))
        if bh > 0 and bw > 0:
            amp_t = np.fft.fftshift(np.abs(ft))
            cy, cx = h // 2, w // 2
            amp[cy - bh:cy + bh, cx - bw:cx + bw] = \
                amp_t[cy - bh:cy + bh, cx - bw:cx + bw]
        composite = np.fft.ifftshift(amp) * np.exp(1j * np.angle(fs))
        out[c] = np.real(np.fft.ifft2(composite))
    return Frame(np.clip(out, 0.0, 1.0).astype(np.float32))


def color_histogram(frame: Frame) -> ColorHistogram:
    """Bin each pixel by floor(value*8) per channel, clamped to the top bin."""
    idx = np.minimum((frame.data.astype(np.float64) * 8).astype(int), 7)
    flat = idx[0] * 64 + idx[1] * 8 + idx[2]
    counts = np.bincount(flat.ravel(), minlength=512).reshape(8, 8, 8)
    return ColorHistogram(counts / counts.sum())


def select_reference(query: Frame, refs: list) -> int:
    """Index of the reference with minimal L1 histogram distance (ties: lowest)."""
    if not refs:
        raise ValidationError("reference list is empty")
    hq = color_histogram(query).counts
    scores = [float(np.abs(hq - color_histogram(r).counts).sum()) for r in refs]
    return int(np.argmin(scores))


def resize_frame(frame: Frame, h: int, w: int) -> Frame:
    if frame.data.shape[1:] == (h, w):
        return frame
    x = torch.from_numpy(np.array(frame.data)).unsqueeze(0)
    y = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    return Frame(y[0].clamp(0.0, 1.0).numpy())


class _FrameSeq:
    """Adapter so video_flow_for_frame can walk a plain frame list."""

    def __init__(self, frames):
        self.shadow = np.stack([f.data for f in frames])
        self.frames = len(frames)


def s2r_pipeline(video: list, checkpoint, refs: list, delta: float = 0.01) -> list:
    """Remove shadows from a real video with a synthetic-trained model.

    ``video`` is a list of Frames, ``refs`` the synthetic reference pool
    (first frames of the training videos). The reference is chosen once from
    the video's first frame; flow for the adapted frames comes from block
    matching since real footage has no stored flow.
    """
    if not video:
        raise ValidationError("empty video")
    payload = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint)
    net, _cfg = build_model(payload)
    h, w = video[0].data.shape[1:]
    ref = resize_frame(refs[select_reference(video[0], refs)], h, w)

    adapted = []
    for i, frame in enumerate(video):
        try:
            adapted.append(fda(frame, ref, delta))
        except Exception as e:
            raise RuntimeError(f"frame {i}: forward FDA failed: {e}") from e

    provider = FlowProvider(kind="block_matching")
    seq = _FrameSeq(adapted)
    flows = [video_flow_for_frame(seq, t, provider) for t in range(len(adapted))]
    preds = infer_video(net, adapted, flows)

    out = []
    for i, (pred, orig) in enumerate(zip(preds, video)):
        try:
            out.append(fda(pred, orig, delta))
        except Exception as e:
            raise RuntimeError(f"frame {i}: backward FDA failed: {e}") from e
    return out
