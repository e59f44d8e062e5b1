"""Domain types, array conventions, and on-disk dataset IO.

Array conventions used everywhere:
  * images are (3, H, W) float32 RGB in [0, 1]
  * masks are (1, H, W) float32, binary for ground truth
  * optical flow is (2, H, W) float32, (u, v) displacement in pixels
All value objects are immutable after construction (backing arrays are
marked read-only).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class FormatError(ValueError):
    """A file exists but does not match the expected on-disk format."""


class ValidationError(ValueError):
    """In-memory data violates a type invariant or a precondition."""


FLOW_MAGIC = b"FLO2"


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Frame:
    """One RGB video frame, shape (3, H, W), values in [0, 1], H and W even."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3 or d.shape[0] != 3:
            raise ValidationError(f"frame must have shape (3, H, W), got {d.shape}")
        _, h, w = d.shape
        if h < 8 or w < 8:
            raise ValidationError(f"frame dims must be >= 8, got {h}x{w}")
        if h % 2 or w % 2:
            raise ValidationError(f"frame dims must be even, got {h}x{w}")
        if not np.isfinite(d).all():
            raise ValidationError("frame contains non-finite values")
        if d.min() < 0.0 or d.max() > 1.0:
            raise ValidationError(
                f"frame values outside [0, 1]: min={d.min():.6g} max={d.max():.6g}"
            )
        object.__setattr__(self, "data", _freeze(d))

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class Mask:
    """Shadow mask, shape (1, H, W); binary for ground truth, [0,1] for predictions."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3 or d.shape[0] != 1:
            raise ValidationError(f"mask must have shape (1, H, W), got {d.shape}")
        if not np.isfinite(d).all():
            raise ValidationError("mask contains non-finite values")
        if d.min() < 0.0 or d.max() > 1.0:
            raise ValidationError("mask values outside [0, 1]")
        object.__setattr__(self, "data", _freeze(d))

    def is_binary(self) -> bool:
        return bool(np.isin(self.data, (0.0, 1.0)).all())


@dataclass(frozen=True)
class FlowField:
    """Dense motion field, shape (2, H, W): (u, v) displacement from frame t to t+1."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3 or d.shape[0] != 2:
            raise ValidationError(f"flow must have shape (2, H, W), got {d.shape}")
        if not np.isfinite(d).all():
            raise ValidationError("flow contains non-finite values")
        _, h, w = d.shape
        if np.abs(d[0]).max() >= w or np.abs(d[1]).max() >= h:
            raise ValidationError("flow displacement exceeds frame dimensions")
        object.__setattr__(self, "data", _freeze(d))


@dataclass(frozen=True)
class ExposureParams:
    """Per-patch, per-channel linear relighting coefficients.

    ``patches`` is a row-major list of N = grid**2 entries, each a dict with
    keys ``w`` and ``b`` holding 3-vectors (RGB order). Relighting a patch is
    ``w * I + b`` per channel.
    """

    patches: tuple

    def __post_init__(self):
        entries = []
        for p in self.patches:
            w = np.asarray(p["w"], dtype=np.float64)
            b = np.asarray(p["b"], dtype=np.float64)
            if w.shape != (3,) or b.shape != (3,):
                raise ValidationError("each patch needs 3-vector w and b")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValidationError("exposure params contain non-finite values")
            if (w <= 0).any():
                raise ValidationError("exposure w components must be > 0")
            entries.append({"w": _freeze(w), "b": _freeze(b)})
        n = len(entries)
        if n < 1:
            raise ValidationError("exposure params need at least one patch")
        grid = int(round(n ** 0.5))
        if grid * grid != n:
            raise ValidationError(f"patch count {n} is not a perfect square")
        object.__setattr__(self, "patches", tuple(entries))

    @property
    def n_patches(self) -> int:
        return len(self.patches)

    @property
    def grid(self) -> int:
        return int(round(self.n_patches ** 0.5))

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (w, b) stacked as (N, 3) float64 arrays."""
        w = np.stack([p["w"] for p in self.patches])
        b = np.stack([p["b"] for p in self.patches])
        return w, b

    @classmethod
    def from_arrays(cls, w: np.ndarray, b: np.ndarray) -> "ExposureParams":
        return cls(tuple({"w": wi, "b": bi} for wi, bi in zip(w, b)))

    @classmethod
    def identity(cls, grid: int) -> "ExposureParams":
        n = grid * grid
        return cls.from_arrays(np.ones((n, 3)), np.zeros((n, 3)))


@dataclass(frozen=True)
class ClipSample:
    """One aligned training record: a (t, t+1) shadow pair with supervision.

    ``flow_t`` maps frame t pixels onto frame t+1.
    """

    shadow_t: Frame
    shadow_t1: Frame
    free_t: Frame
    mask_t: Mask
    flow_t: FlowField
    exposure_t: ExposureParams

    def __post_init__(self):
        shapes = {
            self.shadow_t.data.shape[1:],
            self.shadow_t1.data.shape[1:],
            self.free_t.data.shape[1:],
            self.mask_t.data.shape[1:],
            self.flow_t.data.shape[1:],
        }
        if len(shapes) != 1:
            raise ValidationError(f"clip sample fields disagree on spatial dims: {shapes}")
        h, w = self.shadow_t.data.shape[1:]
        g = self.exposure_t.grid
        if h % g or w % g:
            raise ValidationError(f"exposure grid {g} does not divide frame dims {h}x{w}")


# ---------------------------------------------------------------------------
# Frame IO (8-bit RGB PNG)
# ---------------------------------------------------------------------------

def load_frame(path) -> Frame:
    """Load an 8-bit RGB PNG as a Frame with values byte/255."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such frame file: {path}")
    img = Image.open(path)
    if img.mode != "RGB":
        raise FormatError(f"{path}: expected 8-bit RGB PNG, got mode {img.mode!r}")
    arr = np.asarray(img, dtype=np.uint8)  # (H, W, 3)
    data = arr.astype(np.float32).transpose(2, 0, 1) / np.float32(255.0)
    return Frame(data)


def save_frame(frame: Frame, path) -> None:
    """Write a Frame as an 8-bit RGB PNG with byte = round-half-up(value*255)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scaled = frame.data.astype(np.float64) * 255.0
    bytes_ = np.floor(scaled + 0.5).clip(0, 255).astype(np.uint8)
    img = Image.fromarray(bytes_.transpose(1, 2, 0), mode="RGB")
    img.save(path, format="PNG")


def quantize_frame(frame: Frame) -> Frame:
    """Snap a frame to the 8-bit grid (what load(save(f)) produces)."""
    scaled = frame.data.astype(np.float64) * 255.0
    bytes_ = np.floor(scaled + 0.5).clip(0, 255)
    return Frame((bytes_ / 255.0).astype(np.float32))


# ---------------------------------------------------------------------------
# Flow IO (.flo2)
# ---------------------------------------------------------------------------
# Layout: magic "FLO2", u32 H, u32 W (little-endian), then H*W*2 little-endian
# float32 values in row-major pixel order, u before v at each pixel.

def write_flow(flow: FlowField, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _, h, w = flow.data.shape
    payload = flow.data.transpose(1, 2, 0).astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(FLOW_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(payload)


def read_flow(path) -> FlowField:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such flow file: {path}")
    raw = path.read_bytes()
    if raw[:4] != FLOW_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {FLOW_MAGIC!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    h, w = struct.unpack("<II", raw[4:12])
    expected = 12 + h * w * 2 * 4
    if len(raw) != expected:
        raise FormatError(
            f"{path}: size mismatch, header says {h}x{w} ({expected} bytes) "
            f"but file has {len(raw)} bytes"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2).transpose(2, 0, 1)
    return FlowField(data.copy())


# ---------------------------------------------------------------------------
# Exposure IO (JSON)
# ---------------------------------------------------------------------------

def write_exposure(params: ExposureParams, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "grid": params.grid,
        "patches": [
            {"w": [float(x) for x in p["w"]], "b": [float(x) for x in p["b"]]}
            for p in params.patches
        ],
    }
    path.write_text(json.dumps(doc, indent=1) + "\n")


def read_exposure(path) -> ExposureParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such exposure file: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON: {e}") from e
    grid = doc.get("grid")
    patches = doc.get("patches")
    if not isinstance(grid, int) or not isinstance(patches, list):
        raise FormatError(f"{path}: expected keys 'grid' (int) and 'patches' (list)")
    if len(patches) != grid * grid:
        raise ValidationError(
            f"{path}: {len(patches)} patches but grid {grid} requires {grid * grid}"
        )
    return ExposureParams(tuple(patches))


# ---------------------------------------------------------------------------
# Dataset layout
# ---------------------------------------------------------------------------
# <root>/<split>/<video_id>/shadow/%03d.png, free/%03d.png, mask/%03d.png,
#                           flow/%03d.flo2, exposure/%03d.json

def video_dir(root, split: str, video_id: str) -> Path:
    return Path(root) / split / video_id


def frame_paths(vdir, kind: str, t: int) -> Path:
    ext = {"shadow": "png", "free": "png", "mask": "png", "flow": "flo2", "exposure": "json"}[kind]
    return Path(vdir) / kind / f"{t:03d}.{ext}"


def load_mask(path) -> Mask:
    frame = load_frame(path)
    return Mask(frame.data[:1])


def save_mask(mask: Mask, path) -> None:
    rgb = np.repeat(mask.data, 3, axis=0)
    save_frame(Frame(rgb), path)


def list_video_frames(vdir, kind: str = "shadow") -> list[Path]:
    d = Path(vdir) / kind
    if not d.is_dir():
        raise FileNotFoundError(f"no {kind} directory under {vdir}")
    return sorted(d.glob("*.png" if kind not in ("flow", "exposure") else "*.*"))
