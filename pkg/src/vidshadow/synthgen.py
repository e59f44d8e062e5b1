"""Procedural generator of paired shadow / shadow-free videos.

Each clip is a static textured background plus 1-4 textured occluders moving
at constant velocity. Every occluder casts a shadow: its silhouette shifted
by a per-clip offset, optionally blurred into a penumbra. Shadow pixels are
darkened by the exact inverse of the affine relighting model
``lit = w * shadow + b``, so the ground-truth exposure parameters are exact
by construction. Masks, flow, and per-patch exposure coefficients all come
with the clip, which makes the generator usable as a test oracle.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

import json
from pathlib import Path

from .core import (
    ClipSample,
    ExposureParams,
    FlowField,
    Frame,
    Mask,
    ValidationError,
    frame_paths,
    save_frame,
    save_mask,
    video_dir,
    write_exposure,
    write_flow,
)

LUMA = np.array([0.299, 0.587, 0.114])

# Scene colors are kept inside this band so that (free - b) / w stays in
# [0, 1] for every admissible (w, b) and shadows are strictly darker.
COLOR_LO, COLOR_HI = 0.10, 0.98

W_RANGE = (1.2, 3.0)
B_RANGE = (-0.05, 0.05)

MIN_FIT_PIXELS = 16

BACKGROUND_STYLES = ("gradient", "perlin_like", "tiled")


class DegenerateMaskWarning(UserWarning):
    """Otsu thresholding hit a constant difference image."""


@dataclass(frozen=True)
class OccluderSpec:
    """One moving occluder: geometry, texture, and its shadow's relighting params."""

    kind: str                      # "disc" or "box"
    center: tuple                  # (x, y) at t = 0
    size: tuple                    # disc: (radius, radius); box: (half_w, half_h)
    velocity: tuple                # (vx, vy) pixels/frame
    color_a: tuple
    color_b: tuple
    texture_angle: float
    w: tuple                       # per-channel relight gain, in [1.2, 3.0]
    b: tuple                       # per-channel relight bias, in [-0.05, 0.05]


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    frames: int
    height: int
    width: int
    background_style: str
    penumbra_sigma: float
    shadow_offset: tuple           # (dx, dy), fixed for the whole clip
    occluders: tuple

    def __post_init__(self):
        if self.frames < 2:
            raise ValidationError("a clip needs at least 2 frames")
        if self.height < 8 or self.width < 8 or self.height % 2 or self.width % 2:
            raise ValidationError("scene dims must be even and >= 8")
        if self.background_style not in BACKGROUND_STYLES:
            raise ValidationError(f"unknown background style {self.background_style!r}")
        if self.penumbra_sigma < 0:
            raise ValidationError("penumbra_sigma must be >= 0")
        if not 1 <= len(self.occluders) <= 4:
            raise ValidationError("scene needs 1 to 4 occluders")
        for i, occ in enumerate(self.occluders):
            if occ.kind not in ("disc", "box"):
                raise ValidationError(f"occluder {i}: unknown kind {occ.kind!r}")
            for wc in occ.w:
                if not W_RANGE[0] <= wc <= W_RANGE[1]:
                    raise ValidationError(f"occluder {i}: w={wc} outside {W_RANGE}")
            for bc in occ.b:
                if not B_RANGE[0] <= bc <= B_RANGE[1]:
                    raise ValidationError(f"occluder {i}: b={bc} outside {B_RANGE}")
            for col in (occ.color_a, occ.color_b):
                for c in col:
                    if not COLOR_LO <= c <= COLOR_HI:
                        raise ValidationError(
                            f"occluder {i}: color {c} outside [{COLOR_LO}, {COLOR_HI}]"
                        )
            self._check_bounds(i, occ)

    def _check_bounds(self, i: int, occ: OccluderSpec) -> None:
        ex, ey = occ.size
        for t in (0, self.frames - 1):  # linear motion: extremes occur at the ends
            cx = occ.center[0] + t * occ.velocity[0]
            cy = occ.center[1] + t * occ.velocity[1]
            if not (1 + ex <= cx <= self.width - 2 - ex
                    and 1 + ey <= cy <= self.height - 2 - ey):
                raise ValidationError(
                    f"occluder {i} escapes frame bounds at t={t} "
                    f"(center=({cx:.1f},{cy:.1f}), extent=({ex},{ey}))"
                )

    @property
    def n_occluders(self) -> int:
        return len(self.occluders)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        occs = tuple(
            OccluderSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in o.items()})
            for o in d["occluders"]
        )
        return cls(
            seed=d["seed"], frames=d["frames"], height=d["height"], width=d["width"],
            background_style=d["background_style"], penumbra_sigma=d["penumbra_sigma"],
            shadow_offset=tuple(d["shadow_offset"]), occluders=occs,
        )


@dataclass
class VideoData:
    """Full per-frame render of a clip, including oracle-only layer maps."""

    spec: SceneSpec
    free: np.ndarray          # (T, 3, H, W) float32
    shadow: np.ndarray        # (T, 3, H, W) float32
    mask: np.ndarray          # (T, 1, H, W) float32, binary
    flow: np.ndarray          # (T-1, 2, H, W) float32
    exposure: list = field(default_factory=list)   # T ExposureParams
    owner_idx: np.ndarray = None   # (T, H, W) int8, -1 background
    owner_kind: np.ndarray = None  # (T, H, W) int8, 0 bg / 1 shadow / 2 body


# ---------------------------------------------------------------------------
# Silhouettes and textures
# ---------------------------------------------------------------------------

def _median3(b: np.ndarray) -> np.ndarray:
    return ndimage.median_filter(b.astype(np.uint8), size=3, mode="reflect").astype(bool)


def _stabilize(sil: np.ndarray) -> np.ndarray:
    # Fixpoint of the 3x3 binary median; keeps pseudo-masks (which end with
    # one median pass) pixel-identical to ground truth in the hard-shadow case.
    for _ in range(12):
        new = _median3(sil)
        if np.array_equal(new, sil):
            return sil
        sil = new
    return sil


def _rasterize(occ: OccluderSpec, cx: float, cy: float, h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    if occ.kind == "disc":
        sil = (xs - cx) ** 2 + (ys - cy) ** 2 <= occ.size[0] ** 2
    else:
        sil = (np.abs(xs - cx) <= occ.size[0]) & (np.abs(ys - cy) <= occ.size[1])
    return _stabilize(sil)


def _texture(occ: OccluderSpec, cx: float, cy: float, h: int, w: int) -> np.ndarray:
    """Rigid texture that travels with the occluder: gradient + radial ripple."""
    ys, xs = np.mgrid[0:h, 0:w]
    ext = max(occ.size)
    u = ((xs - cx) * np.cos(occ.texture_angle)
         + (ys - cy) * np.sin(occ.texture_angle)) / (2.0 * ext) + 0.5
    u = np.clip(u, 0.0, 1.0)
    a = np.asarray(occ.color_a)[:, None, None]
    b = np.asarray(occ.color_b)[:, None, None]
    tex = a + (b - a) * u[None]
    rho = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
    tex = tex * (1.0 + 0.06 * np.cos(2.0 * np.pi * rho / 7.0))[None]
    return np.clip(tex, COLOR_LO, COLOR_HI)


# ---------------------------------------------------------------------------
# Backgrounds
# ---------------------------------------------------------------------------

def _bg_gradient(rng, h, w):
    c0 = rng.uniform(0.25, 0.95, size=3)
    c1 = rng.uniform(0.25, 0.95, size=3)
    theta = rng.uniform(0, 2 * np.pi)
    ys, xs = np.mgrid[0:h, 0:w]
    u = xs * np.cos(theta) + ys * np.sin(theta)
    u = (u - u.min()) / max(u.max() - u.min(), 1e-9)
    return c0[:, None, None] + (c1 - c0)[:, None, None] * u[None]


def _bg_perlin_like(rng, h, w):
    acc = np.zeros((3, h, w))
    for cells, weight in ((4, 0.5), (8, 0.3), (16, 0.2)):
        coarse = rng.random((3, cells + 1, cells + 1))
        yy = np.linspace(0, cells, h)
        xx = np.linspace(0, cells, w)
        coords = np.stack(np.meshgrid(yy, xx, indexing="ij"))
        for c in range(3):
            acc[c] += weight * ndimage.map_coordinates(coarse[c], coords, order=1)
    lo, hi = acc.min(), acc.max()
    if hi - lo < 1e-9:
        return np.full((3, h, w), 0.6)
    return 0.25 + 0.70 * (acc - lo) / (hi - lo)


def _bg_tiled(rng, h, w):
    tile = int(rng.choice((8, 12, 16)))
    ny, nx = -(-h // tile), -(-w // tile)
    colors = rng.uniform(0.25, 0.95, size=(3, ny, nx))
    full = np.repeat(np.repeat(colors, tile, axis=1), tile, axis=2)
    return full[:, :h, :w]


def render_background(spec: SceneSpec) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    fn = {"gradient": _bg_gradient, "perlin_like": _bg_perlin_like, "tiled": _bg_tiled}
    return fn[spec.background_style](rng, spec.height, spec.width)


# ---------------------------------------------------------------------------
# Clip generation
# ---------------------------------------------------------------------------

def generate_video(spec: SceneSpec, grid: int = 2) -> VideoData:
    """Render every frame of a clip with full ground truth."""
    t_total, h, w = spec.frames, spec.height, spec.width
    bg = render_background(spec)
    dx, dy = spec.shadow_offset

    free = np.empty((t_total, 3, h, w), dtype=np.float32)
    shadow = np.empty_like(free)
    mask = np.empty((t_total, 1, h, w), dtype=np.float32)
    flow = np.zeros((t_total - 1, 2, h, w), dtype=np.float32)
    owner_idx = np.full((t_total, h, w), -1, dtype=np.int8)
    owner_kind = np.zeros((t_total, h, w), dtype=np.int8)
    exposure = []

    for t in range(t_total):
        free_t = bg.copy()
        soft = np.zeros((h, w))
        wmap = np.ones((3, h, w))
        bmap = np.zeros((3, h, w))

        body_sils = []
        for i, occ in enumerate(spec.occluders):
            cx = occ.center[0] + t * occ.velocity[0]
            cy = occ.center[1] + t * occ.velocity[1]
            body = _rasterize(occ, cx, cy, h, w)
            body_sils.append(body)
            sh = _rasterize(occ, cx + dx, cy + dy, h, w)
            if spec.penumbra_sigma > 0:
                soft_i = ndimage.gaussian_filter(sh.astype(np.float64), spec.penumbra_sigma)
                region = soft_i > 0
            else:
                soft_i = sh.astype(np.float64)
                region = sh
            soft = np.maximum(soft, soft_i)
            wmap[:, region] = np.asarray(occ.w)[:, None]
            bmap[:, region] = np.asarray(occ.b)[:, None]
            owner_idx[t][sh] = i
            owner_kind[t][sh] = 1

        for i, occ in enumerate(spec.occluders):
            cx = occ.center[0] + t * occ.velocity[0]
            cy = occ.center[1] + t * occ.velocity[1]
            tex = _texture(occ, cx, cy, h, w)
            body = body_sils[i]
            free_t[:, body] = tex[:, body]
            owner_idx[t][body] = i
            owner_kind[t][body] = 2

        darkened = (free_t - bmap) / wmap
        shadow_t = soft[None] * darkened + (1.0 - soft[None]) * free_t

        free[t] = free_t.astype(np.float32)
        shadow[t] = shadow_t.astype(np.float32)
        mask[t, 0] = (soft > 0.5).astype(np.float32)
        exposure.append(
            fit_exposure_params(Frame(shadow[t]), Frame(free[t]), Mask(mask[t]), grid)
        )
        if t < t_total - 1:
            for i, occ in enumerate(spec.occluders):
                sel = owner_idx[t] == i
                flow[t, 0][sel] = occ.velocity[0]
                flow[t, 1][sel] = occ.velocity[1]

    return VideoData(spec=spec, free=free, shadow=shadow, mask=mask, flow=flow,
                     exposure=exposure, owner_idx=owner_idx, owner_kind=owner_kind)


def generate_clip(spec: SceneSpec, grid: int = 2) -> list:
    """Generate the clip as aligned (t, t+1) training samples, t = 0 .. T-2."""
    video = generate_video(spec, grid=grid)
    samples = []
    for t in range(spec.frames - 1):
        samples.append(ClipSample(
            shadow_t=Frame(video.shadow[t]),
            shadow_t1=Frame(video.shadow[t + 1]),
            free_t=Frame(video.free[t]),
            mask_t=Mask(video.mask[t]),
            flow_t=FlowField(video.flow[t]),
            exposure_t=video.exposure[t],
        ))
    return samples


# ---------------------------------------------------------------------------
# Pseudo masks (Otsu on the luma difference)
# ---------------------------------------------------------------------------

def compute_pseudo_mask(shadow: Frame, free: Frame) -> Mask:
    """Otsu-threshold the luma difference free - shadow, then one 3x3 median pass.

    A constant difference image makes Otsu degenerate; the result is then an
    all-zero mask and a :class:`DegenerateMaskWarning` is emitted.
    """
    if shadow.data.shape != free.data.shape:
        raise ValidationError("frames must have the same shape")
    d = np.einsum("c,chw->hw", LUMA, free.data.astype(np.float64) - shadow.data.astype(np.float64))
    d = np.clip(d, 0.0, 1.0)
    hist, _ = np.histogram(d, bins=256, range=(0.0, 1.0))
    p = hist / hist.sum()
    centers = (np.arange(256) + 0.5) / 256.0
    omega = np.cumsum(p)
    mu = np.cumsum(p * centers)
    mu_total = mu[-1]
    denom = omega * (1.0 - omega)
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma_b = np.where(denom > 0, (mu_total * omega - mu) ** 2 / denom, 0.0)
    if sigma_b.max() <= 0.0:
        warnings.warn("constant difference image, emitting empty mask", DegenerateMaskWarning)
        return Mask(np.zeros((1,) + d.shape, dtype=np.float32))
    thr = centers[int(np.argmax(sigma_b))]
    m = _median3(d > thr)
    return Mask(m[None].astype(np.float32))


# ---------------------------------------------------------------------------
# Exposure parameter regression
# ---------------------------------------------------------------------------

def fit_exposure_params(shadow: Frame, free: Frame, mask: Mask, grid: int) -> ExposureParams:
    """Closed-form per-patch, per-channel least squares of free ~ w*shadow + b.

    Only shadow pixels (mask == 1) enter each patch's fit. Patches with fewer
    than 16 shadow pixels, a rank-deficient system, or a non-positive gain
    fall back to the identity [w=1, b=0].
    """
    _, h, w = shadow.data.shape
    if h % grid or w % grid:
        raise ValidationError(f"grid {grid} does not divide frame dims {h}x{w}")
    ph, pw = h // grid, w // grid
    sel_all = mask.data[0] > 0.5
    ws = np.ones((grid * grid, 3))
    bs = np.zeros((grid * grid, 3))
    for r in range(grid):
        for c in range(grid):
            sl = np.s_[r * ph:(r + 1) * ph, c * pw:(c + 1) * pw]
            sel = sel_all[sl]
            if int(sel.sum()) < MIN_FIT_PIXELS:
                continue
            for ch in range(3):
                x = shadow.data[ch][sl][sel].astype(np.float64)
                y = free.data[ch][sl][sel].astype(np.float64)
                n = x.size
                sx, sy = x.sum(), y.sum()
                sxx, sxy = (x * x).sum(), (x * y).sum()
                denom = n * sxx - sx * sx
                if denom <= 1e-12 * max(n * sxx, 1.0):
                    continue
                w_hat = (n * sxy - sx * sy) / denom
                if w_hat <= 0:
                    continue
                ws[r * grid + c, ch] = w_hat
                bs[r * grid + c, ch] = (sy - w_hat * sx) / n
    return ExposureParams.from_arrays(ws, bs)


# ---------------------------------------------------------------------------
# Dataset writer
# ---------------------------------------------------------------------------

def write_video(root, split: str, video_id: str, video: VideoData) -> None:
    vdir = video_dir(root, split, video_id)
    for t in range(video.spec.frames):
        save_frame(Frame(video.shadow[t]), frame_paths(vdir, "shadow", t))
        save_frame(Frame(video.free[t]), frame_paths(vdir, "free", t))
        save_mask(Mask(video.mask[t]), frame_paths(vdir, "mask", t))
        write_exposure(video.exposure[t], frame_paths(vdir, "exposure", t))
        if t < video.spec.frames - 1:
            write_flow(FlowField(video.flow[t]), frame_paths(vdir, "flow", t))


def generate_dataset(root, n_videos: int, frames: int, height: int, width: int,
                     seed: int, split_ratio: float = 0.7, grid: int = 2) -> dict:
    """Generate a full dataset tree plus its manifest; byte-identical per seed.

    Videos are split train/test by a seeded shuffle; the train share is
    round(split_ratio * n), kept within [1, n-1] whenever n >= 2.
    """
    if not 0.0 < split_ratio < 1.0:
        raise ValidationError("split ratio must be in (0, 1)")
    root = Path(root)
    rng = np.random.Generator(np.random.PCG64(seed))
    ids = [f"video_{i:03d}" for i in range(n_videos)]
    specs = {
        vid: random_scene_spec(rng, height, width, frames, seed=int(rng.integers(2 ** 31)))
        for vid in ids
    }
    order = list(rng.permutation(n_videos))
    n_train = int(np.floor(split_ratio * n_videos + 0.5))
    if n_videos >= 2:
        n_train = min(max(n_train, 1), n_videos - 1)
    train_ids = sorted(ids[i] for i in order[:n_train])
    test_ids = sorted(ids[i] for i in order[n_train:])

    for vid in ids:
        split = "train" if vid in train_ids else "test"
        write_video(root, split, vid, generate_video(specs[vid], grid=grid))

    manifest = {
        "seed": seed,
        "split_ratio": split_ratio,
        "grid": grid,
        "train": train_ids,
        "test": test_ids,
        "videos": {vid: specs[vid].to_dict() for vid in ids},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# Random scene sampling (used by dataset generation)
# ---------------------------------------------------------------------------

def random_scene_spec(rng: np.random.Generator, height: int, width: int,
                      frames: int, seed: int) -> SceneSpec:
    """Sample a valid scene. Velocities are integer so flow warps exactly.

    Relight biases are drawn from [0, 0.05] (a sub-range of the admissible
    [-0.05, 0.05]) so shadows are strictly darker everywhere.
    """
    style = str(rng.choice(BACKGROUND_STYLES))
    n_occ = int(rng.integers(2, 4))
    sigma = float(rng.uniform(0.5, 1.5))
    mindim = min(height, width)
    off_mag = max(3, int(0.08 * mindim))
    offset = (int(rng.choice((-1, 1))) * off_mag, int(rng.choice((-1, 1))) * off_mag)

    occluders = []
    for k in range(n_occ):
        kind = str(rng.choice(("disc", "box")))
        ext = float(rng.uniform(0.10, 0.17) * mindim)
        size = (ext, ext) if kind == "disc" else (ext, float(rng.uniform(0.08, 0.15) * mindim))
        for _attempt in range(50):
            vel = (int(rng.integers(-2, 3)), int(rng.integers(-2, 3)))
            if k == 0 and vel == (0, 0):
                continue  # keep at least one occluder in motion
            travel_x, travel_y = vel[0] * (frames - 1), vel[1] * (frames - 1)
            x_lo = 1 + size[0] - min(0, travel_x)
            x_hi = width - 2 - size[0] - max(0, travel_x)
            y_lo = 1 + size[1] - min(0, travel_y)
            y_hi = height - 2 - size[1] - max(0, travel_y)
            if x_lo < x_hi and y_lo < y_hi:
                center = (float(rng.uniform(x_lo, x_hi)), float(rng.uniform(y_lo, y_hi)))
                break
        else:
            raise ValidationError("could not place occluder inside frame bounds")
        occluders.append(OccluderSpec(
            kind=kind, center=center, size=size, velocity=vel,
            color_a=tuple(float(x) for x in rng.uniform(0.25, 0.90, size=3)),
            color_b=tuple(float(x) for x in rng.uniform(0.25, 0.90, size=3)),
            texture_angle=float(rng.uniform(0, 2 * np.pi)),
            w=tuple(float(x) for x in rng.uniform(1.4, 2.8, size=3)),
            b=tuple(float(x) for x in rng.uniform(0.0, 0.05, size=3)),
        ))
    return SceneSpec(
        seed=seed, frames=frames, height=height, width=width,
        background_style=style, penumbra_sigma=sigma, shadow_offset=offset,
        occluders=tuple(occluders),
    )
