"""Training loop: augmentation, cosine learning-rate schedule, Adam updates,
per-epoch held-out evaluation, and binary checkpointing.

Everything is deterministic for a fixed seed: one numpy generator drives data
order and augmentation draws in a fixed sequence, torch is seeded before
model construction, and checkpoints snapshot both RNG states so a resumed
run continues the exact trajectory.
"""

from __future__ import annotations

import csv
import math
import pickle
import struct
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path

import numpy as np
import torch

from .aeem import AeemConfig
from .context import FlowProvider, flow_to_color
from .core import (
    ClipSample,
    ExposureParams,
    FlowField,
    FormatError,
    Frame,
    Mask,
    ValidationError,
    frame_paths,
    load_frame,
    load_mask,
    read_exposure,
    read_flow,
)
from .fusion import FusionConfig
from .network import NetConfig, ShadowRemovalNet, VARIANTS, desk_config
from .objective import (
    LossWeights,
    MetricAccumulator,
    charbonnier,
    downsample_mask,
    loss_reg,
    loss_seg,
)
from .physical import PhysicalConfig
from .synthgen import fit_exposure_params

CKPT_MAGIC = b"PSTN"
CKPT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite {component} loss: {value}")
        self.component = component


@dataclass(frozen=True)
class TrainConfig:
    crop: int = 96
    batch: int = 4
    epochs: int = 30
    lr_init: float = 2e-4
    lr_final: float = 1e-6
    seed: int = 0
    flip_aug: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    net: NetConfig = field(default_factory=desk_config)
    flow: FlowProvider = field(default_factory=FlowProvider)

    def __post_init__(self):
        if not (self.lr_init > self.lr_final > 0):
            raise ValidationError("need lr_init > lr_final > 0")
        if self.batch < 1 or self.epochs < 1:
            raise ValidationError("batch and epochs must be >= 1")
        div = self.net.physical.branch_scale * 2 ** self.net.physical.depth
        if self.crop % div:
            raise ValidationError(f"crop {self.crop} not divisible by branch_scale*2^depth={div}")
        if self.crop % self.net.resolved_aeem().grid:
            raise ValidationError("crop not divisible by the exposure grid")


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine annealing from lr_init to lr_final over total_steps."""
    if step >= total_steps:
        return cfg.lr_final
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (
        1.0 + math.cos(math.pi * step / total_steps)
    )


def ablate(cfg: TrainConfig, variant: str) -> TrainConfig:
    """Swap in an ablation variant; 'full' returns the config unchanged."""
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}")
    if variant == "full":
        return cfg
    return replace(cfg, net=replace(cfg.net, variant=variant))


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def augment(sample: ClipSample, rng: np.random.Generator, cfg: TrainConfig) -> ClipSample:
    """Aligned random crop plus optional H/V flips.

    Flow components flip with their axes (mirroring columns negates u,
    mirroring rows negates v). Exposure ground truth is refit on the
    augmented pair rather than permuted, because cropping changes the patch
    contents the regression sees.
    """
    _, h, w = sample.shadow_t.data.shape
    c = cfg.crop
    if c > h or c > w:
        raise ValidationError(f"crop {c} larger than frame {h}x{w}")
    y0 = int(rng.integers(0, h - c + 1))
    x0 = int(rng.integers(0, w - c + 1))
    hflip = cfg.flip_aug and rng.random() < 0.5
    vflip = cfg.flip_aug and rng.random() < 0.5

    def cut(a):
        return a[:, y0:y0 + c, x0:x0 + c]

    imgs = [cut(sample.shadow_t.data), cut(sample.shadow_t1.data),
            cut(sample.free_t.data), cut(sample.mask_t.data)]
    flow = cut(sample.flow_t.data).copy()
    if hflip:
        imgs = [a[:, :, ::-1] for a in imgs]
        flow = flow[:, :, ::-1].copy()
        flow[0] = -flow[0]
    if vflip:
        imgs = [a[:, ::-1, :] for a in imgs]
        flow = flow[:, ::-1, :].copy()
        flow[1] = -flow[1]

    shadow_t = Frame(np.ascontiguousarray(imgs[0]))
    free_t = Frame(np.ascontiguousarray(imgs[2]))
    mask_t = Mask(np.ascontiguousarray(imgs[3]))
    grid = cfg.net.resolved_aeem().grid
    return ClipSample(
        shadow_t=shadow_t,
        shadow_t1=Frame(np.ascontiguousarray(imgs[1])),
        free_t=free_t,
        mask_t=mask_t,
        flow_t=FlowField(np.ascontiguousarray(flow)),
        exposure_t=fit_exposure_params(shadow_t, free_t, mask_t, grid),
    )


# ---------------------------------------------------------------------------
# Dataset access
# ---------------------------------------------------------------------------

@dataclass
class VideoRecord:
    video_id: str
    shadow: np.ndarray     # (T, 3, H, W)
    free: np.ndarray
    mask: np.ndarray       # (T, 1, H, W)
    flow: np.ndarray       # (T-1, 2, H, W)
    exposure: list         # T ExposureParams

    @property
    def frames(self) -> int:
        return self.shadow.shape[0]

    def sample(self, t: int) -> ClipSample:
        return ClipSample(
            shadow_t=Frame(self.shadow[t]), shadow_t1=Frame(self.shadow[t + 1]),
            free_t=Frame(self.free[t]), mask_t=Mask(self.mask[t]),
            flow_t=FlowField(self.flow[t]), exposure_t=self.exposure[t],
        )


def load_video(vdir: Path) -> VideoRecord:
    vdir = Path(vdir)
    shadow_files = sorted((vdir / "shadow").glob("*.png"))
    if not shadow_files:
        raise FileNotFoundError(f"no shadow frames under {vdir}")
    t_total = len(shadow_files)
    shadow, free, mask, exposure = [], [], [], []
    for t in range(t_total):
        shadow.append(load_frame(frame_paths(vdir, "shadow", t)).data)
        free.append(load_frame(frame_paths(vdir, "free", t)).data)
        mask.append(load_mask(frame_paths(vdir, "mask", t)).data)
        exposure.append(read_exposure(frame_paths(vdir, "exposure", t)))
    flow = [read_flow(frame_paths(vdir, "flow", t)).data for t in range(t_total - 1)]
    return VideoRecord(
        video_id=vdir.name,
        shadow=np.stack(shadow), free=np.stack(free), mask=np.stack(mask),
        flow=np.stack(flow), exposure=exposure,
    )


def load_split(root, split: str) -> list:
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"no '{split}' split under {root}")
    return [load_video(d) for d in sorted(split_dir.iterdir()) if d.is_dir()]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> TrainConfig:
    net = d["net"]
    return TrainConfig(
        crop=d["crop"], batch=d["batch"], epochs=d["epochs"],
        lr_init=d["lr_init"], lr_final=d["lr_final"], seed=d["seed"],
        flip_aug=d["flip_aug"],
        weights=LossWeights(**d["weights"]),
        net=NetConfig(
            aeem=AeemConfig(**net["aeem"]),
            physical=PhysicalConfig(**net["physical"]),
            fusion=FusionConfig(**net["fusion"]),
            variant=net["variant"],
        ),
        flow=FlowProvider(**d["flow"]),
    )


def _model_arrays(net: torch.nn.Module) -> dict:
    return {k: np.ascontiguousarray(v.detach().cpu().numpy())
            for k, v in net.state_dict().items()}


def _optimizer_arrays(opt: torch.optim.Adam) -> dict:
    state = {}
    for idx in sorted(opt.state_dict()["state"]):
        entry = opt.state_dict()["state"][idx]
        state[int(idx)] = {
            "step": float(entry["step"]),
            "exp_avg": np.ascontiguousarray(entry["exp_avg"].numpy()),
            "exp_avg_sq": np.ascontiguousarray(entry["exp_avg_sq"].numpy()),
        }
    return state


def save_checkpoint(path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + pickle.dumps(payload, protocol=4)
    path.write_bytes(blob)


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    raw = path.read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    return pickle.loads(raw[8:])


def build_model(payload: dict) -> tuple[ShadowRemovalNet, TrainConfig]:
    cfg = config_from_dict(payload["config"])
    net = ShadowRemovalNet(cfg.net)
    state = {k: torch.from_numpy(np.array(v)) for k, v in payload["model"].items()}
    net.load_state_dict(state)
    net.eval()
    return net, cfg


def _restore_optimizer(opt: torch.optim.Adam, saved: dict, params: list) -> None:
    sd = opt.state_dict()
    for idx, entry in saved.items():
        sd["state"][idx] = {
            "step": torch.tensor(entry["step"]),
            "exp_avg": torch.from_numpy(np.array(entry["exp_avg"])),
            "exp_avg_sq": torch.from_numpy(np.array(entry["exp_avg_sq"])),
        }
    opt.load_state_dict(sd)


# ---------------------------------------------------------------------------
# Batched forward helpers
# ---------------------------------------------------------------------------

def batch_from_samples(samples: list, provider: FlowProvider) -> dict:
    frames, flows_rgb, frees, masks, ws, bs, shadows_t1 = [], [], [], [], [], [], []
    for s in samples:
        flow = provider.estimate(s.shadow_t, s.shadow_t1, stored=s.flow_t) \
            if provider.kind == "block_matching" else s.flow_t
        frames.append(s.shadow_t.data)
        shadows_t1.append(s.shadow_t1.data)
        flows_rgb.append(flow_to_color(flow).data)
        frees.append(s.free_t.data)
        masks.append(s.mask_t.data)
        w, b = s.exposure_t.as_arrays()
        ws.append(w)
        bs.append(b)
    return {
        "frame": torch.from_numpy(np.stack(frames)),
        "flow_rgb": torch.from_numpy(np.stack(flows_rgb)),
        "free": torch.from_numpy(np.stack(frees)),
        "mask": torch.from_numpy(np.stack(masks)),
        "w": torch.from_numpy(np.stack(ws)).float(),
        "b": torch.from_numpy(np.stack(bs)).float(),
    }


def compute_losses(out: dict, batch: dict, weights: LossWeights) -> dict:
    zero = batch["frame"].new_zeros(())
    reg = loss_reg(out["w"], out["b"], batch["w"], batch["b"]) if out["w"] is not None else zero
    if out["m_pred"] is not None:
        scale = batch["mask"].shape[-1] // out["m_pred"].shape[-1]
        seg = loss_seg(out["m_pred"], downsample_mask(batch["mask"], scale))
    else:
        seg = zero
    res = charbonnier(out["r_final_pre"], batch["free"])
    if out["r_middle"] is not None:
        scale = batch["free"].shape[-1] // out["r_middle"].shape[-1]
        gt_s = torch.nn.functional.avg_pool2d(batch["free"], scale) if scale > 1 else batch["free"]
        res = res + charbonnier(out["r_middle"], gt_s)
    total = weights.alpha * reg + weights.beta * seg + weights.gamma * res
    for name, val in (("reg", reg), ("seg", seg), ("res", res), ("total", total)):
        if not torch.isfinite(val):
            raise NonFiniteLossError(name, float(val.detach()))
    return {"total": total, "reg": float(reg.detach()), "seg": float(seg.detach()),
            "res": float(res.detach())}


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def video_flow_for_frame(video: VideoRecord, t: int, provider: FlowProvider) -> FlowField:
    """Flow for frame t; the last frame pairs with its predecessor, negated."""
    last = video.frames - 1
    if t < last:
        if provider.kind == "ground_truth":
            return FlowField(video.flow[t])
        return provider.estimate(Frame(video.shadow[t]), Frame(video.shadow[t + 1]))
    if provider.kind == "ground_truth":
        return FlowField(-video.flow[last - 1])
    prev = provider.estimate(Frame(video.shadow[last - 1]), Frame(video.shadow[last]))
    return FlowField(-prev.data)


def infer_video(net: ShadowRemovalNet, frames: list, flows: list,
                chunk: int = 8) -> list:
    """Run the network over per-frame inputs; returns clamped output Frames."""
    outs = []
    with torch.no_grad():
        for i in range(0, len(frames), chunk):
            fb = torch.from_numpy(np.stack([f.data for f in frames[i:i + chunk]]))
            cb = torch.from_numpy(np.stack([flow_to_color(fl).data for fl in flows[i:i + chunk]]))
            r = net(fb, cb)["r_final"]
            outs.extend(Frame(r[j].numpy()) for j in range(r.shape[0]))
    return outs


def evaluate_model(net: ShadowRemovalNet, videos: list, provider: FlowProvider,
                   include_baseline: bool = False) -> dict:
    """LAB metrics over a list of VideoRecords, pixel-pooled plus per-video."""
    total = MetricAccumulator()
    per_video = {}
    baseline_total = MetricAccumulator() if include_baseline else None
    baseline_videos = {}
    net.eval()
    for video in videos:
        acc = MetricAccumulator()
        base = MetricAccumulator() if include_baseline else None
        frames = [Frame(video.shadow[t]) for t in range(video.frames)]
        flows = [video_flow_for_frame(video, t, provider) for t in range(video.frames)]
        preds = infer_video(net, frames, flows)
        for t in range(video.frames):
            gt, m = Frame(video.free[t]), Mask(video.mask[t])
            acc.add_pair(preds[t], gt, m)
            total.add_pair(preds[t], gt, m)
            if include_baseline:
                base.add_pair(frames[t], gt, m)
                baseline_total.add_pair(frames[t], gt, m)
        per_video[video.video_id] = acc.report()
        if include_baseline:
            baseline_videos[video.video_id] = base.report()
    report = total.report()
    report["per_video"] = per_video
    if include_baseline:
        baseline = baseline_total.report()
        baseline["per_video"] = baseline_videos
        return {"model": report, "input_baseline": baseline}
    return report


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    last: dict                 # final checkpoint payload
    best: dict                 # best-by-rmse_all checkpoint payload
    history: list              # per-epoch {epoch, mean_total, rmse_all, ...}
    steps: list                # per-step {step, lr, total, reg, seg, res}


def _checkpoint_payload(cfg, net, opt, epoch, step, rng, best_rmse) -> dict:
    return {
        "config": config_to_dict(cfg),
        "epoch": int(epoch),
        "global_step": int(step),
        "model": _model_arrays(net),
        "optimizer": _optimizer_arrays(opt),
        "rng": {"numpy": rng.bit_generator.state,
                "torch": torch.get_rng_state().numpy().tobytes()},
        "best_rmse": best_rmse,
    }


def train(cfg: TrainConfig, dataset_root, out_dir=None, resume=None,
          log=print) -> TrainResult:
    """Train on <root>/train, evaluating on <root>/test each epoch.

    Writes best.ckpt / last.ckpt / loss.csv under ``out_dir`` when given.
    Resuming from a last.ckpt payload continues the epoch counter, optimizer
    moments, and both RNG streams.
    """
    train_videos = load_split(dataset_root, "train")
    test_videos = load_split(dataset_root, "test")
    items = [(vi, t) for vi, v in enumerate(train_videos) for t in range(v.frames - 1)]
    if not items:
        raise ValidationError("training split has no frame pairs")
    steps_per_epoch = max(1, len(items) // cfg.batch)
    total_steps = cfg.epochs * steps_per_epoch

    torch.manual_seed(cfg.seed)
    net = ShadowRemovalNet(cfg.net)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr_init, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    start_epoch, global_step = 0, 0
    best_rmse, best_payload = None, None

    if resume is not None:
        payload = resume if isinstance(resume, dict) else load_checkpoint(resume)
        saved_cfg = config_from_dict(payload["config"])
        if config_to_dict(saved_cfg) != config_to_dict(cfg):
            raise ValidationError("resume checkpoint was trained with a different config")
        net.load_state_dict({k: torch.from_numpy(np.array(v))
                             for k, v in payload["model"].items()})
        _restore_optimizer(opt, payload["optimizer"], list(net.parameters()))
        rng.bit_generator.state = payload["rng"]["numpy"]
        torch.set_rng_state(torch.from_numpy(
            np.frombuffer(payload["rng"]["torch"], dtype=np.uint8).copy()))
        start_epoch = payload["epoch"]
        global_step = payload["global_step"]
        best_rmse = payload["best_rmse"]

    history, step_log = [], []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(start_epoch, cfg.epochs):
        net.train()
        order = rng.permutation(len(items))
        epoch_losses = []
        for bstart in range(0, steps_per_epoch * cfg.batch, cfg.batch):
            samples = []
            for oi in order[bstart:bstart + cfg.batch]:
                vi, t = items[oi]
                samples.append(augment(train_videos[vi].sample(t), rng, cfg))
            batch = batch_from_samples(samples, cfg.flow)
            lr = lr_schedule(global_step, total_steps, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad()
            out = net(batch["frame"], batch["flow_rgb"])
            losses = compute_losses(out, batch, cfg.weights)
            losses["total"].backward()
            opt.step()
            total_val = float(losses["total"].detach())
            step_log.append({"step": global_step, "epoch": epoch, "lr": lr,
                             "total": total_val, "reg": losses["reg"],
                             "seg": losses["seg"], "res": losses["res"]})
            epoch_losses.append(total_val)
            global_step += 1

        report = evaluate_model(net, test_videos, cfg.flow)
        rmse_all = report.get("all")
        payload = _checkpoint_payload(cfg, net, opt, epoch + 1, global_step, rng, best_rmse)
        if rmse_all is not None and (best_rmse is None or rmse_all < best_rmse):
            best_rmse = rmse_all
            payload["best_rmse"] = best_rmse
            best_payload = payload
            if out_dir is not None:
                save_checkpoint(out_dir / "best.ckpt", payload)
        if out_dir is not None:
            save_checkpoint(out_dir / "last.ckpt", payload)
        history.append({"epoch": epoch, "mean_total": float(np.mean(epoch_losses)),
                        "rmse_all": rmse_all, "rmse_shadow": report.get("shadow")})
        if log is not None:
            rs = report.get("shadow")
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {history[-1]['mean_total']:.4f} "
                f"rmse_all {rmse_all if rmse_all is None else round(rmse_all, 3)} "
                f"rmse_shadow {rs if rs is None else round(rs, 3)}")

    if out_dir is not None:
        with open(out_dir / "loss.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["step", "epoch", "lr", "total",
                                                   "reg", "seg", "res"])
            writer.writeheader()
            writer.writerows(step_log)
    last_payload = _checkpoint_payload(cfg, net, opt, cfg.epochs, global_step, rng, best_rmse)
    if best_payload is None:
        best_payload = last_payload
    return TrainResult(last=last_payload, best=best_payload, history=history, steps=step_log)
