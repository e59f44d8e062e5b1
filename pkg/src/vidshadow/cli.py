"""Command-line surface: gen / train / eval / remove / s2r.

Exit codes: 0 success, 2 usage error, 3 IO failure, 4 numeric failure.
Every command writes a run manifest (atomically, at the end of the run) into
its output directory so a run can be reproduced from the manifest alone.
The PSTNET_THREADS environment variable caps worker parallelism.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import subprocess
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .context import FlowProvider
from .core import (
    FormatError,
    Frame,
    ValidationError,
    frame_paths,
    load_frame,
    save_frame,
)
from .network import VARIANTS
from .objective import LossWeights
from .s2r import s2r_pipeline
from .synthgen import generate_dataset
from .trainer import (
    NonFiniteLossError,
    TrainConfig,
    build_model,
    config_from_dict,
    evaluate_model,
    infer_video,
    load_checkpoint,
    load_split,
    load_video,
    train,
    video_flow_for_frame,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class UsageError(ValueError):
    pass


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except Exception:
        return "unknown"


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def write_run_manifest(out_dir, command: str, config: dict, seed,
                       started: str, artifacts: list) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "git_describe": _git_describe(),
        "version": __version__,
        "started": started,
        "ended": _now(),
        "artifacts": [str(a) for a in artifacts],
    }
    tmp = out_dir / "run_manifest.json.tmp"
    tmp.write_text(json.dumps(doc, indent=1) + "\n")
    os.replace(tmp, out_dir / "run_manifest.json")


# ---------------------------------------------------------------------------
# Train config files (flat key = value text)
# ---------------------------------------------------------------------------

_BOOL = {"true": True, "false": False, "1": True, "0": False}

CONFIG_KEYS = {
    "crop": int, "batch": int, "epochs": int, "lr_init": float, "lr_final": float,
    "seed": int, "flip_aug": "bool", "variant": str,
    "weights.alpha": float, "weights.beta": float, "weights.gamma": float,
    "aeem.grid": int, "aeem.token_dim": int, "aeem.n_blocks": int,
    "aeem.n_heads": int, "aeem.mlp_ratio": float, "aeem.patch_pool": int,
    "aeem.per_channel": "bool",
    "physical.base_channels": int, "physical.depth": int, "physical.branch_scale": int,
    "fusion.width": int, "fusion.k": int,
    "flow.provider": str,
}
REQUIRED_KEYS = ("seed",)


def parse_config_file(path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no config file at {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key '{key}'")
        kind = CONFIG_KEYS[key]
        try:
            if kind == "bool":
                values[key] = _BOOL[raw.lower()]
            else:
                values[key] = kind(raw)
        except (KeyError, ValueError) as e:
            raise UsageError(f"{path}:{lineno}: bad value for '{key}': {raw!r}") from e
    for key in REQUIRED_KEYS:
        if key not in values:
            raise UsageError(f"{path}: missing required config key '{key}'")
    return build_train_config(values)


def build_train_config(values: dict) -> TrainConfig:
    """Assemble a TrainConfig from flat dotted keys in one construction."""
    base = asdict(TrainConfig(seed=values["seed"]))
    for key, val in values.items():
        if key == "variant":
            if val not in VARIANTS:
                raise UsageError(f"unknown variant '{val}'")
            base["net"]["variant"] = val
        elif key == "flow.provider":
            base["flow"]["kind"] = val
        elif "." in key:
            group, name = key.split(".", 1)
            target = base[group] if group == "weights" else base["net"][group]
            target[name] = val
        else:
            base[key] = val
    return config_from_dict(base)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _parse_size(text: str) -> tuple[int, int]:
    try:
        w_str, h_str = text.lower().split("x")
        w, h = int(w_str), int(h_str)
    except ValueError as e:
        raise UsageError(f"--size must look like 96x96, got {text!r}") from e
    if w % 2 or h % 2:
        raise UsageError(f"--size dims must be even (got {w}x{h})")
    if w < 8 or h < 8:
        raise UsageError(f"--size dims must be >= 8 (got {w}x{h})")
    return w, h


def cmd_gen(args) -> int:
    started = _now()
    w, h = _parse_size(args.size)
    out = Path(args.out)
    manifest = generate_dataset(out, n_videos=args.videos, frames=args.frames,
                                height=h, width=w, seed=args.seed,
                                split_ratio=args.split)
    write_run_manifest(out, "gen",
                       {"videos": args.videos, "frames": args.frames,
                        "size": args.size, "split": args.split},
                       args.seed, started,
                       [out / "manifest.json"] + [out / s for s in ("train", "test")])
    print(f"wrote {args.videos} videos ({len(manifest['train'])} train / "
          f"{len(manifest['test'])} test) under {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = _now()
    cfg = parse_config_file(args.config)
    out = Path(args.out)
    resume = None
    if args.resume:
        resume = load_checkpoint(out / "last.ckpt" if args.resume == "auto" else args.resume)
    result = train(cfg, args.data, out_dir=out, resume=resume)
    write_run_manifest(out, "train",
                       {"data": str(args.data), "config": str(args.config)},
                       cfg.seed, started,
                       [out / "best.ckpt", out / "last.ckpt", out / "loss.csv"])
    best = result.history[-1] if result.history else {}
    print(f"training done: {len(result.steps)} steps, "
          f"final rmse_all {best.get('rmse_all')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = _now()
    payload = load_checkpoint(args.ckpt)
    net, cfg = build_model(payload)
    videos = load_split(args.data, args.split)
    report = evaluate_model(net, videos, cfg.flow, include_baseline=True)
    doc = dict(report["model"])
    doc["input_baseline"] = report["input_baseline"]
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(doc, indent=1) + "\n")
    write_run_manifest(report_path.parent, "eval",
                       {"data": str(args.data), "ckpt": str(args.ckpt),
                        "split": args.split},
                       payload["config"]["seed"], started, [report_path])
    shown = {k: round(v, 4) for k, v in doc.items() if isinstance(v, float)}
    print(f"eval ({args.split}): {shown}")
    return EXIT_OK


def _load_video_frames(video_dir: Path) -> list[Frame]:
    video_dir = Path(video_dir)
    frame_dir = video_dir / "shadow" if (video_dir / "shadow").is_dir() else video_dir
    files = sorted(frame_dir.glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG frames under {frame_dir}")
    return [load_frame(p) for p in files]


class _FrameList:
    def __init__(self, frames):
        self.shadow = np.stack([f.data for f in frames])
        self.frames = len(frames)


def cmd_remove(args) -> int:
    started = _now()
    payload = load_checkpoint(args.ckpt)
    net, _cfg = build_model(payload)
    frames = _load_video_frames(args.video)
    provider = FlowProvider(kind=args.flow)
    seq = _FrameList(frames)
    if provider.kind == "ground_truth":
        record = load_video(args.video)
        flows = [video_flow_for_frame(record, t, provider) for t in range(record.frames)]
    else:
        flows = [video_flow_for_frame(seq, t, provider) for t in range(len(frames))]
    preds = infer_video(net, frames, flows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, pred in enumerate(preds):
        save_frame(pred, out / f"{t:03d}.png")
    write_run_manifest(out, "remove",
                       {"ckpt": str(args.ckpt), "video": str(args.video),
                        "flow": args.flow},
                       payload["config"]["seed"], started,
                       [out / f"{t:03d}.png" for t in range(len(preds))])
    print(f"wrote {len(preds)} frames to {out}")
    return EXIT_OK


def _load_reference_pool(refs_dir: Path) -> list[Frame]:
    refs_dir = Path(refs_dir)
    manifest_path = refs_dir / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        return [load_frame(frame_paths(refs_dir / "train" / vid, "shadow", 0))
                for vid in manifest["train"]]
    files = sorted(refs_dir.glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no reference PNGs (or dataset manifest) under {refs_dir}")
    return [load_frame(p) for p in files]


def cmd_s2r(args) -> int:
    started = _now()
    payload = load_checkpoint(args.ckpt)
    frames = _load_video_frames(args.video)
    refs = _load_reference_pool(args.refs)
    preds = s2r_pipeline(frames, payload, refs, delta=args.delta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, pred in enumerate(preds):
        save_frame(pred, out / f"{t:03d}.png")
    write_run_manifest(out, "s2r",
                       {"ckpt": str(args.ckpt), "video": str(args.video),
                        "refs": str(args.refs), "delta": args.delta},
                       payload["config"]["seed"], started,
                       [out / f"{t:03d}.png" for t in range(len(preds))])
    print(f"wrote {len(preds)} adapted frames to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidshadow",
                                     description="video shadow removal toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a paired shadow video dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--size", required=True, help="WxH, e.g. 96x96")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--split", type=float, default=0.7)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the removal network")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", nargs="?", const="auto", default=None,
                   help="resume from last.ckpt (or a given checkpoint path)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint in LAB RMSE")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("remove", help="run shadow removal over a frame directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--flow", default="block_matching",
                   choices=("block_matching", "ground_truth"))
    p.set_defaults(func=cmd_remove)

    p = sub.add_parser("s2r", help="synthetic-to-real adapted removal")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--delta", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_s2r)
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("PSTNET_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"error: PSTNET_THREADS must be an integer, got {threads!r}",
                  file=sys.stderr)
            return EXIT_USAGE
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, PermissionError, FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
