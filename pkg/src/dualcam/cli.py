"""``dualcam`` command-line entry point.

Every command reads one INI config (``--config``), applies flag overrides,
and writes the resolved config next to its outputs. Exit codes: 0 success,
1 usage/config/input error, 2 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .camera import load_trajectory, rotation_error, save_trajectory, translation_error
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .codec import (decode_video, encode_video, load_depth_raw, load_rgb, prepare_condition,
                    replicate_depth, write_video_dir)
from .config import RunConfig, __version__, int_list, load_config, parse_config, str_list
from .data import LatentStats, descriptor_id, load_training_set, ray_features
from .diffusion import (TrainConfig, build_timestep_schedule, checkpoint_state,
                        has_fusion_records, linear_schedule, make_optimizer, model_records,
                        restore_model, restore_optimizer, sample, stage_parameters, train_stage)
from .errors import ConfigError, InputError, NumericError, ShapeError, TrajectoryParseError
from .model import DualDiT, FusionSchedule
from .scenes import load_scene, make_dataset, read_manifest

log = logging.getLogger("dualcam")

EVAL_SEED_OFFSET = 100_000
STAGE_NAMES = {1: "decoupled", 2: "fusion"}


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def write_run_config(out: Path, cfg: RunConfig) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.ini"
    path.write_text(cfg.to_text(), encoding="utf-8", newline="\n")
    return path


def fusion_schedule(cfg: RunConfig) -> FusionSchedule:
    mc = cfg.model_config()
    if cfg.model.schedule == "auto":
        return FusionSchedule.default(mc.num_blocks)
    return FusionSchedule.parse(cfg.model.schedule)


def train_config(cfg: RunConfig, stage: int) -> TrainConfig:
    tr = cfg.train
    return TrainConfig(steps=tr.stage1_steps if stage == 1 else tr.stage2_steps, batch_size=tr.batch_size,
                       lr=tr.lr, betas=(tr.beta1, tr.beta2), adam_eps=tr.adam_eps,
                       depth_weight=tr.depth_weight, seed=cfg.run.seed, rgb_only=tr.rgb_only,
                       checkpoint_every=tr.checkpoint_every)


def load_model(path) -> tuple[DualDiT, LatentStats, RunConfig, dict]:
    """Rebuild a model from a checkpoint; returns ``(model, stats, config, records)``."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    rec, text = load_checkpoint(path)
    cfg = parse_config(text)
    model = DualDiT(cfg.model_config())
    if has_fusion_records(rec):
        model.add_fusion(fusion_schedule(cfg))
    restore_model(model, rec)
    return model, LatentStats.from_records(rec), cfg, rec


def _truncate_log(path: Path, start_step: int) -> None:
    if not path.exists():
        return
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) < start_step]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(keep)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_render_data(cfg: RunConfig, split: str = "train") -> Path:
    d = cfg.data
    if split == "train":
        root, n, seed = Path(d.root), d.clips, cfg.run.seed
    elif split == "eval":
        root, n, seed = Path(d.eval_root), d.eval_clips, cfg.run.seed + EVAL_SEED_OFFSET
    else:
        raise UsageError(f"unknown split {split!r}")
    manifest = make_dataset(root, n, d.frames, d.height, d.width, seed=seed, max_stride=d.max_stride)
    write_run_config(root, cfg)
    return manifest


def cmd_train(cfg: RunConfig, stage: int, init=None, resume=None) -> Path:
    """Train one stage; returns the final checkpoint path ``<out>/stage<n>.ckpt``."""
    if stage not in STAGE_NAMES:
        raise UsageError("--stage must be 1 or 2")
    name = STAGE_NAMES[stage]
    out = Path(cfg.run.out)
    ckpt_path = out / f"stage{stage}.ckpt"
    log_path = out / f"train_stage{stage}.csv"
    tcfg = train_config(cfg, stage)
    start, rec = 0, None

    if resume is not None:
        model, stats, _, rec = load_model(resume)
        done, saved_stage = checkpoint_state(rec)
        if saved_stage != name:
            raise UsageError(f"{resume} is a {saved_stage} checkpoint, not stage {stage}")
        start = done
    elif stage == 1:
        torch.manual_seed(cfg.run.seed)
        model, stats = DualDiT(cfg.model_config()), None
    else:
        init = Path(init) if init is not None else ckpt_path.with_name("stage1.ckpt")
        if not init.is_file():
            raise UsageError(f"stage 2 needs a stage-1 checkpoint; not found: {init}")
        if tcfg.rgb_only:
            raise ConfigError("rgb_only models have no fusion stage")
        model, stats, _, init_rec = load_model(init)
        if checkpoint_state(init_rec)[1] != "decoupled":
            raise UsageError(f"{init} is not a stage-1 checkpoint")
        torch.manual_seed(cfg.run.seed)     # fusion bottleneck init
        model.add_fusion(fusion_schedule(cfg))

    data = load_training_set(cfg.data.root, cfg.codec, stats)
    if stats is None:
        stats = data.stats
    params = stage_parameters(model, name, tcfg.rgb_only)
    opt = make_optimizer(params, tcfg)
    if rec is not None:
        restore_optimizer(opt, params, rec)
    write_run_config(out, cfg)
    text = cfg.to_text()
    if start > 0:
        _truncate_log(log_path, start)

    def save(step_done):
        save_checkpoint(ckpt_path, model_records(model, stats, opt, params, step_done, name), text)

    def on_step(step, _opt):
        if tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
            save(step + 1)

    train_stage(model, data, tcfg, name, start_step=start, optimizer=opt, on_step=on_step, log_path=log_path)
    save(tcfg.steps)
    return ckpt_path


def build_conditions(model: DualDiT, stats: LatentStats, cfg: RunConfig, traj, image=None, depth=None,
                     descriptor: str = "") -> dict:
    d = cfg.data
    T, H, W = traj.frame_count, traj.height, traj.width
    if (T, H, W) != (d.frames, d.height, d.width):
        raise ShapeError(f"trajectory is {T} frames at {W}x{H}; the model expects {d.frames} frames "
                         f"at {d.width}x{d.height}")
    rays = ray_features(traj, H, W)
    Tl, C = rays.shape[0], cfg.codec.latent_channels
    zeros = np.zeros((Tl, C, H // 8, W // 8))
    c_rgb, c_dep = zeros, zeros
    if image is not None:
        img = load_rgb(image)
        if img.shape != (3, H, W):
            raise ShapeError(f"image {image} is {img.shape[2]}x{img.shape[1]}, expected {W}x{H}")
        c_rgb = prepare_condition(stats.standardize(encode_video(img[None], cfg.codec), "rgb"), Tl)
    if depth is not None:
        dimg = load_depth_raw(depth)
        if dimg.shape != (H, W):
            raise ShapeError(f"depth {depth} is {dimg.shape[1]}x{dimg.shape[0]}, expected {W}x{H}")
        z = encode_video(replicate_depth(dimg[None, None]), cfg.codec)
        c_dep = prepare_condition(stats.standardize(z, "depth"), Tl)

    def f32(a):
        return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))[None]

    return {"cond_rgb": f32(c_rgb), "cond_depth": f32(c_dep), "rays": f32(rays),
            "text_ids": torch.tensor([descriptor_id(descriptor)], dtype=torch.long)}


def sampling_schedule(s):
    if s.base_steps > 0:
        return build_timestep_schedule(s.base_steps, s.delta, s.delta_stage)
    return linear_schedule(s.steps)


def cmd_sample(cfg: RunConfig, checkpoint, trajectory, image=None, depth=None) -> Path:
    model, stats, ck_cfg, _ = load_model(checkpoint)
    # architecture, codec and clip geometry come from the checkpoint
    cfg = replace(cfg, model=ck_cfg.model, model_overrides=dict(ck_cfg.model_overrides), codec=ck_cfg.codec,
                  data=replace(cfg.data, frames=ck_cfg.data.frames, height=ck_cfg.data.height,
                               width=ck_cfg.data.width),
                  train=replace(cfg.train, rgb_only=ck_cfg.train.rgb_only))
    for p in (trajectory, image, depth):
        if p is not None and not Path(p).is_file():
            raise UsageError(f"file not found: {p}")
    traj = load_trajectory(trajectory)
    cond = build_conditions(model, stats, cfg, traj, image, depth, cfg.sample.descriptor)
    sched = sampling_schedule(cfg.sample)
    rgb_only = cfg.train.rgb_only
    z_rgb, z_dep = sample(model, cond, sched, seed=cfg.run.seed, gamma=1 if model.has_fusion else 0,
                          rgb_only=rgb_only)
    out = Path(cfg.run.out)
    write_run_config(out, cfg)
    rgb = decode_video(stats.destandardize(z_rgb[0].double().numpy(), "rgb"), cfg.codec)
    write_video_dir(out / "rgb", np.clip(rgb, -1.0, 1.0), "rgb")
    if not rgb_only:
        dep = decode_video(stats.destandardize(z_dep[0].double().numpy(), "depth"), cfg.codec)
        rel = np.clip((dep.mean(axis=1, keepdims=True) + 1.0) / 2.0, 0.0, 1.0)
        write_video_dir(out / "depth", rel, "depth", depth_range=(0.0, 1.0))
    save_trajectory(out / "trajectory.txt", traj)
    (out / "schedule.txt").write_text(sched.to_text(), encoding="utf-8", newline="\n")
    return out


def cmd_eval_pose(traj_gt, traj_pred) -> tuple[float, float]:
    for p in (traj_gt, traj_pred):
        if not Path(p).is_file():
            raise UsageError(f"trajectory file not found: {p}")
    a, b = load_trajectory(traj_gt), load_trajectory(traj_pred)
    return rotation_error(a, b), translation_error(a, b)


def cmd_analyze(cfg: RunConfig, checkpoint, mode: str) -> Path:
    from . import analysis

    if mode not in ("cka", "schedule"):
        raise UsageError(f"unknown analysis mode {mode!r}")
    model, stats, ck_cfg, _ = load_model(checkpoint)
    cfg = replace(cfg, model=ck_cfg.model, model_overrides=dict(ck_cfg.model_overrides), codec=ck_cfg.codec)
    a = cfg.analysis
    out = Path(cfg.run.out) / f"analysis_{mode}"
    if mode == "cka":
        data = load_training_set(cfg.data.root, cfg.codec, stats)
        files = analysis.cka_vs_stage_report(model, data, build_timestep_schedule(a.base_steps),
                                             clips=a.probe_clips, seed=cfg.run.seed)
    else:
        root = Path(cfg.data.eval_root)
        if not (root / "manifest.txt").is_file():
            raise UsageError(f"no evaluation set at {root} (run `dualcam render-data --split eval`)")
        entries = read_manifest(root)[:a.probe_clips]
        data = load_training_set(root, cfg.codec, stats)
        clips = [analysis.EvalClip(i, load_scene(root, e), data.trajectories[i],
                                   _load_rgb_frames(root, e)) for i, e in enumerate(entries)]
        files = {"schedule_sweep.csv": analysis.stage_allocation_sweep(
            model, data, clips, cfg.codec, base=a.base_steps, deltas=int_list(a.deltas),
            stages=str_list(a.stages), seeds=int_list(a.seeds), max_evals=a.pose_fit_evals,
            rgb_only=ck_cfg.train.rgb_only)}
    write_run_config(out, cfg)
    for fname, text in sorted(files.items()):
        (out / fname).write_text(text, encoding="utf-8", newline="\n")
        if a.plot and fname.startswith("cka_") and fname.endswith(".csv"):
            analysis.plot_cka(text, out / fname.replace(".csv", ".png"), fname[:-4])
    return out


def _load_rgb_frames(root, entry):
    from .scenes import load_clip
    return load_clip(root, entry).rgb


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualcam", description="Dual-branch camera-controlled video diffusion toolkit.")
    p.add_argument("--version", action="version", version=f"dualcam {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (overrides [run] out)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render-data", parents=[common], help="render a synthetic RGB-D dataset")
    r.add_argument("--split", choices=("train", "eval"), default="train")
    r.add_argument("--root", help="dataset directory (overrides [data] root or eval_root)")
    r.add_argument("--clips", type=int)

    t = sub.add_parser("train", parents=[common], help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--init", help="stage-1 checkpoint for stage 2 (default <out>/stage1.ckpt)")
    t.add_argument("--resume", help="continue from a checkpoint of the same stage")
    t.add_argument("--steps", type=int, help="step count for this stage")
    t.add_argument("--data", help="training dataset directory")

    s = sub.add_parser("sample", parents=[common], help="generate RGB and depth frames")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--trajectory", required=True)
    s.add_argument("--image", help="first-frame RGB PNG (omit for text-only conditioning)")
    s.add_argument("--depth", help="first-frame depth PNG")
    s.add_argument("--descriptor")
    s.add_argument("--steps", type=int)
    s.add_argument("--base-steps", type=int)
    s.add_argument("--delta", type=int)
    s.add_argument("--delta-stage", choices=("none", "early", "mid", "late"))

    e = sub.add_parser("eval-pose", help="rotation and translation error between two trajectories")
    e.add_argument("traj_gt")
    e.add_argument("traj_pred")

    a = sub.add_parser("analyze", parents=[common], help="CKA curves or timestep-allocation sweep")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--mode", choices=("cka", "schedule"), required=True)
    a.add_argument("--data", help="dataset directory for cka mode")
    a.add_argument("--eval-data", help="evaluation dataset directory for schedule mode")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    cfg = cfg.with_values("run", seed=getattr(args, "seed", None), out=getattr(args, "out", None))
    cmd = args.command
    if cmd == "render-data":
        key = "root" if args.split == "train" else "eval_root"
        cfg = cfg.with_values("data", **{key: args.root})
        cfg = cfg.with_values("data", **{"clips" if args.split == "train" else "eval_clips": args.clips})
    elif cmd == "train":
        cfg = cfg.with_values("data", root=args.data)
        key = "stage1_steps" if args.stage == 1 else "stage2_steps"
        cfg = cfg.with_values("train", **{key: args.steps})
    elif cmd == "sample":
        cfg = cfg.with_values("sample", descriptor=args.descriptor, steps=args.steps, base_steps=args.base_steps,
                              delta=args.delta, delta_stage=args.delta_stage)
    elif cmd == "analyze":
        cfg = cfg.with_values("data", root=args.data, eval_root=args.eval_data)
    return cfg


def run(args) -> None:
    if args.command == "eval-pose":
        re_, te_ = cmd_eval_pose(args.traj_gt, args.traj_pred)
        print(f"RE={re_:.4f} TE={te_:.4f}")
        return
    cfg = resolve_config(args)
    if args.command == "render-data":
        print(cmd_render_data(cfg, args.split))
    elif args.command == "train":
        print(cmd_train(cfg, args.stage, init=args.init, resume=args.resume))
    elif args.command == "sample":
        print(cmd_sample(cfg, args.checkpoint, args.trajectory, args.image, args.depth))
    elif args.command == "analyze":
        print(cmd_analyze(cfg, args.checkpoint, args.mode))


USAGE_ERRORS = (UsageError, ConfigError, InputError, TrajectoryParseError, CheckpointError, FileNotFoundError)
RUNTIME_ERRORS = (NumericError, ShapeError, OSError, RuntimeError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except USAGE_ERRORS as exc:
        print(f"dualcam: error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"dualcam: runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
