"""Representation similarity (linear CKA) and timestep-allocation experiments."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
import torch
from einops import rearrange
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from .camera import CameraTrajectory, Pose, grouped_trajectory, rotation_error, translation_error
from .codec import CodecConfig, decode_video, encode_video
from .diffusion import (STAGES, TimestepSchedule, build_timestep_schedule, flow_match_targets,
                        initial_noise, sample, stage_of)
from .errors import ShapeError
from .scenes import SceneSpec, render_frame

CKA_COLUMNS = ("stage", "layer", "t", "cka_mean", "cka_var")
SWEEP_COLUMNS = ("stage", "delta", "seed", "steps", "RE", "TE", "recon_mse")
CKA_NOTE = (
    "Linear CKA between per-layer branch tokens and a probe latent. Rows of each feature matrix\n"
    "are the spatio-temporal token positions of one clip; the probe latent is patchified to the\n"
    "same token grid. Inputs are z_t = (1 - t) z0 + t eps with fixed noise. Values are averaged\n"
    "over clips (cka_mean) with the across-clip variance (cka_var). Stage files pool every\n"
    "(timestep, clip) value of a stage and report the mean timestep of the stage in column t.\n"
)


# ---------------------------------------------------------------------------
# Linear CKA
# ---------------------------------------------------------------------------

def linear_cka(X, Y) -> float:
    """Linear centered kernel alignment of two feature matrices with matching rows."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2:
        raise ShapeError("CKA inputs must be 2-D (rows = examples)")
    if X.shape[0] != Y.shape[0]:
        raise ShapeError(f"row counts differ: {X.shape[0]} vs {Y.shape[0]}")
    if X.shape[0] < 2:
        raise ShapeError("CKA needs at least 2 rows")
    if not (np.isfinite(X).all() and np.isfinite(Y).all()):
        raise ValueError("CKA inputs must be finite")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    nx = np.linalg.norm(X.T @ X)
    ny = np.linalg.norm(Y.T @ Y)
    if nx == 0.0 or ny == 0.0:
        return 0.0
    val = np.linalg.norm(Y.T @ X) ** 2 / (nx * ny)
    return float(min(max(val, 0.0), 1.0))


# ---------------------------------------------------------------------------
# Activation probes
# ---------------------------------------------------------------------------

def patchify(z: torch.Tensor, p: int) -> torch.Tensor:
    """``(B, T', C, h, w)`` -> ``(B, T' (h/p) (w/p), C p p)`` in token order."""
    return rearrange(z, "b t c (h p) (w q) -> b (t h w) (c p q)", p=p, q=p)


@dataclass
class LayerProbe:
    layer: int
    rgb: np.ndarray        # (B, rows, D)
    depth: np.ndarray      # (B, rows, D)


@torch.no_grad()
def probe_activations(model, batch: dict, t: float, seed: int = 0):
    """Per-layer branch tokens and probe targets at noise level ``t``.

    ``batch`` holds ``z_rgb``, ``z_depth`` and the conditioning tensors.
    Returns ``(layers, targets)`` where ``layers`` has one :class:`LayerProbe`
    per block and ``targets`` maps ``rays`` / ``depth_latent`` to
    ``(B, rows, C' p^2)`` arrays aligned with the token rows.
    """
    model.eval()
    z_rgb, z_dep = batch["z_rgb"], batch["z_depth"]
    eps = initial_noise(z_rgb.shape, seed, z_rgb.dtype)
    tt = torch.full((z_rgb.shape[0],), float(t), dtype=z_rgb.dtype)
    zr, _ = flow_match_targets(z_rgb, eps, tt)
    zd, _ = flow_match_targets(z_dep, eps, tt)
    gamma = 1 if model.has_fusion else 0
    _, _, acts_a, acts_b = model(zr, zd, tt, batch["cond_rgb"], batch["cond_depth"], batch["rays"],
                                 batch["text_ids"], gamma=gamma, return_activations=True)
    p = model.cfg.patch_size
    targets = {
        "rays": patchify(model.encode_rays(batch["rays"]), p).double().numpy(),
        "depth_latent": patchify(z_dep, p).double().numpy(),
    }
    layers = [LayerProbe(k, a.double().numpy(), b.double().numpy())
              for k, (a, b) in enumerate(zip(acts_a, acts_b), start=1)]
    return layers, targets


PROBE_PAIRS = (("rgb", "rays"), ("depth", "rays"), ("rgb", "depth_latent"))


def cka_table(model, batch: dict, schedule: TimestepSchedule, seed: int = 0) -> dict:
    """``{(branch, target): rows}`` with rows ``(stage, layer, t, mean, var, values)``."""
    out = {pair: [] for pair in PROBE_PAIRS}
    for t in schedule.timesteps:
        layers, targets = probe_activations(model, batch, t, seed)
        for lp in layers:
            for branch, target in PROBE_PAIRS:
                X = getattr(lp, branch)
                vals = np.array([linear_cka(X[i], targets[target][i]) for i in range(X.shape[0])])
                out[(branch, target)].append((stage_of(t), lp.layer, t, vals.mean(), vals.var(), vals))
    return out


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([x if isinstance(x, (str, int, np.integer)) else repr(float(x)) for x in r])
    return buf.getvalue()


def cka_vs_stage_report(model, dataset, schedule: TimestepSchedule, clips: int = 4, seed: int = 0) -> dict:
    """CSV texts keyed by file name.

    ``cka_<branch>_<target>.csv`` holds one row per (timestep, layer);
    ``cka_<branch>_<target>_stages.csv`` pools each stage.
    """
    n = min(clips, len(dataset))
    idx = torch.arange(n)
    batch = {"z_rgb": dataset.z_rgb[idx], "z_depth": dataset.z_depth[idx], **dataset.conditions(idx)}
    table = cka_table(model, batch, schedule, seed)
    files = {}
    for (branch, target), rows in table.items():
        name = f"cka_{branch}_{target}"
        rows = sorted(rows, key=lambda r: (-r[2], r[1]))
        files[f"{name}.csv"] = _csv_text(CKA_COLUMNS, [r[:5] for r in rows])
        agg = []
        for s in STAGES:
            for layer in sorted({r[1] for r in rows}):
                sel = [r for r in rows if r[0] == s and r[1] == layer]
                if not sel:
                    continue
                vals = np.concatenate([r[5] for r in sel])
                agg.append((s, layer, np.mean([r[2] for r in sel]), vals.mean(), vals.var()))
        files[f"{name}_stages.csv"] = _csv_text(CKA_COLUMNS, agg)
    files["cka_notes.txt"] = CKA_NOTE
    return files


def read_csv_rows(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


# ---------------------------------------------------------------------------
# Pose recovery by analysis-by-synthesis
# ---------------------------------------------------------------------------

def static_group_latent(frame: np.ndarray, codec_cfg: CodecConfig) -> np.ndarray:
    """Latent of one temporal group whose four frames all equal ``frame``."""
    return encode_video(np.repeat(frame[None], 5, axis=0), codec_cfg)[1]


def _perturb(base: Pose, x: np.ndarray) -> Pose:
    R = base.rotation @ Rotation.from_rotvec(x[:3]).as_matrix()
    return Pose(R, base.translation + base.rotation @ x[3:])


# initial Powell search directions: radians for rotation, scene units for translation
POWELL_DIRECTIONS = np.diag([0.05, 0.05, 0.05, 0.1, 0.1, 0.1])


def estimate_trajectory(z_rgb: np.ndarray, scene: SceneSpec, first_pose: Pose, intr, H: int, W: int,
                        codec_cfg: CodecConfig, max_evals: int = 250) -> CameraTrajectory:
    """Fit one camera pose per latent group ``k >= 1`` by re-rendering the known scene.

    ``z_rgb`` is an unstandardized RGB latent ``(T', C', h, w)``. Group 0 is
    the conditioning frame and keeps ``first_pose``. Each later group starts
    from the previous estimate and minimizes the squared latent residual of a
    static render with Powell's method, so the result has ``T'`` poses.
    """
    poses = [first_pose]
    step = np.zeros(6)
    direc = POWELL_DIRECTIONS.copy()    # Powell updates it in place; later groups reuse the learned directions
    for k in range(1, z_rgb.shape[0]):
        target = z_rgb[k]
        base = poses[-1]

        def cost(x):
            rgb, _, _ = render_frame(scene, _perturb(base, x), intr, H, W)
            return float(((static_group_latent(rgb, codec_cfg) - target) ** 2).mean())

        # start from the previous inter-group motion (constant velocity)
        x0 = step if cost(step) < cost(np.zeros(6)) else np.zeros(6)
        res = minimize(cost, x0, method="Powell",
                       options={"maxfev": max_evals, "xtol": 1e-4, "ftol": 1e-9, "direc": direc})
        step = res.x
        poses.append(_perturb(base, res.x))
    return CameraTrajectory(intr, poses, W, H)


def pose_errors(z_rgb: np.ndarray, scene: SceneSpec, traj: CameraTrajectory, H: int, W: int,
                codec_cfg: CodecConfig, max_evals: int = 250) -> tuple[float, float]:
    """``(RE, TE)`` of the fitted trajectory against the group-averaged ground truth."""
    gt = grouped_trajectory(traj)
    est = estimate_trajectory(z_rgb, scene, traj.poses[0], gt.intrinsics_at(0), H, W, codec_cfg, max_evals)
    return rotation_error(est, gt), translation_error(est, gt)


# ---------------------------------------------------------------------------
# Timestep allocation sweep
# ---------------------------------------------------------------------------

def sweep_schedules(base: int, deltas, stages) -> list[tuple[str, int, TimestepSchedule]]:
    """Unique ``(stage, delta, schedule)``; every ``delta = 0`` collapses to stage ``none``."""
    out, seen = [], set()
    for d in deltas:
        for s in stages:
            key = ("none", 0) if d == 0 else (s, d)
            if key in seen:
                continue
            seen.add(key)
            out.append((*key, build_timestep_schedule(base, key[1], key[0])))
    return sorted(out, key=lambda r: (r[1], r[0]))


@dataclass
class EvalClip:
    """Held-out clip with the scene needed to re-render it."""

    index: int
    scene: SceneSpec
    trajectory: CameraTrajectory
    rgb: np.ndarray


def generate_rgb_latent(model, dataset, i: int, schedule: TimestepSchedule, seed: int,
                        rgb_only: bool = False) -> np.ndarray:
    """Sample clip ``i`` of ``dataset`` and return its unstandardized RGB latent."""
    cond = dataset.conditions([i])
    z_rgb, _ = sample(model, cond, schedule, seed=seed, rgb_only=rgb_only)
    return dataset.stats.destandardize(z_rgb[0].double().numpy(), "rgb")


def stage_allocation_sweep(model, dataset, clips: list, codec_cfg: CodecConfig, base: int = 15,
                           deltas=(0, 5, 10), stages=STAGES, seeds=(0, 1, 2),
                           max_evals: int = 250, rgb_only: bool = False) -> str:
    """CSV text with one row per (schedule, seed); metrics are averaged over ``clips``.

    ``clips`` are :class:`EvalClip` entries aligned with ``dataset`` rows.
    ``recon_mse`` is the pixel MSE between the decoded sample and the render.
    """
    rows = []
    for stage, delta, sched in sweep_schedules(base, deltas, stages):
        for seed in seeds:
            re_, te_, mse_ = [], [], []
            for c in clips:
                z = generate_rgb_latent(model, dataset, c.index, sched, seed, rgb_only)
                H, W = c.rgb.shape[-2:]
                r, t = pose_errors(z, c.scene, c.trajectory, H, W, codec_cfg, max_evals)
                re_.append(r)
                te_.append(t)
                mse_.append(float(((decode_video(z, codec_cfg) - c.rgb) ** 2).mean()))
            rows.append((stage, delta, seed, len(sched), np.mean(re_), np.mean(te_), np.mean(mse_)))
    rows.sort(key=lambda r: (r[1], r[0], r[2]))
    return _csv_text(SWEEP_COLUMNS, rows)


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------

def plot_cka(csv_text: str, path, title: str = "") -> None:
    """Line chart of CKA against layer, one line per stage (needs matplotlib)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_csv_rows(csv_text)
    fig, ax = plt.subplots(figsize=(4, 3))
    for s in STAGES:
        sel = [r for r in rows if r["stage"] == s]
        if sel:
            ax.plot([int(r["layer"]) for r in sel], [float(r["cka_mean"]) for r in sel], marker="o", label=s)
    ax.set_xlabel("layer")
    ax.set_ylabel("CKA")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
