"""Rectified-flow objective, two-stage trainer, staged timestep schedules and Euler sampling."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .errors import ConfigError, NumericError, ShapeError
from .model import DualDiT

log = logging.getLogger(__name__)

STAGES = ("early", "mid", "late")
# (lower, upper] bounds on normalized time
STAGE_BOUNDS = {"early": (0.9, 1.0), "mid": (0.75, 0.9), "late": (0.0, 0.75)}
LOG_COLUMNS = ("step", "t", "L_rgb", "L_d", "L_total", "stage")


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def _bcast(t, like):
    if isinstance(like, torch.Tensor):
        t = torch.as_tensor(t, dtype=like.dtype)
        return t.reshape(t.shape + (1,) * (like.ndim - t.ndim))
    t = np.asarray(t, dtype=np.float64)
    return t.reshape(t.shape + (1,) * (np.ndim(like) - t.ndim))


def flow_match_targets(z0, eps, t):
    """Straight-path interpolant ``z_t = (1-t) z0 + t eps`` and velocity ``v = eps - z0``.

    ``t`` is a scalar or one value per leading batch element.
    """
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    tb = _bcast(t, z0)
    return (1 - tb) * z0 + tb * eps, eps - z0


def mse(a, b):
    return ((a - b) ** 2).mean()


def loss_terms(v_hat_rgb, v_rgb, v_hat_d, v_d, depth_weight: float = 1.0):
    """``(L_total, L_rgb, L_d)`` with ``L_total = L_rgb + depth_weight * L_d``."""
    if v_hat_rgb.shape != v_rgb.shape or v_hat_d.shape != v_d.shape:
        raise ShapeError("prediction and target shapes differ")
    l_rgb = mse(v_hat_rgb, v_rgb)
    l_d = mse(v_hat_d, v_d)
    return l_rgb + depth_weight * l_d, l_rgb, l_d


def loss_overall(v_hat_rgb, v_rgb, v_hat_d, v_d, depth_weight: float = 1.0):
    return loss_terms(v_hat_rgb, v_rgb, v_hat_d, v_d, depth_weight)[0]


# ---------------------------------------------------------------------------
# Timestep schedules
# ---------------------------------------------------------------------------

def stage_of(t: float) -> str:
    if not 0.0 < t <= 1.0:
        raise ValueError(f"t must lie in (0, 1], got {t}")
    if t > 0.9:
        return "early"
    if t > 0.75:
        return "mid"
    return "late"


@dataclass(frozen=True)
class TimestepSchedule:
    timesteps: tuple

    def __post_init__(self):
        ts = tuple(float(t) for t in self.timesteps)
        if not ts:
            raise ConfigError("schedule needs at least one timestep")
        if any(not 0.0 < t <= 1.0 for t in ts):
            raise ConfigError("timesteps must lie in (0, 1]")
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ConfigError("timesteps must be strictly decreasing")
        object.__setattr__(self, "timesteps", ts)

    def __len__(self):
        return len(self.timesteps)

    @property
    def stages(self) -> tuple:
        return tuple(stage_of(t) for t in self.timesteps)

    def counts(self) -> dict:
        st = self.stages
        return {s: st.count(s) for s in STAGES}

    def to_text(self) -> str:
        lines = ["# index t stage"]
        lines += [f"{k} {t!r} {s}" for k, (t, s) in enumerate(zip(self.timesteps, self.stages))]
        return "\n".join(lines) + "\n"


def _stage_points(stage: str, n: int) -> list:
    lo, hi = STAGE_BOUNDS[stage]
    return [hi - (hi - lo) * k / n for k in range(n)]


def build_timestep_schedule(base: int = 15, delta: int = 0, stage: str = "none") -> TimestepSchedule:
    """``base/3`` linearly spaced timesteps per stage, plus ``delta`` extra in ``stage``.

    Each stage interval ``(lo, hi]`` is sampled at ``hi - (hi - lo) k / n``,
    so the schedule always starts at ``t = 1``.
    """
    if base < 3 or base % 3:
        raise ConfigError(f"base steps must be a positive multiple of 3, got {base}")
    if delta < 0:
        raise ConfigError(f"delta must be >= 0, got {delta}")
    if stage not in STAGES + ("none",):
        raise ConfigError(f"unknown stage {stage!r}")
    if delta and stage == "none":
        raise ConfigError("delta > 0 needs a target stage")
    pts = []
    for s in STAGES:
        pts += _stage_points(s, base // 3 + (delta if s == stage else 0))
    pts = sorted(pts, reverse=True)
    for k in range(1, len(pts)):
        if pts[k] >= pts[k - 1]:
            pts[k] = pts[k - 1] - 1e-9
    return TimestepSchedule(tuple(pts))


def linear_schedule(steps: int) -> TimestepSchedule:
    """``steps`` uniformly spaced timesteps from 1 down to ``1/steps``."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    return TimestepSchedule(tuple(1.0 - k / steps for k in range(steps)))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def initial_noise(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(tuple(shape), generator=g, dtype=torch.float64).to(dtype)


def sample(model, conditions: dict, schedule: TimestepSchedule, seed: int = 0, gamma: int = 1,
           rgb_only: bool = False):
    """Euler integration of the learned velocity from noise (``t = t_0``) to ``t = 0``.

    ``model`` is a :class:`DualDiT` or any callable
    ``(z_rgb, z_depth, t, **conditions) -> (v_rgb, v_depth)``. Both branches
    start from the same noise. Returns ``(z_rgb, z_depth)``; ``z_depth`` is
    ``None`` when ``rgb_only``.
    """
    shape = conditions["cond_rgb"].shape
    eps = initial_noise(shape, seed, conditions["cond_rgb"].dtype)
    z_rgb = eps.clone()
    z_dep = None if rgb_only else eps.clone()

    if isinstance(model, DualDiT):
        if rgb_only:
            def velocity(zr, zd, t):
                return model.forward_branch("rgb", zr, t, conditions["cond_rgb"], conditions["rays"],
                                            conditions["text_ids"]), None
        else:
            def velocity(zr, zd, t):
                return model(zr, zd, t, gamma=gamma, **conditions)
    else:
        def velocity(zr, zd, t):
            return model(zr, zd, t, **conditions)

    ts = list(schedule.timesteps) + [0.0]
    with torch.no_grad():
        for k in range(len(ts) - 1):
            t = torch.full((shape[0],), ts[k], dtype=z_rgb.dtype)
            v_rgb, v_dep = velocity(z_rgb, z_dep, t)
            dt = ts[k] - ts[k + 1]
            z_rgb = z_rgb - dt * v_rgb
            if z_dep is not None:
                z_dep = z_dep - dt * v_dep
            if not torch.isfinite(z_rgb).all() or (z_dep is not None and not torch.isfinite(z_dep).all()):
                raise NumericError(f"non-finite latent at sampling step {k} (t={ts[k]})")
    return z_rgb, z_dep


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    depth_weight: float = 1.0
    seed: int = 0
    rgb_only: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.depth_weight < 0:
            raise ConfigError("depth_weight (lambda) must be >= 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")

    @classmethod
    def finetune_preset(cls, **kw) -> "TrainConfig":
        """Low-lr setting for fine-tuning a large pretrained backbone (batch 8, lr 3e-6)."""
        return cls(**{"batch_size": 8, "lr": 3e-6, **kw})


STAGE_IDS = {"decoupled": 1, "fusion": 2}


@dataclass
class TrainResult:
    rows: list = field(default_factory=list)
    optimizer: torch.optim.Optimizer | None = None
    params: list = field(default_factory=list)


def batch_for_step(data, cfg: TrainConfig, stage: str, step: int):
    """Deterministic batch draw for ``(seed, stage, step)``: indices, t, noise."""
    rng = np.random.default_rng([cfg.seed, STAGE_IDS[stage], step])
    n = len(data)
    idx = rng.permutation(n)[:cfg.batch_size] if n >= cfg.batch_size else rng.integers(n, size=cfg.batch_size)
    t = 1.0 - rng.random(cfg.batch_size)
    eps = rng.standard_normal((cfg.batch_size, *data.latent_shape))
    return (torch.as_tensor(idx, dtype=torch.long), torch.from_numpy(t.astype(np.float32)),
            torch.from_numpy(eps.astype(np.float32)))


def batch_losses(model: DualDiT, data, idx, t, eps, gamma: int, depth_weight: float, rgb_only=False):
    cond = data.conditions(idx)
    zr_t, v_r = flow_match_targets(data.z_rgb[idx], eps, t)
    if rgb_only:
        vh_r = model.forward_branch("rgb", zr_t, t, cond["cond_rgb"], cond["rays"], cond["text_ids"])
        l_rgb = mse(vh_r, v_r)
        return l_rgb, l_rgb, torch.zeros((), dtype=l_rgb.dtype)
    zd_t, v_d = flow_match_targets(data.z_depth[idx], eps, t)
    vh_r, vh_d = model(zr_t, zd_t, t, gamma=gamma, **cond)
    return loss_terms(vh_r, v_r, vh_d, v_d, depth_weight)


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.adam_eps,
                            weight_decay=0.0, foreach=False)


def stage_parameters(model: DualDiT, stage: str, rgb_only: bool = False):
    if stage == "decoupled":
        params = model.base_parameters()
        if rgb_only:
            skip = {id(p) for p in model.depth.parameters()}
            params = [p for p in params if id(p) not in skip]
        return params
    if stage == "fusion":
        if not model.has_fusion:
            raise ConfigError("fusion stage needs fusion blocks (call model.add_fusion())")
        return list(model.parameters())
    raise ConfigError(f"unknown stage {stage!r}")


def train_stage(model: DualDiT, data, cfg: TrainConfig, stage: str, *, start_step: int = 0,
                optimizer: torch.optim.Optimizer | None = None,
                on_step: Callable | None = None, log_path=None) -> TrainResult:
    """Run one training stage.

    ``decoupled`` trains with ``gamma=0`` and never touches fusion parameters;
    ``fusion`` trains every parameter with ``gamma=1``. Batches depend only
    on ``(cfg.seed, stage, step)`` so a run resumed at ``start_step`` with the
    saved optimizer state reproduces the uninterrupted log. ``on_step(step,
    optimizer)`` is called after each update (checkpoint hook).
    """
    gamma = 1 if stage == "fusion" else 0
    params = stage_parameters(model, stage, cfg.rgb_only)
    opt = optimizer or make_optimizer(params, cfg)
    model.train()
    result = TrainResult(optimizer=opt, params=params)
    writer = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = not log_path.exists() or start_step == 0
        fh = open(log_path, "w" if fresh else "a", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_COLUMNS)
    try:
        for step in range(start_step, cfg.steps):
            idx, t, eps = batch_for_step(data, cfg, stage, step)
            total, l_rgb, l_d = batch_losses(model, data, idx, t, eps, gamma, cfg.depth_weight, cfg.rgb_only)
            if not torch.isfinite(total):
                raise NumericError(f"non-finite loss at {stage} step {step}: "
                                   f"L_rgb={l_rgb.item()} L_d={l_d.item()} t={t.tolist()}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            row = (step, t.mean().item(), l_rgb.item(), l_d.item(), total.item(), stage)
            result.rows.append(row)
            if writer is not None:
                writer.writerow([row[0], *(repr(v) for v in row[1:5]), row[5]])
            if on_step is not None:
                on_step(step, opt)
    finally:
        if writer is not None:
            fh.close()
    return result


@torch.no_grad()
def evaluate_loss(model: DualDiT, data, gamma: int, depth_weight: float = 1.0, seed: int = 1234,
                  t_values=(0.1, 0.3, 0.5, 0.7, 0.85, 0.95), rgb_only=False):
    """Deterministic probe loss over every clip at fixed timesteps and noise."""
    model.eval()
    n = len(data)
    rng = np.random.default_rng([seed, 99])
    eps = torch.from_numpy(rng.standard_normal((n, *data.latent_shape)).astype(np.float32))
    idx = torch.arange(n)
    totals = []
    for tv in t_values:
        t = torch.full((n,), tv, dtype=torch.float32)
        totals.append([float(x) for x in batch_losses(model, data, idx, t, eps, gamma, depth_weight, rgb_only)])
    model.train()
    arr = np.mean(totals, axis=0)
    return {"L_total": arr[0], "L_rgb": arr[1], "L_d": arr[2]}


def read_log(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def model_records(model: DualDiT, stats=None, optimizer=None, params=None, step: int = 0,
                  stage: str = "decoupled") -> dict:
    """Flat ``name -> array`` dict for :func:`~dualcam.checkpoint.save_checkpoint`."""
    rec = {f"model.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if stats is not None:
        rec.update(stats.to_records())
    rec["state.step"] = np.array([step], dtype=np.float32)
    rec["state.stage"] = np.array([STAGE_IDS[stage]], dtype=np.float32)
    if optimizer is not None:
        pos = {id(p): i for i, p in enumerate(params)}
        for p, st in optimizer.state.items():
            i = pos[id(p)]
            rec[f"adam.{i:05d}.step"] = np.array([float(st["step"])], dtype=np.float32)
            rec[f"adam.{i:05d}.exp_avg"] = st["exp_avg"].detach().numpy()
            rec[f"adam.{i:05d}.exp_avg_sq"] = st["exp_avg_sq"].detach().numpy()
    return rec


def restore_model(model: DualDiT, rec: dict) -> None:
    """Load ``model.*`` records, adding fusion blocks first if the records hold them."""
    sd = {k[len("model."):]: torch.from_numpy(np.array(v)) for k, v in rec.items() if k.startswith("model.")}
    if any(k.startswith("fusion.") for k in sd) and not model.has_fusion:
        raise ConfigError("checkpoint has fusion blocks; call add_fusion() with its schedule first")
    model.load_state_dict(sd, strict=True)


def restore_optimizer(optimizer: torch.optim.Optimizer, params, rec: dict) -> None:
    for i, p in enumerate(params):
        key = f"adam.{i:05d}"
        if f"{key}.step" not in rec:
            continue
        if tuple(rec[f"{key}.exp_avg"].shape) != tuple(p.shape):
            raise ConfigError(f"optimizer state {i} does not match parameter shape {tuple(p.shape)}")
        optimizer.state[p] = {
            "step": torch.tensor(float(rec[f"{key}.step"][0])),
            "exp_avg": torch.from_numpy(np.array(rec[f"{key}.exp_avg"])),
            "exp_avg_sq": torch.from_numpy(np.array(rec[f"{key}.exp_avg_sq"])),
        }


def checkpoint_state(rec: dict) -> tuple[int, str]:
    """``(completed_steps, stage)`` stored in a checkpoint."""
    ids = {v: k for k, v in STAGE_IDS.items()}
    return int(rec["state.step"][0]), ids[int(rec["state.stage"][0])]


def has_fusion_records(rec: dict) -> bool:
    return any(k.startswith("model.fusion.") for k in rec)
