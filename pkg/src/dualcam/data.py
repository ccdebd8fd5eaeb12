"""Turn rendered clips into standardized latent training tensors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .camera import (CameraTrajectory, downsample_rayfield, generate_plucker_rays,
                     normalize_to_first_frame)
from .codec import CodecConfig, encode_video, prepare_condition, replicate_depth
from .scenes import DESCRIPTORS, load_clip, read_manifest


@dataclass
class LatentStats:
    """Per-channel mean/std used to standardize codec latents (one pair per modality)."""

    rgb_mean: np.ndarray
    rgb_std: np.ndarray
    depth_mean: np.ndarray
    depth_std: np.ndarray

    @classmethod
    def fit(cls, z_rgb: np.ndarray, z_depth: np.ndarray) -> "LatentStats":
        def ms(z):
            axes = tuple(i for i in range(z.ndim) if i != z.ndim - 3)
            return z.mean(axis=axes), np.maximum(z.std(axis=axes), 1e-3)
        rm, rs = ms(z_rgb)
        dm, ds = ms(z_depth)
        return cls(rm.astype(np.float32), rs.astype(np.float32), dm.astype(np.float32), ds.astype(np.float32))

    def _pair(self, kind):
        m, s = (self.rgb_mean, self.rgb_std) if kind == "rgb" else (self.depth_mean, self.depth_std)
        return m[:, None, None], s[:, None, None]

    def standardize(self, z, kind):
        m, s = self._pair(kind)
        return (z - m) / s

    def destandardize(self, z, kind):
        m, s = self._pair(kind)
        return z * s + m

    def to_records(self) -> dict:
        return {f"stats.{k}": getattr(self, k) for k in ("rgb_mean", "rgb_std", "depth_mean", "depth_std")}

    @classmethod
    def from_records(cls, rec: dict) -> "LatentStats":
        return cls(*(rec[f"stats.{k}"] for k in ("rgb_mean", "rgb_std", "depth_mean", "depth_std")))


def ray_features(traj: CameraTrajectory, H: int, W: int) -> np.ndarray:
    """First-frame-relative Plücker rays, pixel-shuffled and group-averaged: ``(T', 384, h, w)``."""
    return downsample_rayfield(generate_plucker_rays(normalize_to_first_frame(traj), H, W), 8)


def descriptor_id(tag: str) -> int:
    return DESCRIPTORS.index(tag) if tag in DESCRIPTORS else 0


def encode_clip(rgb, depth, codec_cfg: CodecConfig):
    """Raw (unstandardized) target and first-frame latents for one clip."""
    d3 = replicate_depth(depth)
    z_rgb = encode_video(rgb, codec_cfg)
    z_dep = encode_video(d3, codec_cfg)
    c_rgb = encode_video(rgb[:1], codec_cfg)
    c_dep = encode_video(replicate_depth(depth[:1]), codec_cfg)
    return z_rgb, z_dep, c_rgb, c_dep


def condition_latent(first_latent: np.ndarray, stats: LatentStats, kind: str, T_latent: int) -> np.ndarray:
    return prepare_condition(stats.standardize(first_latent, kind), T_latent)


@dataclass
class TrainingSet:
    z_rgb: torch.Tensor       # (N, T', C', h, w) standardized
    z_depth: torch.Tensor
    cond_rgb: torch.Tensor
    cond_depth: torch.Tensor
    rays: torch.Tensor        # (N, T', 384, h, w)
    text: torch.Tensor        # (N,) long
    stats: LatentStats
    clip_ids: list
    trajectories: list

    def __len__(self):
        return self.z_rgb.shape[0]

    def conditions(self, idx) -> dict:
        idx = torch.as_tensor(idx, dtype=torch.long)
        return {"cond_rgb": self.cond_rgb[idx], "cond_depth": self.cond_depth[idx],
                "rays": self.rays[idx], "text_ids": self.text[idx]}

    @property
    def latent_shape(self):
        return tuple(self.z_rgb.shape[1:])


def build_training_set(clips, codec_cfg: CodecConfig, stats: LatentStats | None = None) -> TrainingSet:
    """``clips``: iterable of :class:`~dualcam.scenes.RenderedClip` (or objects with the same fields)."""
    raw = []
    for c in clips:
        H, W = c.rgb.shape[-2:]
        raw.append((*encode_clip(c.rgb, c.depth, codec_cfg), ray_features(c.trajectory, H, W),
                    descriptor_id(c.descriptor), c.trajectory))
    z_rgb = np.stack([r[0] for r in raw])
    z_dep = np.stack([r[1] for r in raw])
    if stats is None:
        stats = LatentStats.fit(z_rgb, z_dep)
    T = z_rgb.shape[1]
    cond_rgb = np.stack([condition_latent(r[2], stats, "rgb", T) for r in raw])
    cond_dep = np.stack([condition_latent(r[3], stats, "depth", T) for r in raw])

    def f32(a):
        return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))

    return TrainingSet(
        z_rgb=f32(stats.standardize(z_rgb, "rgb")),
        z_depth=f32(stats.standardize(z_dep, "depth")),
        cond_rgb=f32(cond_rgb), cond_depth=f32(cond_dep),
        rays=f32(np.stack([r[4] for r in raw])),
        text=torch.tensor([r[5] for r in raw], dtype=torch.long),
        stats=stats,
        clip_ids=list(range(len(raw))),
        trajectories=[r[6] for r in raw],
    )


def load_training_set(root, codec_cfg: CodecConfig, stats: LatentStats | None = None) -> TrainingSet:
    entries = read_manifest(root)
    ts = build_training_set((load_clip(root, e) for e in entries), codec_cfg, stats)
    ts.clip_ids = [e.clip_id for e in entries]
    return ts
