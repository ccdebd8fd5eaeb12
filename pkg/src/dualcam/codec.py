"""Deterministic linear stand-in for a video VAE.

Videos ``(T, 3, H, W)`` map to latents ``(T', C', H/8, W/8)`` with
``T' = (T - 1) / 4 + 1``. Frames are grouped temporally (frame 0 alone,
padded to four by repetition, then consecutive groups of four), each group
is rearranged space-to-channel by 8x into 768 channels, and a matrix with
orthonormal rows projects those channels down to ``C'``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from einops import rearrange
from PIL import Image

from .camera import orthonormal_rows
from .errors import ConfigError, ShapeError

SPATIAL = 8
TEMPORAL = 4
GROUP_CHANNELS = 3 * SPATIAL * SPATIAL * TEMPORAL  # 768

# orthonormal opponent colour basis: luma, red-green, yellow-blue
_COLOR_BASIS = np.array([
    [1.0, 1.0, 1.0],
    [1.0, -1.0, 0.0],
    [1.0, 1.0, -2.0],
]) / np.array([[np.sqrt(3)], [np.sqrt(2)], [np.sqrt(6)]])


@dataclass(frozen=True)
class CodecConfig:
    mode: str = "shape_faithful"      # lossless | shape_faithful
    channels: int = 16
    basis: str = "dct"                # dct | random
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("lossless", "shape_faithful"):
            raise ConfigError(f"unknown codec mode {self.mode!r}")
        if self.basis not in ("dct", "random"):
            raise ConfigError(f"unknown codec basis {self.basis!r}")
        if self.mode == "shape_faithful" and not 1 <= self.channels <= GROUP_CHANNELS:
            raise ConfigError(f"shape_faithful needs 1 <= C' <= {GROUP_CHANNELS}, got {self.channels}")

    @property
    def latent_channels(self) -> int:
        return GROUP_CHANNELS if self.mode == "lossless" else self.channels


def latent_shape(T: int, H: int, W: int, channels: int) -> tuple[int, int, int, int]:
    check_video_dims(T, H, W)
    return ((T - 1) // TEMPORAL + 1, channels, H // SPATIAL, W // SPATIAL)


def check_video_dims(T: int, H: int, W: int) -> None:
    if T < 1 or (T - 1) % TEMPORAL:
        raise ShapeError(f"(T-1) must be divisible by {TEMPORAL}, got T={T}")
    if H % SPATIAL or W % SPATIAL or H < 1 or W < 1:
        raise ShapeError(f"H and W must be positive multiples of {SPATIAL}, got {H}x{W}")


def _dct_matrix(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    D = np.cos(np.pi * (2 * x + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    D[0] /= np.sqrt(2.0)
    return D


def dct_basis(channels: int) -> np.ndarray:
    """Lowest-frequency separable DCT rows over a ``(4, 3, 8, 8)`` group.

    Rows are ordered by temporal frequency, then by spatial frequency with
    chroma components penalised by two frequency steps, so small ``C'``
    behaves like a low-resolution YUV code.
    """
    Dt, Ds = _dct_matrix(TEMPORAL), _dct_matrix(SPATIAL)
    keys = []
    for tau in range(TEMPORAL):
        for c in range(3):
            for u in range(SPATIAL):
                for v in range(SPATIAL):
                    cost = u + v + (2 if c else 0)
                    keys.append((tau, cost, c, u, v))
    keys.sort()
    rows = np.empty((channels, GROUP_CHANNELS))
    for n, (tau, _, c, u, v) in enumerate(keys[:channels]):
        spatial = np.outer(Ds[u], Ds[v])
        block = np.einsum("f,c,pq->fcpq", Dt[tau], _COLOR_BASIS[c], spatial)
        rows[n] = block.ravel()
    return rows


@lru_cache(maxsize=16)
def _matrices(cfg: CodecConfig):
    if cfg.mode == "lossless":
        return None, None
    P = dct_basis(cfg.channels) if cfg.basis == "dct" else orthonormal_rows(cfg.channels, GROUP_CHANNELS, cfg.seed)
    # first group is one frame repeated four times: effective map P @ Rep
    Pr = P.reshape(cfg.channels, TEMPORAL, -1).sum(axis=1)
    return P, np.linalg.pinv(Pr)


def projection_matrix(cfg: CodecConfig) -> np.ndarray:
    P, _ = _matrices(cfg)
    return np.eye(GROUP_CHANNELS) if P is None else P.copy()


def _groups(v: np.ndarray) -> np.ndarray:
    """``(T, 3, H, W) -> (T', 4, 3, H, W)`` with frame 0 repeated."""
    first = np.repeat(v[:1], TEMPORAL, axis=0)
    return np.concatenate([first, v[1:]], axis=0).reshape(-1, TEMPORAL, *v.shape[1:])


def encode_video(v: np.ndarray, cfg: CodecConfig = CodecConfig()) -> np.ndarray:
    v = np.asarray(v)
    if v.ndim != 4 or v.shape[1] != 3:
        raise ShapeError(f"expected video of shape (T, 3, H, W), got {v.shape}")
    check_video_dims(v.shape[0], v.shape[2], v.shape[3])
    g = rearrange(_groups(v), "g f c (h p) (w q) -> g (f c p q) h w", p=SPATIAL, q=SPATIAL)
    P, _ = _matrices(cfg)
    if P is None:
        return g
    return np.einsum("oc,gchw->gohw", P, g)


def decode_video(z: np.ndarray, cfg: CodecConfig = CodecConfig()) -> np.ndarray:
    z = np.asarray(z)
    C = cfg.latent_channels
    if z.ndim != 4 or z.shape[1] != C:
        raise ShapeError(f"expected latent of shape (T', {C}, h, w), got {z.shape}")
    P, first_inv = _matrices(cfg)
    if P is None:
        first = z[:1].reshape(1, TEMPORAL, -1, *z.shape[2:])[:, 0]
        first = rearrange(first, "g (c p q) h w -> g c (h p) (w q)", p=SPATIAL, q=SPATIAL)
        rest = z[1:]
    else:
        first = np.einsum("co,ohw->chw", first_inv, z[0])[None]
        first = rearrange(first, "g (c p q) h w -> g c (h p) (w q)", p=SPATIAL, q=SPATIAL)
        rest = np.einsum("oc,gohw->gchw", P, z[1:])
    rest = rearrange(rest, "g (f c p q) h w -> (g f) c (h p) (w q)",
                     f=TEMPORAL, p=SPATIAL, q=SPATIAL)
    return np.concatenate([first, rest], axis=0)


def replicate_depth(depth: np.ndarray) -> np.ndarray:
    """``(T, 1, H, W)`` depth -> ``(T, 3, H, W)`` in ``[-1, 1]``.

    Normalization is affine with the sequence min/max; a constant sequence
    maps to zeros.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 4 or depth.shape[1] != 1:
        raise ShapeError(f"expected depth of shape (T, 1, H, W), got {depth.shape}")
    lo, hi = depth.min(), depth.max()
    if hi > lo:
        norm = 2.0 * (depth - lo) / (hi - lo) - 1.0
    else:
        norm = np.zeros_like(depth)
    return np.repeat(norm, 3, axis=1)


def prepare_condition(image_latent: np.ndarray, T_latent: int) -> np.ndarray:
    """Zero-pad a single-frame latent ``(1, C', h, w)`` to ``T_latent`` frames."""
    if T_latent < 1:
        raise ShapeError(f"T' must be >= 1, got {T_latent}")
    image_latent = np.asarray(image_latent)
    pad = np.zeros((T_latent - 1, *image_latent.shape[1:]), dtype=image_latent.dtype)
    return np.concatenate([image_latent[:1], pad], axis=0)


# ---------------------------------------------------------------------------
# Frame directories
# ---------------------------------------------------------------------------

def to_uint8(frame: np.ndarray) -> np.ndarray:
    """``(3, H, W)`` in ``[-1, 1]`` -> ``(H, W, 3)`` uint8."""
    x = np.clip((np.asarray(frame) + 1.0) * 127.5, 0, 255)
    return np.round(x).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64).transpose(2, 0, 1) / 127.5 - 1.0


def save_rgb(path, frame: np.ndarray) -> None:
    Image.fromarray(to_uint8(frame)).save(path, format="PNG")


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def quantize_depth(depth: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = hi - lo if hi > lo else 1.0
    q = np.round((np.asarray(depth) - lo) / span * 65535.0)
    return np.clip(q, 0, 65535).astype(np.uint16)


def dequantize_depth(q: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = hi - lo if hi > lo else 0.0
    return lo + q.astype(np.float64) / 65535.0 * span


def save_depth(path, depth: np.ndarray, lo: float, hi: float) -> None:
    """Write one ``(H, W)`` depth map as a 16-bit grayscale PNG."""
    Image.fromarray(quantize_depth(depth, lo, hi)).save(path, format="PNG")


def load_depth(path, lo: float, hi: float) -> np.ndarray:
    with Image.open(path) as im:
        return dequantize_depth(np.asarray(im, dtype=np.uint16), lo, hi)


def load_depth_raw(path) -> np.ndarray:
    """Read a depth PNG without range information (values in ``[0, 1]``)."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    scale = 65535.0 if arr.dtype == np.uint16 or arr.max() > 255 else 255.0
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr.astype(np.float64) / scale


def write_video_dir(root, video: np.ndarray, kind: str = "rgb", depth_range=None) -> Path:
    """Write a frame directory plus ``video.txt`` manifest.

    ``kind='rgb'`` expects ``(T, 3, H, W)`` in ``[-1, 1]``; ``kind='depth'``
    expects ``(T, 1, H, W)`` metric depth, stored as 16-bit PNGs with the
    min/max recorded in the manifest.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    T, _, H, W = video.shape
    lines = [f"T={T}", f"H={H}", f"W={W}", f"kind={kind}"]
    if kind == "rgb":
        for k in range(T):
            save_rgb(root / f"frame_{k:04d}.png", video[k])
    elif kind == "depth":
        lo, hi = depth_range if depth_range is not None else (float(video.min()), float(video.max()))
        for k in range(T):
            save_depth(root / f"depth_{k:04d}.png", video[k, 0], lo, hi)
        lines += [f"depth_min={lo!r}", f"depth_max={hi!r}"]
    else:
        raise ConfigError(f"unknown video kind {kind!r}")
    tmp = root / "video.txt.tmp"
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, root / "video.txt")
    return root


def read_video_dir(root) -> np.ndarray:
    root = Path(root)
    meta = dict(ln.split("=", 1) for ln in (root / "video.txt").read_text().split())
    T, kind = int(meta["T"]), meta["kind"]
    if kind == "rgb":
        return np.stack([load_rgb(root / f"frame_{k:04d}.png") for k in range(T)])
    lo, hi = float(meta["depth_min"]), float(meta["depth_max"])
    return np.stack([load_depth(root / f"depth_{k:04d}.png", lo, hi)[None] for k in range(T)])
