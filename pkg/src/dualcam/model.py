"""Dual-branch diffusion transformer with scheduled 3D fusion between branches."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .errors import ConfigError, NumericError, ShapeError
from .scenes import DESCRIPTORS

BRANCHES = ("rgb", "depth")


@dataclass
class ModelConfig:
    num_blocks: int = 15
    hidden_dim: int = 64
    num_heads: int = 4
    latent_channels: int = 16
    ray_channels: int = 384
    fusion_depth: int = 2
    text_dim: int = 16
    vocab_size: int = len(DESCRIPTORS)
    mlp_ratio: float = 4.0
    patch_size: int = 1

    def __post_init__(self):
        if self.hidden_dim % 4:
            raise ConfigError(f"hidden_dim must be divisible by 4, got {self.hidden_dim}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by {self.num_heads} heads")
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")

    @classmethod
    def mini(cls, **kw) -> "ModelConfig":
        return cls(**{"num_blocks": 6, "hidden_dim": 128, "patch_size": 2, **kw})

    @classmethod
    def profile(cls, name: str, **kw) -> "ModelConfig":
        if name == "mini":
            return cls.mini(**kw)
        if name == "default":
            return cls(**kw)
        raise ConfigError(f"unknown model profile {name!r}")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class FusionSchedule:
    """1-based layer indices hosting RGB->depth and depth->RGB injections."""

    rgb_to_depth: frozenset = field(default_factory=frozenset)
    depth_to_rgb: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.rgb_to_depth = frozenset(int(k) for k in self.rgb_to_depth)
        self.depth_to_rgb = frozenset(int(k) for k in self.depth_to_rgb)
        overlap = self.rgb_to_depth & self.depth_to_rgb
        if overlap:
            warnings.warn(f"layers {sorted(overlap)} inject in both directions", stacklevel=2)

    @classmethod
    def default(cls, num_blocks: int) -> "FusionSchedule":
        """Semantic-first split: RGB->depth on the first third, depth->RGB after.

        For 15 blocks this is layers 1-5 / 6-15.
        """
        split = max(1, round(num_blocks / 3))
        return cls(range(1, split + 1), range(split + 1, num_blocks + 1))

    @classmethod
    def parse(cls, text: str) -> "FusionSchedule":
        """Parse ``"1-5/6-15"`` (either side may be empty or ``-``)."""
        left, sep, right = text.partition("/")
        if not sep:
            raise ConfigError(f"schedule must look like '1-5/6-15', got {text!r}")
        return cls(_parse_ranges(left), _parse_ranges(right))

    def format(self) -> str:
        return f"{_format_ranges(self.rgb_to_depth)}/{_format_ranges(self.depth_to_rgb)}"

    def validate(self, num_blocks: int) -> None:
        bad = [k for k in self.rgb_to_depth | self.depth_to_rgb if not 1 <= k <= num_blocks]
        if bad:
            raise ConfigError(f"schedule layers {sorted(bad)} outside 1..{num_blocks}")

    def mirrored(self) -> "FusionSchedule":
        return FusionSchedule(self.depth_to_rgb, self.rgb_to_depth)


def _parse_ranges(text: str) -> set:
    out = set()
    text = text.strip()
    if text in ("", "-"):
        return out
    for part in text.split(","):
        a, _, b = part.strip().partition("-")
        lo = int(a)
        hi = int(b) if b else lo
        out.update(range(lo, hi + 1))
    return out


def _format_ranges(layers) -> str:
    layers = sorted(layers)
    if not layers:
        return "-"
    runs, start, prev = [], layers[0], layers[0]
    for k in layers[1:] + [None]:
        if k is not None and k == prev + 1:
            prev = k
            continue
        runs.append(f"{start}-{prev}" if prev != start else f"{start}")
        if k is not None:
            start = prev = k
    return ",".join(runs)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of ``t`` in [0, 1] (scaled by 1000)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def positional_embedding_3d(grid, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed factorized sin-cos embedding for a ``(T', h, w)`` token grid -> ``(L, dim)``."""
    T, h, w = grid
    d_s = dim // 8 * 2
    d_t = dim - 2 * d_s

    def axis(n, d):
        pos = torch.arange(n, dtype=torch.float64)[:, None]
        i = torch.arange(d // 2, dtype=torch.float64)[None]
        ang = pos / (100.0 ** (2 * i / max(d, 1)))
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)

    et, ey, ex = axis(T, d_t), axis(h, d_s), axis(w, d_s)
    emb = torch.cat([
        et[:, None, None].expand(T, h, w, -1),
        ey[None, :, None].expand(T, h, w, -1),
        ex[None, None, :].expand(T, h, w, -1),
    ], dim=-1)
    return emb.reshape(T * h * w, -1).to(dtype)


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        q, k, v = rearrange(self.qkv(x), "b l (s h d) -> s b h l d", s=3, h=self.heads)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(rearrange(out, "b h l d -> b l (h d)"))


class DiTBlock(nn.Module):
    """Pre-norm attention + MLP; timestep via adaLN-Zero, text via additive bias."""

    def __init__(self, dim: int, heads: int, text_dim: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, dim))
        self.ada = nn.Linear(dim, 6 * dim)
        self.text_bias = nn.Linear(text_dim, dim)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def forward(self, x, c, text):
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(F.silu(c)).chunk(6, dim=-1)
        h = modulate(self.norm1(x), sh1, sc1) + self.text_bias(text)[:, None]
        x = x + g1[:, None] * self.attn(h)
        x = x + g2[:, None] * self.mlp(modulate(self.norm2(x), sh2, sc2))
        return x


class FusionBlock3D(nn.Module):
    """Bottlenecked depthwise-separable 3D conv stack with a per-frame gate.

    ``Y_t = g_t * F(X_t)``; the output 1x1x1 map is zero-initialised so the
    block emits exact zeros until it is trained.
    """

    def __init__(self, dim: int, depth: int = 2):
        super().__init__()
        cb = dim // 4
        self.proj_in = nn.Conv3d(dim, cb, 1)
        self.stages = nn.ModuleList()
        for _ in range(depth):
            self.stages.append(nn.ModuleDict({
                "dw": nn.Conv3d(cb, cb, 3, padding=1, groups=cb),
                "pw": nn.Conv3d(cb, cb, 1),
            }))
        self.proj_out = nn.Conv3d(cb, dim, 1)
        self.gate = nn.Linear(cb, 1)
        nn.init.zeros_(self.proj_out.weight)
        nn.init.zeros_(self.proj_out.bias)
        nn.init.zeros_(self.gate.weight)
        nn.init.zeros_(self.gate.bias)

    def bottleneck(self, x5):
        h = self.proj_in(x5)
        for st in self.stages:
            h = F.silu(st["pw"](F.silu(st["dw"](h))))
        return h

    def _to_volume(self, x, grid):
        T, h, w = grid
        if x.shape[1] != T * h * w:
            raise ShapeError(f"token count {x.shape[1]} != {T}*{h}*{w}")
        return rearrange(x, "b (t h w) c -> b c t h w", t=T, h=h, w=w)

    def features(self, x, grid):
        """Ungated ``F(X)`` as tokens."""
        return rearrange(self.proj_out(self.bottleneck(self._to_volume(x, grid))), "b c t h w -> b (t h w) c")

    def gates(self, x, grid):
        hb = self.bottleneck(self._to_volume(x, grid))
        return torch.sigmoid(self.gate(hb.mean(dim=(3, 4)).transpose(1, 2)))[..., 0]

    def forward(self, x, grid):
        hb = self.bottleneck(self._to_volume(x, grid))
        g = torch.sigmoid(self.gate(hb.mean(dim=(3, 4)).transpose(1, 2)))   # (B, T', 1)
        y = self.proj_out(hb) * g.transpose(1, 2)[..., None, None]
        return rearrange(y, "b c t h w -> b (t h w) c")


class Branch(nn.Module):
    """One denoising stream: token embedding, ``N`` DiT blocks and a velocity head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.hidden_dim
        self.cfg = cfg
        p = cfg.patch_size
        self.embed = nn.Linear(2 * cfg.latent_channels * p * p, D)
        self.t_mlp = nn.Sequential(nn.Linear(D, D), nn.SiLU(), nn.Linear(D, D))
        self.text = nn.Embedding(cfg.vocab_size, cfg.text_dim)
        self.blocks = nn.ModuleList(DiTBlock(D, cfg.num_heads, cfg.text_dim, cfg.mlp_ratio)
                                    for _ in range(cfg.num_blocks))
        self.norm_out = nn.LayerNorm(D, elementwise_affine=False, eps=1e-6)
        self.ada_out = nn.Linear(D, 2 * D)
        self.head = nn.Linear(D, cfg.latent_channels * p * p)
        for m in (self.ada_out, self.head):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)
        nn.init.normal_(self.text.weight, std=0.02)

    def token_grid(self, x):
        p = self.cfg.patch_size
        if x.shape[-1] % p or x.shape[-2] % p:
            raise ShapeError(f"latent {tuple(x.shape[-2:])} not divisible by patch size {p}")
        return (x.shape[1], x.shape[3] // p, x.shape[4] // p)

    def embed_inputs(self, x, t, text_ids):
        """``x``: assembled input ``(B, T', 2C', h, w)`` -> tokens, conditioning vector, text."""
        p = self.cfg.patch_size
        grid = self.token_grid(x)
        tokens = self.embed(rearrange(x, "b t c (h p) (w q) -> b (t h w) (c p q)", p=p, q=p))
        tokens = tokens + positional_embedding_3d(grid, tokens.shape[-1], tokens.dtype)
        c = self.t_mlp(timestep_embedding(t.to(tokens.dtype), tokens.shape[-1]))
        return tokens, c, self.text(text_ids)

    def output(self, tokens, c, grid):
        shift, scale = self.ada_out(F.silu(c)).chunk(2, dim=-1)
        v = self.head(modulate(self.norm_out(tokens), shift, scale))
        T, h, w = grid
        p = self.cfg.patch_size
        return rearrange(v, "b (t h w) (c p q) -> b t c (h p) (w q)", t=T, h=h, w=w, p=p, q=p)

    def forward(self, x, t, text_ids, return_activations=False):
        grid = self.token_grid(x)
        tokens, c, text = self.embed_inputs(x, t, text_ids)
        acts = []
        for blk in self.blocks:
            tokens = blk(tokens, c, text)
            acts.append(tokens)
        v = self.output(tokens, c, grid)
        return (v, acts) if return_activations else v


def assemble_branch_input(cond, rays, noise):
    """``concat(cond + rays, noise)`` along channels; all inputs ``(..., T', C', h, w)``."""
    if cond.shape != rays.shape:
        raise ShapeError(f"condition {tuple(cond.shape)} and rays {tuple(rays.shape)} differ")
    if cond.shape[:-3] != noise.shape[:-3] or cond.shape[-2:] != noise.shape[-2:]:
        raise ShapeError(f"noise {tuple(noise.shape)} does not match condition {tuple(cond.shape)}")
    if isinstance(cond, torch.Tensor):
        return torch.cat([cond + rays, noise], dim=-3)
    return np.concatenate([cond + rays, noise], axis=-3)


class DualDiT(nn.Module):
    """RGB and depth branches sharing a camera (ray) encoder.

    Fusion blocks are created by :meth:`add_fusion`; before that the model
    holds no fusion parameters and always runs the branches independently.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.ray_proj = nn.Linear(cfg.ray_channels, cfg.latent_channels, bias=False)
        with torch.no_grad():
            q, r = torch.linalg.qr(torch.randn(cfg.ray_channels, cfg.latent_channels, dtype=torch.float64))
            self.ray_proj.weight.copy_((q * torch.sign(torch.diagonal(r))).T)
        self.rgb = Branch(cfg)
        self.depth = Branch(cfg)
        self.fusion = None
        self.schedule = FusionSchedule()

    def add_fusion(self, schedule: FusionSchedule | None = None) -> None:
        schedule = schedule or FusionSchedule.default(self.cfg.num_blocks)
        schedule.validate(self.cfg.num_blocks)
        D, depth = self.cfg.hidden_dim, self.cfg.fusion_depth
        self.schedule = schedule
        self.fusion = nn.ModuleDict({
            "rgb_to_depth": nn.ModuleDict({str(k): FusionBlock3D(D, depth) for k in sorted(schedule.rgb_to_depth)}),
            "depth_to_rgb": nn.ModuleDict({str(k): FusionBlock3D(D, depth) for k in sorted(schedule.depth_to_rgb)}),
        })

    @property
    def has_fusion(self) -> bool:
        return self.fusion is not None

    def fusion_parameters(self):
        return list(self.fusion.parameters()) if self.fusion is not None else []

    def base_parameters(self):
        ids = {id(p) for p in self.fusion_parameters()}
        return [p for p in self.parameters() if id(p) not in ids]

    def encode_rays(self, rays):
        """``(B, T', 384, h, w)`` grouped pixel-shuffled rays -> ``(B, T', C', h, w)``."""
        return torch.einsum("oc,btchw->btohw", self.ray_proj.weight, rays)

    def branch_input(self, z, cond, rays_latent):
        return assemble_branch_input(cond, rays_latent, z)

    def forward_branch(self, name, z, t, cond, rays, text_ids, return_activations=False):
        """Run one branch on its own (no fusion)."""
        branch = getattr(self, name)
        x = self.branch_input(z, cond, self.encode_rays(rays))
        return branch(x, t, text_ids, return_activations=return_activations)

    def forward(self, z_rgb, z_depth, t, cond_rgb, cond_depth, rays, text_ids, gamma=1,
                return_activations=False):
        """Joint forward of both branches.

        With ``gamma=1`` the block at layer ``k`` adds ``fusion(rgb_k)`` to the
        depth stream if ``k`` is scheduled RGB->depth, and symmetrically for
        depth->RGB. Both injections read the layer-``k`` outputs before either
        is applied. ``gamma=0`` (or a model without fusion blocks) runs the two
        branches independently.
        """
        r = self.encode_rays(rays)
        x_rgb = self.branch_input(z_rgb, cond_rgb, r)
        x_dep = self.branch_input(z_depth, cond_depth, r)
        grid = self.rgb.token_grid(x_rgb)
        if x_dep.shape != x_rgb.shape:
            raise ShapeError(f"branch inputs differ: {tuple(x_rgb.shape)} vs {tuple(x_dep.shape)}")
        a, ca, ta = self.rgb.embed_inputs(x_rgb, t, text_ids)
        b, cb, tb = self.depth.embed_inputs(x_dep, t, text_ids)
        fuse = bool(gamma) and self.fusion is not None
        acts_a, acts_b = [], []
        for k, (blk_a, blk_b) in enumerate(zip(self.rgb.blocks, self.depth.blocks), start=1):
            a = blk_a(a, ca, ta)
            b = blk_b(b, cb, tb)
            if fuse:
                key = str(k)
                to_depth = self.fusion["rgb_to_depth"][key](a, grid) if key in self.fusion["rgb_to_depth"] else None
                to_rgb = self.fusion["depth_to_rgb"][key](b, grid) if key in self.fusion["depth_to_rgb"] else None
                if to_depth is not None:
                    b = b + to_depth
                if to_rgb is not None:
                    a = a + to_rgb
            acts_a.append(a)
            acts_b.append(b)
        v_rgb = self.rgb.output(a, ca, grid)
        v_dep = self.depth.output(b, cb, grid)
        if return_activations:
            return v_rgb, v_dep, acts_a, acts_b
        return v_rgb, v_dep


def parameter_gradients(loss: torch.Tensor, params):
    """Reverse-mode gradients of a scalar ``loss`` for each tensor in ``params``.

    Parameters the loss does not depend on get zero gradients.
    """
    if not torch.isfinite(loss).all():
        raise NumericError(f"non-finite loss {loss.item()}")
    params = list(params)
    grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
