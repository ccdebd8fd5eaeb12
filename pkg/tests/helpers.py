"""Shared fixtures-as-functions for the test modules."""
import numpy as np
import torch


def random_conditions(cfg, seed, batch=2, frames=2, h=4, w=4):
    """Random latents and conditions for a model config; ``t`` drawn in (0, 1]."""
    g = torch.Generator().manual_seed(seed)
    C = cfg.latent_channels

    def rnd(*shape):
        return torch.randn(*shape, generator=g)

    zr, zd = rnd(batch, frames, C, h, w), rnd(batch, frames, C, h, w)
    t = 1 - torch.rand(batch, generator=g)
    cond = {
        "cond_rgb": rnd(batch, frames, C, h, w),
        "cond_depth": rnd(batch, frames, C, h, w),
        "rays": rnd(batch, frames, cfg.ray_channels, h, w),
        "text_ids": torch.randint(0, cfg.vocab_size, (batch,), generator=g),
    }
    return zr, zd, t, cond


def fd_gradient_check(loss_fn, params, step=1e-4, floor=1e-6):
    """Largest elementwise relative error between autograd and central differences.

    Relative error is ``|a - f| / max(|a|, |f|, floor * G)`` with ``G`` the
    largest analytic gradient magnitude. The scaled floor keeps entries that
    are exactly zero in theory (an attention key bias, for one) from turning
    finite-difference round-off into a huge ratio.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.detach().clone().reshape(-1) for p in params]
    scale = floor * max(float(a.abs().max()) for a in analytic)
    worst = 0.0
    with torch.no_grad():
        for p, a in zip(params, analytic):
            flat = p.view(-1)
            fd = torch.empty_like(a)
            for i in range(flat.numel()):
                keep = flat[i].item()
                flat[i] = keep + step
                up = loss_fn().item()
                flat[i] = keep - step
                down = loss_fn().item()
                flat[i] = keep
                fd[i] = (up - down) / (2 * step)
            den = torch.clamp(torch.maximum(a.abs(), fd.abs()), min=scale)
            worst = max(worst, float(((a - fd).abs() / den).max()))
    return worst


def param_digest(params):
    """Bit-level fingerprint of a parameter list."""
    import hashlib
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def tiny_dataset(n=4, frames=5, H=32, W=32, seed=0):
    """In-memory training set rendered from seeded random scenes."""
    from dualcam.codec import CodecConfig
    from dualcam.data import build_training_set
    from dualcam.scenes import random_scene, random_trajectory, render_clip

    clips = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        scene = random_scene(rng)
        _, traj = random_trajectory(rng, frames, 1, H, W)
        clips.append(render_clip(scene, traj, H, W))
    return build_training_set(clips, CodecConfig())


def tiny_model(seed=0, **kw):
    from dualcam.model import DualDiT, ModelConfig
    torch.manual_seed(seed)
    return DualDiT(ModelConfig.mini(**{"num_blocks": 3, "hidden_dim": 32, **kw}))
