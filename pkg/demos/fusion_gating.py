"""What a fresh fusion block does to a trained dual model: nothing, exactly.

The output convolution of every fusion block starts at zero, so adding the
blocks leaves the joint forward bit-identical to the two independent
branches. Once the block weights move, the per-frame gate scales how much
of the other modality is injected.
"""
import torch

from dualcam.model import DualDiT, FusionBlock3D, ModelConfig

torch.manual_seed(0)
cfg = ModelConfig.mini(num_blocks=6)
model = DualDiT(cfg).eval()
with torch.no_grad():
    for p in model.parameters():
        p.add_(torch.randn_like(p) * 0.02)       # stand-in for a trained stage-1 model

B, T, C, h, w = 1, 3, cfg.latent_channels, 4, 4
inputs = dict(cond_rgb=torch.randn(B, T, C, h, w), cond_depth=torch.randn(B, T, C, h, w),
              rays=torch.randn(B, T, cfg.ray_channels, h, w), text_ids=torch.zeros(B, dtype=torch.long))
zr, zd, t = torch.randn(B, T, C, h, w), torch.randn(B, T, C, h, w), torch.tensor([0.7])

with torch.no_grad():
    before = model(zr, zd, t, gamma=0, **inputs)
    model.add_fusion()
    after = model(zr, zd, t, gamma=1, **inputs)
print("schedule:", model.schedule.format())
print("identical after adding fusion:", torch.equal(before[0], after[0]) and torch.equal(before[1], after[1]))

# a single block on a token grid: gate values are per frame and lie in (0, 1)
blk = FusionBlock3D(32)
with torch.no_grad():
    for p in blk.parameters():
        p.normal_(0, 0.3)
x = torch.randn(1, 3 * 4 * 4, 32)
print("gates per frame:", [round(g, 3) for g in blk.gates(x, (3, 4, 4))[0].tolist()])
with torch.no_grad():
    blk.gate.bias.fill_(-20.0)
    print("closed gate output norm:", float(blk(x, (3, 4, 4)).norm()))
