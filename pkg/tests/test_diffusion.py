import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dualcam.checkpoint import load_checkpoint, save_checkpoint
from dualcam.diffusion import (STAGES, TimestepSchedule, TrainConfig, batch_for_step, batch_losses,
                               build_timestep_schedule, flow_match_targets, initial_noise, linear_schedule,
                               loss_terms, make_optimizer, model_records, read_log, restore_model,
                               restore_optimizer, sample, stage_of, stage_parameters, train_stage)
from dualcam.errors import ConfigError, NumericError, ShapeError

from helpers import param_digest, tiny_dataset, tiny_model


@pytest.fixture(scope="module")
def data():
    return tiny_dataset()


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def test_targets_at_endpoints():
    rng = np.random.default_rng(0)
    z0, eps = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    zt, v = flow_match_targets(z0, eps, np.array([0.0, 1.0]))
    assert np.array_equal(zt[0], z0[0]) and np.array_equal(zt[1], eps[1])
    assert np.array_equal(v, eps - z0)


def test_targets_per_sample_t_torch():
    z0, eps = torch.zeros(3, 2), torch.ones(3, 2)
    zt, _ = flow_match_targets(z0, eps, torch.tensor([0.25, 0.5, 0.75]))
    assert torch.equal(zt[:, 0], torch.tensor([0.25, 0.5, 0.75]))
    with pytest.raises(ShapeError):
        flow_match_targets(torch.zeros(2), torch.zeros(3), 0.5)


def test_velocity_is_path_derivative():
    rng = np.random.default_rng(1)
    z0, eps = rng.normal(size=10), rng.normal(size=10)
    h = 1e-6
    up, v = flow_match_targets(z0, eps, 0.4 + h)
    down, _ = flow_match_targets(z0, eps, 0.4 - h)
    assert np.abs((up - down) / (2 * h) - v).max() < 1e-8


def test_loss_arithmetic():
    vh_r, v_r = torch.tensor([1.0, 3.0]), torch.tensor([0.0, 1.0])     # mse 2.5
    vh_d, v_d = torch.tensor([2.0, 2.0]), torch.tensor([0.0, 0.0])     # mse 4
    total, l_rgb, l_d = loss_terms(vh_r, v_r, vh_d, v_d, depth_weight=0.5)
    assert (l_rgb.item(), l_d.item(), total.item()) == (2.5, 4.0, 4.5)
    assert loss_terms(vh_r, v_r, vh_d, v_d, 0.0)[0].item() == 2.5


def test_train_config_rejects_negative_weight():
    with pytest.raises(ConfigError):
        TrainConfig(depth_weight=-1)
    assert TrainConfig.finetune_preset().lr == 3e-6


# ---------------------------------------------------------------------------
# Timestep schedules
# ---------------------------------------------------------------------------

def test_stage_boundaries():
    assert [stage_of(t) for t in (1.0, 0.9000001, 0.9, 0.75000001, 0.75, 1e-6)] == \
        ["early", "early", "mid", "mid", "late", "late"]
    for bad in (0.0, 1.5, -0.1):
        with pytest.raises(ValueError):
            stage_of(bad)


def test_base_schedule_is_balanced():
    s = build_timestep_schedule(15)
    assert len(s) == 15 and s.counts() == {"early": 5, "mid": 5, "late": 5}
    assert s.timesteps[0] == 1.0
    assert s.timesteps[:5] == pytest.approx([1.0, 0.98, 0.96, 0.94, 0.92])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(0, 12), st.sampled_from(STAGES))
def test_schedule_counts_property(k, delta, stage):
    s = build_timestep_schedule(3 * k, delta, stage if delta else "none")
    expect = {x: k + (delta if x == stage else 0) for x in STAGES}
    assert s.counts() == expect and len(s) == 3 * k + delta
    assert all(b < a for a, b in zip(s.timesteps, s.timesteps[1:]))


def test_schedule_errors():
    for args in ((14,), (15, -1, "early"), (15, 2, "none"), (15, 2, "warmup")):
        with pytest.raises(ConfigError):
            build_timestep_schedule(*args)
    with pytest.raises(ConfigError):
        TimestepSchedule((0.5, 0.7))
    with pytest.raises(ConfigError):
        TimestepSchedule((1.0, 0.0))


def test_schedule_text():
    text = build_timestep_schedule(3).to_text().splitlines()
    assert text[0] == "# index t stage" and text[1] == "0 1.0 early" and len(text) == 4


# ---------------------------------------------------------------------------
# Sampler
# ---------------------------------------------------------------------------

def conditions(shape=(2, 2, 16, 2, 2), dtype=torch.float64):
    return {"cond_rgb": torch.zeros(shape, dtype=dtype)}


@pytest.mark.parametrize("n", [1, 15, 50])
def test_constant_velocity_oracle(n):
    c = torch.linspace(-1, 1, 2 * 2 * 16 * 2 * 2, dtype=torch.float64).reshape(2, 2, 16, 2, 2)
    zr, zd = sample(lambda a, b, t, **kw: (c, 2 * c), conditions(), linear_schedule(n), seed=3)
    eps = initial_noise(c.shape, 3, torch.float64)
    assert (zr - (eps - c)).abs().max() < 1e-6 and (zd - (eps - 2 * c)).abs().max() < 1e-6


@pytest.mark.parametrize("n", [1, 15, 50])
def test_straight_path_lands_on_target(n):
    # the exact velocity of the straight path towards z0 integrates to z0 for any step count
    z0 = torch.full((2, 2, 16, 2, 2), 0.5, dtype=torch.float64)

    def exact(zr, zd, t, **kw):
        tb = t.reshape(-1, 1, 1, 1, 1)
        return (zr - z0) / tb, (zd + z0) / tb

    zr, zd = sample(exact, conditions(), build_timestep_schedule(15) if n == 15 else linear_schedule(n), seed=0)
    assert (zr - z0).abs().max() < 1e-6 and (zd + z0).abs().max() < 1e-6


def test_sampler_reports_failing_step():
    def bad(zr, zd, t, **kw):
        v = torch.zeros_like(zr)
        return (v + float("nan"), v) if t[0] < 0.95 else (v, v)

    with pytest.raises(NumericError, match=r"step 2 \(t=0.9\)"):
        sample(bad, conditions(), linear_schedule(20))


def test_sampler_rgb_only_and_seeded(data):
    m = tiny_model()
    cond = data.conditions([0])
    a = sample(m, cond, linear_schedule(3), seed=5, rgb_only=True)
    b = sample(m, cond, linear_schedule(3), seed=5, rgb_only=True)
    assert a[1] is None and torch.equal(a[0], b[0])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def test_batch_draw_is_deterministic(data):
    cfg = TrainConfig(batch_size=3, seed=2)
    a, b = batch_for_step(data, cfg, "decoupled", 4), batch_for_step(data, cfg, "decoupled", 4)
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    c = batch_for_step(data, cfg, "fusion", 4)
    assert not torch.equal(a[2], c[2])
    assert bool(((a[1] > 0) & (a[1] <= 1)).all()) and len(set(a[0].tolist())) == 3


def test_zero_learning_rate_is_identity(data):
    m = tiny_model()
    before = param_digest(m.parameters())
    train_stage(m, data, TrainConfig(steps=2, batch_size=2, lr=0.0), "decoupled")
    assert param_digest(m.parameters()) == before


def test_decoupled_stage_leaves_fusion_untouched(data):
    m = tiny_model()
    m.add_fusion()
    fusion_before, base_before = param_digest(m.fusion_parameters()), param_digest(m.base_parameters())
    train_stage(m, data, TrainConfig(steps=2, batch_size=2), "decoupled")
    assert param_digest(m.fusion_parameters()) == fusion_before
    assert param_digest(m.base_parameters()) != base_before
    assert all(p.grad is None for p in m.fusion_parameters())


def test_stage_parameter_sets():
    m = tiny_model()
    with pytest.raises(ConfigError):
        stage_parameters(m, "fusion")
    rgb_only = {id(p) for p in stage_parameters(m, "decoupled", rgb_only=True)}
    assert not rgb_only & {id(p) for p in m.depth.parameters()}
    m.add_fusion()
    assert len(stage_parameters(m, "fusion")) == len(list(m.parameters()))


def test_first_fusion_loss_matches_decoupled(data):
    m = tiny_model()
    cfg = TrainConfig(steps=3, batch_size=2)
    train_stage(m, data, cfg, "decoupled")
    idx, t, eps = batch_for_step(data, cfg, "fusion", 0)
    with torch.no_grad():
        ref = batch_losses(m, data, idx, t, eps, 0, cfg.depth_weight)[0].item()
    m.add_fusion()
    rows = train_stage(m, data, TrainConfig(steps=1, batch_size=2), "fusion").rows
    assert rows[0][4] == ref


def test_resume_reproduces_log(data, tmp_path):
    cfg = TrainConfig(steps=6, batch_size=2)
    full = tiny_model()
    train_stage(full, data, cfg, "decoupled", log_path=tmp_path / "full.csv")

    part = tiny_model()
    res = train_stage(part, data, TrainConfig(steps=3, batch_size=2), "decoupled", log_path=tmp_path / "part.csv")
    save_checkpoint(tmp_path / "p.ckpt", model_records(part, optimizer=res.optimizer, params=res.params, step=3))
    rec, _ = load_checkpoint(tmp_path / "p.ckpt")
    resumed = tiny_model(seed=99)
    restore_model(resumed, rec)
    params = stage_parameters(resumed, "decoupled")
    opt = make_optimizer(params, cfg)
    restore_optimizer(opt, params, rec)
    train_stage(resumed, data, cfg, "decoupled", start_step=3, optimizer=opt, log_path=tmp_path / "part.csv")
    assert (tmp_path / "full.csv").read_text() == (tmp_path / "part.csv").read_text()
    assert param_digest(full.parameters()) == param_digest(resumed.parameters())
    assert [r["step"] for r in read_log(tmp_path / "full.csv")] == [str(k) for k in range(6)]


def test_non_finite_loss_raises(data):
    m = tiny_model()
    with torch.no_grad():
        m.rgb.head.bias.fill_(math.inf)
    with pytest.raises(NumericError, match="decoupled step 0"):
        train_stage(m, data, TrainConfig(steps=1, batch_size=2), "decoupled")


def test_training_reduces_loss(data):
    from dualcam.diffusion import evaluate_loss
    m = tiny_model()
    before = evaluate_loss(m, data, 0)["L_total"]
    train_stage(m, data, TrainConfig(steps=40, batch_size=4), "decoupled")
    assert evaluate_loss(m, data, 0)["L_total"] < before
