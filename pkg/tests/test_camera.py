import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from dualcam.camera import (CameraTrajectory, Intrinsics, Pose, axis_angle, downsample_rayfield,
                            generate_plucker_rays, grouped_trajectory, normalize_to_first_frame,
                            orthonormal_rows, parse_re10k, parse_trajectory, rotation_error,
                            serialize_trajectory, space_to_channel, temporal_groups, translation_error)
from dualcam.errors import InputError, ShapeError, TrajectoryParseError


def random_pose(rng):
    return Pose(Rotation.random(random_state=rng.integers(1 << 31)).as_matrix(), rng.normal(size=3) * 2)


def random_traj(rng, T=8, W=16, H=12):
    intr = Intrinsics(*rng.uniform(5, 20, 2), rng.uniform(0, W), rng.uniform(0, H))
    return CameraTrajectory(intr, [random_pose(rng) for _ in range(T)], W, H)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# Plücker rays
# ---------------------------------------------------------------------------

IDENT = Intrinsics(1.0, 1.0, 0.0, 0.0)


def test_principal_ray_from_origin():
    rays = generate_plucker_rays(CameraTrajectory(IDENT, [Pose.identity()]), 1, 2)
    assert np.array_equal(rays[0, 0, 0], [0, 0, 0, 0, 0, 1])


def test_moment_of_shifted_camera():
    rays = generate_plucker_rays(CameraTrajectory(IDENT, [Pose(np.eye(3), [1, 0, 0])]), 1, 2)
    assert np.array_equal(rays[0, 0, 0, 3:], [0, 0, 1])
    assert np.array_equal(rays[0, 0, 0, :3], [0, -1, 0])


def test_off_axis_pixel_direction():
    rays = generate_plucker_rays(CameraTrajectory(IDENT, [Pose.identity()]), 1, 2)
    assert np.allclose(rays[0, 0, 1, 3:], np.array([1, 0, 1]) / math.sqrt(2), atol=1e-15)
    assert np.array_equal(rays[0, 0, 1, :3], [0, 0, 0])


def test_rays_match_scalar_loop():
    rng = np.random.default_rng(0)
    traj = random_traj(rng, T=3, W=5, H=4)
    rays = generate_plucker_rays(traj, 4, 5)
    intr = traj.intrinsics
    for k, p in enumerate(traj.poses):
        for j in range(4):
            for i in range(5):
                d = p.rotation @ unit([(i - intr.cx) / intr.fx, (j - intr.cy) / intr.fy, 1.0])
                m = np.cross(p.translation, d)
                assert np.allclose(rays[k, j, i], np.r_[m, d], atol=1e-12)


def test_plucker_constraint_on_1000_samples():
    rng = np.random.default_rng(1)
    worst_md, worst_norm = 0.0, 0.0
    for _ in range(1000):
        traj = random_traj(rng, T=1, W=4, H=3)
        r = generate_plucker_rays(traj, 3, 4)[0, rng.integers(3), rng.integers(4)]
        worst_md = max(worst_md, abs(r[:3] @ r[3:]))
        worst_norm = max(worst_norm, abs(np.linalg.norm(r[3:]) - 1))
    assert worst_md < 1e-6 and worst_norm < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rotation_equivariance(seed):
    rng = np.random.default_rng(seed)
    traj = random_traj(rng, T=2, W=6, H=5)
    Rg = Rotation.random(random_state=seed).as_matrix()
    moved = CameraTrajectory(traj.intrinsics, [Pose(Rg @ p.rotation, Rg @ p.translation) for p in traj.poses])
    a = generate_plucker_rays(traj, 5, 6)
    b = generate_plucker_rays(moved, 5, 6)
    assert np.abs(b[..., :3] - a[..., :3] @ Rg.T).max() < 1e-6
    assert np.abs(b[..., 3:] - a[..., 3:] @ Rg.T).max() < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_translation_shift_changes_moment_by_cross(seed):
    rng = np.random.default_rng(seed)
    traj = random_traj(rng, T=2, W=6, H=5)
    delta = rng.normal(size=3)
    moved = CameraTrajectory(traj.intrinsics, [Pose(p.rotation, p.translation + delta) for p in traj.poses])
    a = generate_plucker_rays(traj, 5, 6)
    b = generate_plucker_rays(moved, 5, 6)
    assert np.abs(b[..., 3:] - a[..., 3:]).max() == 0
    assert np.abs(b[..., :3] - a[..., :3] - np.cross(delta, a[..., 3:])).max() < 1e-6


def test_non_finite_intrinsics_rejected():
    with pytest.raises(InputError):
        Intrinsics(float("nan"), 1, 0, 0)
    with pytest.raises(InputError):
        Intrinsics(-1, 1, 0, 0)
    with pytest.raises(InputError):
        Pose(np.eye(3), [0, np.inf, 0])


# ---------------------------------------------------------------------------
# Downsampling
# ---------------------------------------------------------------------------

def test_downsample_shape_contract():
    traj = CameraTrajectory(Intrinsics(64, 64, 32, 32), [Pose.identity()] * 17)
    rays = generate_plucker_rays(traj, 64, 64)
    out = downsample_rayfield(rays, 8)
    assert out.shape == (5, 384, 8, 8)
    P = orthonormal_rows(16, 384, seed=0)
    assert downsample_rayfield(rays, 8, P).shape == (5, 16, 8, 8)


def test_downsample_factor_one_identity():
    rays = np.random.default_rng(0).normal(size=(1, 3, 4, 6))
    out = downsample_rayfield(rays, 1, np.eye(6))
    assert np.array_equal(out, rays.transpose(0, 3, 1, 2))


def test_downsample_zero_projection():
    out = downsample_rayfield(np.ones((5, 16, 16, 6)), 8, np.zeros((16, 384)))
    assert not out.any()


def test_pixel_shuffle_channel_order():
    rays = np.random.default_rng(2).normal(size=(1, 16, 8, 6))
    out = space_to_channel(rays, 8)
    # channel index c*64 + p*8 + q holds pixel (8h+p, 8w+q) of ray channel c
    for c, p, q, h, w in [(0, 0, 0, 0, 0), (5, 3, 7, 1, 0), (2, 7, 1, 0, 0)]:
        assert out[0, c * 64 + p * 8 + q, h, w] == rays[0, 8 * h + p, 8 * w + q, c]


def test_temporal_grouping_averages():
    x = np.arange(9, dtype=float)[:, None, None, None] * np.ones((9, 8, 8, 6))
    out = downsample_rayfield(x, 8)
    assert np.allclose(out[:, 0, 0, 0], [0, 2.5, 6.5])
    assert temporal_groups(9) == [[0], [1, 2, 3, 4], [5, 6, 7, 8]]


def test_indivisible_dims_raise():
    with pytest.raises(ShapeError):
        downsample_rayfield(np.zeros((1, 10, 8, 6)), 8)
    with pytest.raises(ShapeError):
        temporal_groups(6)


def test_orthonormal_rows():
    P = orthonormal_rows(16, 384, seed=3)
    assert np.allclose(P @ P.T, np.eye(16), atol=1e-12)


# ---------------------------------------------------------------------------
# Relative poses and metrics
# ---------------------------------------------------------------------------

def test_normalize_two_frames_matches_matrix_product():
    rng = np.random.default_rng(4)
    P, Q = random_pose(rng), random_pose(rng)
    out = normalize_to_first_frame(CameraTrajectory(IDENT, [P, Q]))
    expect = np.linalg.inv(P.matrix()) @ Q.matrix()
    assert np.allclose(out.poses[0].matrix(), np.eye(4))
    assert np.allclose(out.poses[1].matrix(), expect, atol=1e-12)


def test_normalize_constant_and_idempotent():
    rng = np.random.default_rng(5)
    P = random_pose(rng)
    out = normalize_to_first_frame(CameraTrajectory(IDENT, [P] * 4))
    assert all(np.allclose(p.matrix(), np.eye(4), atol=1e-12) for p in out.poses)
    traj = random_traj(rng)
    once = normalize_to_first_frame(traj)
    twice = normalize_to_first_frame(once)
    assert all(np.allclose(a.matrix(), b.matrix(), atol=1e-12) for a, b in zip(once.poses, twice.poses))


def perturbed_by(traj, degrees, axis=(0, 0, 1)):
    """Compose every first-frame-relative rotation (k >= 1) with a fixed rotation."""
    base = normalize_to_first_frame(traj)
    Rp = axis_angle(axis, degrees)
    poses = [base.poses[0]] + [Pose(p.rotation @ Rp, p.translation) for p in base.poses[1:]]
    return CameraTrajectory(traj.intrinsics, poses)


def test_ten_degree_perturbation():
    traj = random_traj(np.random.default_rng(6))
    assert rotation_error(traj, perturbed_by(traj, 10.0)) == pytest.approx(10.0, abs=1e-6)


def test_rotation_error_matches_per_frame_oracle():
    rng = np.random.default_rng(7)
    a, b = random_traj(rng), random_traj(rng)
    angles = []
    for k in range(1, 8):
        ra = np.linalg.inv(a.poses[0].matrix()) @ a.poses[k].matrix()
        rb = np.linalg.inv(b.poses[0].matrix()) @ b.poses[k].matrix()
        angles.append(np.degrees(Rotation.from_matrix(ra[:3, :3].T @ rb[:3, :3]).magnitude()))
    assert rotation_error(a, b) == pytest.approx(np.mean(angles), abs=1e-9)


def test_metrics_symmetric_and_zero_on_identity():
    rng = np.random.default_rng(8)
    a, b = random_traj(rng), random_traj(rng)
    assert rotation_error(a, b) == pytest.approx(rotation_error(b, a), abs=1e-9)
    assert translation_error(a, b) == pytest.approx(translation_error(b, a), abs=1e-12)
    assert rotation_error(a, a) == pytest.approx(0, abs=1e-6)
    assert translation_error(a, a) == 0


@pytest.mark.parametrize("scale", [2.0, 3.0])
def test_translation_error_scale_invariant(scale):
    rng = np.random.default_rng(9)
    a = random_traj(rng)
    base = normalize_to_first_frame(a)
    scaled = CameraTrajectory(a.intrinsics, [Pose(p.rotation, p.translation * scale) for p in base.poses])
    assert abs(translation_error(a, scaled)) < 1e-9


def test_translation_error_hand_built():
    I = np.eye(3)
    a = CameraTrajectory(IDENT, [Pose(I, [0, 0, 0]), Pose(I, [1, 0, 0]), Pose(I, [2, 0, 0])])
    b = CameraTrajectory(IDENT, [Pose(I, [0, 0, 0]), Pose(I, [0, 1, 0]), Pose(I, [0, 2, 0])])
    # both mean center norms are (0 + 1 + 2) / 3 = 1, so no rescaling
    ca = np.array([[1, 0, 0], [2, 0, 0]])
    cb = np.array([[0, 1, 0], [0, 2, 0]])
    expect = np.linalg.norm(ca - cb, axis=1).mean()
    assert translation_error(a, b) == pytest.approx(expect, abs=1e-12)
    assert expect == pytest.approx(1.5 * math.sqrt(2))


def test_metric_length_mismatch():
    rng = np.random.default_rng(10)
    with pytest.raises(ShapeError):
        rotation_error(random_traj(rng, T=3), random_traj(rng, T=4))


def test_grouped_trajectory_length():
    rng = np.random.default_rng(11)
    traj = random_traj(rng, T=17)
    g = grouped_trajectory(traj)
    assert g.frame_count == 5
    assert np.allclose(g.poses[0].matrix(), traj.poses[0].matrix())
    assert all(p.is_orthonormal() for p in g.poses)


# ---------------------------------------------------------------------------
# Trajectory files
# ---------------------------------------------------------------------------

def test_round_trip():
    traj = random_traj(np.random.default_rng(12))
    back = parse_trajectory(serialize_trajectory(traj))
    assert back.intrinsics == traj.intrinsics and (back.width, back.height) == (16, 12)
    for a, b in zip(traj.poses, back.poses):
        assert np.abs(a.matrix() - b.matrix()).max() < 1e-9


def test_empty_file():
    with pytest.raises(TrajectoryParseError):
        parse_trajectory("")


def test_parse_errors_carry_line_numbers():
    text = serialize_trajectory(random_traj(np.random.default_rng(13), T=3)).splitlines()
    bad = list(text)
    bad[2] = "1 2 3"
    with pytest.raises(TrajectoryParseError, match="line 3"):
        parse_trajectory("\n".join(bad))
    bad = list(text)
    bad[3] = " ".join(["2"] * 12)
    with pytest.raises(TrajectoryParseError, match="line 4.*orthonormal"):
        parse_trajectory("\n".join(bad))


def test_re10k_import_inverts_pose():
    rng = np.random.default_rng(14)
    w2c = [random_pose(rng) for _ in range(2)]
    lines = ["https://example.invalid/video"]
    for k, p in enumerate(w2c):
        M = np.hstack([p.rotation, p.translation[:, None]])
        lines.append(" ".join(repr(float(v)) for v in [k * 1000, 0.5, 0.6, 0.5, 0.4, 0, 0, *M.ravel()]))
    traj = parse_re10k("\n".join(lines), width=64, height=32)
    assert traj.intrinsics_at(0) == Intrinsics(32, 19.2, 32, 12.8)
    for p, q in zip(w2c, traj.poses):
        assert np.allclose(q.matrix(), np.linalg.inv(p.matrix()), atol=1e-12)
