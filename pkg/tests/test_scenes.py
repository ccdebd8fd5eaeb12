import hashlib
import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from dualcam.camera import CameraTrajectory, Intrinsics, Pose, axis_angle, rotation_angle_deg, rotation_error
from dualcam.errors import ConfigError, InputError
from dualcam.scenes import (DESCRIPTORS, Plane, SceneSpec, Sphere, look_at, make_dataset, make_trajectory,
                            random_scene, read_manifest, render_clip, render_frame)

Y = (0.0, 1.0, 0.0)


def sphere_scene(*spheres):
    return SceneSpec([Sphere(c, r, (0.8, 0.2, 0.2)) for c, r in spheres])


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

def test_dolly_speed_zero_is_static():
    traj = make_trajectory("dolly", {"speed": 0.0}, frames=6)
    assert all(np.array_equal(p.matrix(), traj.poses[0].matrix()) for p in traj.poses)


@pytest.mark.parametrize("F", [4, 8, 17])
def test_full_orbit_relative_rotation(F):
    traj = make_trajectory("orbit", {"degrees": 360.0, "target": (0, 0, 3)}, frames=F)
    rel = traj.poses[-1].rotation @ traj.poses[0].rotation.T
    # eye angle theta moves the eye to Ry(-theta) about the target
    assert np.abs(rel - axis_angle(Y, -360.0 * (F - 1) / F)).max() < 1e-9
    expect = 360.0 * (F - 1) / F
    assert rotation_angle_deg(rel) == pytest.approx(min(expect, 360 - expect), abs=1e-9)


def test_orbit_keeps_target_on_axis():
    target = np.array([0.3, -0.2, 3.0])
    traj = make_trajectory("orbit", {"degrees": 90.0, "target": tuple(target)}, frames=5)
    for p in traj.poses:
        fwd = p.rotation[:, 2]
        to_target = (target - p.translation) / np.linalg.norm(target - p.translation)
        assert np.allclose(fwd, to_target, atol=1e-12)


def test_pan_matches_closed_form():
    F, eye, target = 9, (0.0, 0.1, -0.5), (0.0, -0.3, 3.5)
    traj = make_trajectory("pan", {"degrees": 30.0, "eye": eye, "target": target}, frames=F)
    R0 = look_at(eye, target).rotation
    expect = CameraTrajectory(traj.intrinsics,
                              [Pose(Rotation.from_rotvec(np.radians(30.0 * k / (F - 1)) * np.array(Y)).as_matrix()
                                    @ R0, eye) for k in range(F)])
    assert rotation_error(traj, expect) == pytest.approx(0, abs=1e-6)


def test_dolly_moves_along_view_axis():
    traj = make_trajectory("dolly", {"speed": 0.25}, frames=5)
    fwd = traj.poses[0].rotation[:, 2]
    assert np.allclose(traj.poses[4].translation - traj.poses[0].translation, fwd, atol=1e-12)


def test_trajectory_poses_orthonormal():
    for kind in ("orbit", "dolly", "pan", "truck"):
        assert all(p.is_orthonormal(1e-9) for p in make_trajectory(kind, frames=9).poses)


def test_trajectory_errors():
    with pytest.raises(ConfigError):
        make_trajectory("orbit", frames=1)
    with pytest.raises(ConfigError):
        make_trajectory("spiral")
    with pytest.raises(ConfigError):
        make_trajectory("dolly", {"speed": float("nan")})


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

INTR8 = Intrinsics(8.0, 8.0, 4.0, 4.0)


def test_background_only_view():
    scene = sphere_scene(((0, 0, -5), 1.0))
    rgb, depth, hit = render_frame(scene, Pose.identity(), INTR8, 8, 8)
    assert not hit.any() and np.all(depth == scene.far)
    assert np.allclose(rgb, np.asarray(scene.background)[:, None, None] * 2 - 1)


def test_unit_sphere_center_depth():
    rgb, depth, hit = render_frame(sphere_scene(((0, 0, 2), 1.0)), Pose.identity(), INTR8, 8, 8)
    assert hit[4, 4] and depth[4, 4] == pytest.approx(1.0, abs=1e-12)


def brute_force_depth(spheres, pose, intr, i, j):
    """Nearest positive root of |o + s d - c|^2 = r^2 by scalar arithmetic, returned as camera z."""
    x, y = (i - intr.cx) / intr.fx, (j - intr.cy) / intr.fy
    n = math.sqrt(x * x + y * y + 1)
    dc = (x / n, y / n, 1 / n)
    d = [sum(pose.rotation[a][b] * dc[b] for b in range(3)) for a in range(3)]
    o = list(pose.translation)
    best = math.inf
    for c, r in spheres:
        oc = [o[a] - c[a] for a in range(3)]
        b = sum(d[a] * oc[a] for a in range(3))
        disc = b * b - (sum(v * v for v in oc) - r * r)
        if disc < 0:
            continue
        for s in (-b - math.sqrt(disc), -b + math.sqrt(disc)):
            if s > 1e-9:
                best = min(best, s)
                break
    return best * dc[2] if math.isfinite(best) else None


def test_depth_matches_scalar_intersector():
    rng = np.random.default_rng(0)
    spheres = [((-0.5, 0.2, 3.0), 0.7), ((0.6, -0.3, 4.0), 1.0), ((0.0, 0.0, 6.0), 2.0)]
    scene = sphere_scene(*spheres)
    pose = look_at((0.2, -0.1, -0.5), (0.0, 0.0, 4.0))
    intr = Intrinsics(32.0, 32.0, 16.0, 16.0)
    _, depth, hit = render_frame(scene, pose, intr, 32, 32)
    for _ in range(100):
        i, j = rng.integers(32, size=2)
        ref = brute_force_depth(spheres, pose, intr, i, j)
        if ref is None:
            assert not hit[j, i]
        else:
            assert hit[j, i] and depth[j, i] == pytest.approx(ref, abs=1e-9)


def test_reprojection_lands_on_pixel():
    scene = random_scene(np.random.default_rng(1))
    traj = make_trajectory("orbit", {"degrees": 20.0, "target": (0, -0.4, 3.5)}, frames=3,
                           width=32, height=32)
    clip = render_clip(scene, traj, 32, 32)
    intr = traj.intrinsics
    jj, ii = np.mgrid[0:32, 0:32]
    for k, pose in enumerate(traj.poses):
        z = clip.depth[k, 0]
        Xc = np.stack([(ii - intr.cx) / intr.fx * z, (jj - intr.cy) / intr.fy * z, z], -1)
        Xw = Xc @ pose.rotation.T + pose.translation
        back = (Xw - pose.translation) @ pose.rotation
        u = intr.fx * back[..., 0] / back[..., 2] + intr.cx
        v = intr.fy * back[..., 1] / back[..., 2] + intr.cy
        m = clip.hit[k]
        assert m.any()
        assert np.abs(u - ii)[m].max() < 0.5 and np.abs(v - jj)[m].max() < 0.5
        assert (z[m] > 0).all() and np.all(z[~m] == scene.far)


def test_rigid_invariance():
    rng = np.random.default_rng(2)
    scene = random_scene(rng)
    traj = make_trajectory("pan", {"degrees": 10.0}, frames=3, width=32, height=32)
    R = Rotation.random(random_state=3).as_matrix()
    t = rng.normal(size=3)
    moved = CameraTrajectory(traj.intrinsics, [Pose(R @ p.rotation, R @ p.translation + t) for p in traj.poses],
                             32, 32)
    a = render_clip(scene, traj, 32, 32)
    b = render_clip(scene.transformed(R, t), moved, 32, 32)
    assert np.abs(a.rgb - b.rgb).max() < 1e-6
    assert np.abs(a.depth - b.depth).max() < 1e-6


def test_rgb_range_and_determinism():
    scene = random_scene(np.random.default_rng(4))
    traj = make_trajectory("truck", frames=3, width=16, height=16)
    a, b = render_clip(scene, traj, 16, 16), render_clip(scene, traj, 16, 16)
    assert a.rgb.min() >= -1 and a.rgb.max() <= 1
    assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.depth, b.depth)


def test_scene_validation_and_json():
    with pytest.raises(InputError):
        SceneSpec()
    with pytest.raises(InputError):
        sphere_scene(((0, 0, 1), -1.0))
    scene = random_scene(np.random.default_rng(5))
    assert SceneSpec.from_json(scene.to_json()) == scene
    assert scene.descriptor in DESCRIPTORS
    assert isinstance(scene.planes[0], Plane)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_dataset_layout_and_determinism(tmp_path):
    make_dataset(tmp_path / "a", n_clips=16, frames=17, H=64, W=64, seed=7)
    make_dataset(tmp_path / "b", n_clips=16, frames=17, H=64, W=64, seed=7)
    entries = read_manifest(tmp_path / "a")
    assert len(entries) == 16
    for e in entries:
        d = tmp_path / "a" / e.clip_id
        assert len(list(d.glob("frame_*.png"))) == 17 and len(list(d.glob("depth_*.png"))) == 17
        assert (d / "trajectory.txt").is_file()
        assert e.descriptor in DESCRIPTORS and 1 <= e.stride <= 4
    assert len({e.kind for e in entries}) > 1 and len({e.stride for e in entries}) > 1
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_dataset_seed_changes_output(tmp_path):
    make_dataset(tmp_path / "a", n_clips=2, frames=5, H=16, W=16, seed=0)
    make_dataset(tmp_path / "b", n_clips=2, frames=5, H=16, W=16, seed=1)
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "b")


def test_dataset_missing_parent(tmp_path):
    with pytest.raises(FileNotFoundError, match="missing"):
        make_dataset(tmp_path / "missing" / "data", n_clips=1, frames=5, H=16, W=16)


def test_dataset_bad_frames(tmp_path):
    with pytest.raises(Exception):
        make_dataset(tmp_path / "x", n_clips=1, frames=6, H=16, W=16)
