"""Synthetic RGB-D scenes: a primary-ray raycaster over spheres and planes.

World frame is y-up; cameras follow the OpenCV convention used by
:mod:`dualcam.camera`. Depth is camera-frame z of the nearest hit, misses
get the scene's far-plane value.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import codec
from .camera import (CameraTrajectory, Intrinsics, Pose, axis_angle, camera_directions,
                     save_trajectory)
from .errors import ConfigError, InputError, ShapeError

PALETTES = {
    "warm": [(0.9, 0.3, 0.2), (0.95, 0.7, 0.2), (0.8, 0.45, 0.3)],
    "cool": [(0.2, 0.4, 0.9), (0.2, 0.8, 0.7), (0.5, 0.3, 0.85)],
    "mono": [(0.85, 0.85, 0.85), (0.5, 0.5, 0.5), (0.25, 0.25, 0.25)],
}
COUNT_WORDS = {1: "one", 2: "two", 3: "three"}
DESCRIPTORS = tuple(f"{COUNT_WORDS[n]}_{p}" for p in PALETTES for n in COUNT_WORDS)
TRAJECTORY_KINDS = ("orbit", "dolly", "pan", "truck")
EPS = 1e-9


def _vec(v) -> tuple:
    return tuple(float(x) for x in v)


@dataclass
class Sphere:
    center: tuple
    radius: float
    albedo: tuple
    checker: float = 0.0
    frame: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def __post_init__(self):
        self.center, self.albedo = _vec(self.center), _vec(self.albedo)
        self.frame = tuple(_vec(r) for r in self.frame)
        self.radius, self.checker = float(self.radius), float(self.checker)


@dataclass
class Plane:
    """Rectangle (or infinite plane when extents are ``inf``).

    ``u_axis`` and ``normal`` must be orthonormal; the checker pattern and
    extents are measured in the local ``(u, v)`` coordinates about ``center``.
    """

    center: tuple
    normal: tuple
    u_axis: tuple
    extent: tuple = (float("inf"), float("inf"))
    albedo: tuple = (0.8, 0.8, 0.8)
    checker: float = 0.0

    def __post_init__(self):
        self.center, self.normal, self.u_axis = _vec(self.center), _vec(self.normal), _vec(self.u_axis)
        self.extent, self.albedo = _vec(self.extent), _vec(self.albedo)
        self.checker = float(self.checker)


@dataclass
class SceneSpec:
    spheres: list = field(default_factory=list)
    planes: list = field(default_factory=list)
    light: tuple = (0.3, 1.0, -0.5)     # direction towards the light
    background: tuple = (0.55, 0.7, 0.9)
    ambient: float = 0.25
    far: float = 10.0
    descriptor: str = DESCRIPTORS[0]

    def __post_init__(self):
        self.spheres = [s if isinstance(s, Sphere) else Sphere(**s) for s in self.spheres]
        self.planes = [p if isinstance(p, Plane) else Plane(**p) for p in self.planes]
        self.light, self.background = _vec(self.light), _vec(self.background)
        if not self.spheres and not self.planes:
            raise InputError("scene needs at least one primitive")
        for s in self.spheres:
            if not (np.all(np.isfinite(s.center)) and np.isfinite(s.radius)) or s.radius <= 0:
                raise InputError(f"invalid sphere {s}")
        for p in self.planes:
            if not (np.all(np.isfinite(p.center)) and np.all(np.isfinite(p.normal))):
                raise InputError(f"invalid plane {p}")

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        d = json.loads(text)
        return cls(**d)

    def transformed(self, R, t) -> "SceneSpec":
        """Apply the rigid map ``x -> R x + t`` to every primitive and the light."""
        R = np.asarray(R, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        spheres = [Sphere(tuple(R @ s.center + t), s.radius, s.albedo, s.checker,
                          tuple(map(tuple, R @ np.asarray(s.frame))))
                   for s in self.spheres]
        planes = [Plane(tuple(R @ p.center + t), tuple(R @ p.normal), tuple(R @ p.u_axis),
                        p.extent, p.albedo, p.checker) for p in self.planes]
        return SceneSpec(spheres, planes, tuple(R @ self.light), self.background,
                         self.ambient, self.far, self.descriptor)


@dataclass
class RenderedClip:
    rgb: np.ndarray          # (T, 3, H, W) in [-1, 1]
    depth: np.ndarray        # (T, 1, H, W) camera-frame z
    trajectory: CameraTrajectory
    descriptor: str
    hit: np.ndarray | None = None   # (T, H, W) bool


def _checker(u, v, w, period):
    if period <= 0:
        return np.ones_like(u)
    # cells are centred on the local origin so axis-aligned views never sit on a boundary
    parity = (np.floor(u / period + 0.5) + np.floor(v / period + 0.5) + np.floor(w / period + 0.5)) % 2
    return np.where(parity == 0, 1.0, 0.55)


def render_rays(scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray):
    """Trace rays ``dirs`` (N, 3) from a shared ``origin``.

    Returns ``(colour (N, 3) in [0, 1], distance (N,), hit mask (N,))``.
    """
    n = dirs.shape[0]
    best = np.full(n, np.inf)
    colour = np.tile(np.asarray(scene.background, dtype=np.float64), (n, 1))
    light = np.asarray(scene.light, dtype=np.float64)
    light = light / np.linalg.norm(light)

    def shade(mask, t, normal, albedo, check):
        lam = np.clip(np.einsum("nc,c->n", normal, light), 0.0, None)
        c = np.asarray(albedo)[None, :] * check[:, None] * (scene.ambient + (1 - scene.ambient) * lam)[:, None]
        colour[mask] = c
        best[mask] = t

    for s in scene.spheres:
        c = np.asarray(s.center, dtype=np.float64)
        oc = origin - c
        b = dirs @ oc
        disc = b * b - (oc @ oc - s.radius ** 2)
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > EPS, t0, t1)
        mask = ok & (t > EPS) & (t < best)
        if not mask.any():
            continue
        tm = t[mask]
        p = origin + tm[:, None] * dirs[mask]
        normal = (p - c) / s.radius
        local = (p - c) @ np.asarray(s.frame)   # coordinates in the sphere's frame
        check = _checker(local[:, 0], local[:, 1], local[:, 2], s.checker)
        shade(mask, tm, normal, s.albedo, check)

    for pl in scene.planes:
        nrm = np.asarray(pl.normal, dtype=np.float64)
        u = np.asarray(pl.u_axis, dtype=np.float64)
        v = np.cross(nrm, u)
        c = np.asarray(pl.center, dtype=np.float64)
        denom = dirs @ nrm
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - origin) @ nrm) / denom
        mask = (np.abs(denom) > EPS) & (t > EPS) & (t < best)
        if not mask.any():
            continue
        tm = t[mask]
        rel = origin - c + tm[:, None] * dirs[mask]
        lu, lv = rel @ u, rel @ v
        inside = (np.abs(lu) <= pl.extent[0]) & (np.abs(lv) <= pl.extent[1])
        idx = np.flatnonzero(mask)[inside]
        mask = np.zeros(n, dtype=bool)
        mask[idx] = True
        if not mask.any():
            continue
        tm, lu, lv = tm[inside], lu[inside], lv[inside]
        facing = np.where((dirs[mask] @ nrm) < 0, 1.0, -1.0)
        normal = facing[:, None] * nrm[None, :]
        check = _checker(lu, lv, np.zeros_like(lu), pl.checker)
        shade(mask, tm, normal, pl.albedo, check)

    return colour, best, np.isfinite(best)


def render_frame(scene: SceneSpec, pose: Pose, intr: Intrinsics, H: int, W: int):
    """Render a single view. Returns ``(rgb (3, H, W) in [-1, 1], depth (H, W), hit (H, W))``."""
    d_cam = camera_directions(intr, H, W).reshape(-1, 3)
    dirs = d_cam @ pose.rotation.T
    colour, dist, hit = render_rays(scene, pose.translation, dirs)
    depth = np.where(hit, dist * d_cam[:, 2], scene.far)
    rgb = colour.reshape(H, W, 3).transpose(2, 0, 1) * 2.0 - 1.0
    return rgb, depth.reshape(H, W), hit.reshape(H, W)


def render_clip(scene: SceneSpec, traj: CameraTrajectory, H: int, W: int) -> RenderedClip:
    frames = [render_frame(scene, p, traj.intrinsics_at(k), H, W) for k, p in enumerate(traj.poses)]
    rgb = np.stack([f[0] for f in frames])
    depth = np.stack([f[1] for f in frames])[:, None]
    hit = np.stack([f[2] for f in frames])
    return RenderedClip(rgb, depth, traj, scene.descriptor, hit)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

WORLD_UP = np.array([0.0, 1.0, 0.0])


def look_at(eye, target, up=WORLD_UP) -> Pose:
    """Camera-to-world pose at ``eye`` looking at ``target`` (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        raise InputError("look_at direction is parallel to the up vector")
    right /= nr
    down = np.cross(fwd, right)
    return Pose(np.stack([right, down, fwd], axis=1), eye)


def default_intrinsics(H: int, W: int) -> Intrinsics:
    return Intrinsics(float(W), float(W), W / 2.0, H / 2.0)


def make_trajectory(kind: str, params: dict | None = None, frames: int = 17,
                    intrinsics: Intrinsics | None = None, width: int = 64,
                    height: int = 64) -> CameraTrajectory:
    """Analytic camera paths.

    * ``orbit``: eye circles ``target`` about the world y axis at ``radius``
      and ``height``; ``degrees`` total sweep, frame ``k`` at ``degrees*k/frames``
      so a full 360 orbit does not repeat its first frame.
    * ``dolly``: fixed orientation, eye moves ``speed`` per frame along the view axis.
    * ``pan``: fixed eye, yaw about world up by ``degrees*k/(frames-1)``.
    * ``truck``: fixed orientation, eye moves ``speed`` per frame along camera x.
    """
    if frames < 2:
        raise ConfigError(f"trajectories need at least 2 frames, got {frames}")
    if kind not in TRAJECTORY_KINDS:
        raise ConfigError(f"unknown trajectory kind {kind!r}")
    p = dict(params or {})
    for key, val in p.items():
        if not np.all(np.isfinite(np.asarray(val, dtype=np.float64))):
            raise ConfigError(f"non-finite trajectory parameter {key}={val}")
    intr = intrinsics or default_intrinsics(height, width)
    eye = np.asarray(p.get("eye", (0.0, 0.0, -1.0)), dtype=np.float64)
    target = np.asarray(p.get("target", (0.0, -0.3, 3.0)), dtype=np.float64)
    poses = []
    if kind == "orbit":
        radius = float(p.get("radius", 4.0))
        height_ = float(p.get("height", 0.8))
        start = float(p.get("start_deg", 0.0))
        total = float(p.get("degrees", 40.0))
        if radius <= 0:
            raise ConfigError("orbit radius must be positive")
        for k in range(frames):
            th = np.radians(start + total * k / frames)
            e = target + np.array([radius * np.sin(th), height_, -radius * np.cos(th)])
            poses.append(look_at(e, target))
    elif kind == "pan":
        base = look_at(eye, target)
        total = float(p.get("degrees", 30.0))
        for k in range(frames):
            R = axis_angle(WORLD_UP, total * k / (frames - 1)) @ base.rotation
            poses.append(Pose(R, eye))
    else:
        base = look_at(eye, target)
        speed = float(p.get("speed", 0.1))
        axis = base.rotation[:, 2] if kind == "dolly" else base.rotation[:, 0]
        for k in range(frames):
            poses.append(Pose(base.rotation, eye + speed * k * axis))
    return CameraTrajectory(intr, poses, width, height)


# ---------------------------------------------------------------------------
# Random scenes and datasets
# ---------------------------------------------------------------------------

def random_scene(rng: np.random.Generator) -> SceneSpec:
    palette = list(PALETTES)[int(rng.integers(len(PALETTES)))]
    count = int(rng.integers(1, 4))
    colours = PALETTES[palette]
    spheres = []
    for n in range(count):
        r = float(rng.uniform(0.35, 0.8))
        x = float(rng.uniform(-1.6, 1.6))
        z = float(rng.uniform(2.2, 4.8))
        spheres.append(Sphere((x, -1.0 + r, z), r, colours[n % len(colours)],
                              float(rng.choice([0.0, 0.25, 0.4]))))
    floor_col = tuple(float(c) for c in rng.uniform(0.45, 0.85, 3))
    wall_col = tuple(float(c) for c in rng.uniform(0.35, 0.75, 3))
    planes = [
        Plane((0.0, -1.0, 3.0), (0.0, 1.0, 0.0), (1.0, 0.0, 0.0), (6.0, 6.0), floor_col,
              float(rng.uniform(0.5, 1.0))),
        Plane((0.0, 1.0, 7.0), (0.0, 0.0, -1.0), (1.0, 0.0, 0.0), (6.0, 2.0), wall_col,
              float(rng.choice([0.0, 0.8]))),
    ]
    light = (float(rng.uniform(-0.6, 0.6)), 1.0, float(rng.uniform(-0.8, -0.2)))
    return SceneSpec(spheres, planes, light, descriptor=f"{COUNT_WORDS[count]}_{palette}")


def random_trajectory(rng: np.random.Generator, frames: int, stride: int, H: int, W: int):
    kind = TRAJECTORY_KINDS[int(rng.integers(len(TRAJECTORY_KINDS)))]
    sign = float(rng.choice([-1.0, 1.0]))
    full = (frames - 1) * stride + 1
    if kind == "orbit":
        params = {"radius": float(rng.uniform(3.5, 4.5)), "height": float(rng.uniform(0.3, 1.0)),
                  "start_deg": float(rng.uniform(-10, 10)),
                  "degrees": sign * float(rng.uniform(0.6, 1.2)) * full,
                  "target": (0.0, -0.4, 3.5)}
    elif kind == "pan":
        params = {"eye": (0.0, 0.1, -0.5), "target": (0.0, -0.3, 3.5),
                  "degrees": sign * float(rng.uniform(0.4, 0.9)) * (full - 1)}
    else:
        params = {"eye": (float(rng.uniform(-0.3, 0.3)), 0.1, -0.5), "target": (0.0, -0.3, 3.5),
                  "speed": sign * float(rng.uniform(0.01, 0.03))}
    traj = make_trajectory(kind, params, full, default_intrinsics(H, W), W, H)
    return kind, traj.subsample(stride)


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def make_dataset(root, n_clips: int = 16, frames: int = 17, H: int = 64, W: int = 64,
                 seed: int = 0, max_stride: int = 4) -> Path:
    """Render a seeded synthetic dataset to ``root``; returns the manifest path.

    Layout: ``<root>/<clip_id>/frame_%04d.png``, ``depth_%04d.png`` (16-bit),
    ``trajectory.txt``, ``scene.json`` and ``<root>/manifest.txt``.
    """
    if n_clips < 1:
        raise ConfigError("n_clips must be >= 1")
    codec.check_video_dims(frames, H, W)
    root = Path(root)
    if not root.parent.exists():
        raise FileNotFoundError(f"parent directory does not exist: {root.parent}")
    root.mkdir(exist_ok=True)
    lines = ["# id frames H W kind stride descriptor depth_min depth_max"]
    for i in range(n_clips):
        rng = np.random.default_rng([seed, i])
        scene = random_scene(rng)
        stride = int(rng.integers(1, max_stride + 1))
        kind, traj = random_trajectory(rng, frames, stride, H, W)
        clip = render_clip(scene, traj, H, W)
        clip_id = f"clip_{i:04d}"
        d = root / clip_id
        d.mkdir(exist_ok=True)
        lo, hi = float(clip.depth.min()), float(clip.depth.max())
        for k in range(frames):
            codec.save_rgb(d / f"frame_{k:04d}.png", clip.rgb[k])
            codec.save_depth(d / f"depth_{k:04d}.png", clip.depth[k, 0], lo, hi)
        save_trajectory(d / "trajectory.txt", traj)
        _write_atomic(d / "scene.json", scene.to_json())
        lines.append(f"{clip_id} {frames} {H} {W} {kind} {stride} {scene.descriptor} {lo!r} {hi!r}")
    manifest = root / "manifest.txt"
    _write_atomic(manifest, "\n".join(lines) + "\n")
    return manifest


@dataclass
class ManifestEntry:
    clip_id: str
    frames: int
    H: int
    W: int
    kind: str
    stride: int
    descriptor: str
    depth_min: float
    depth_max: float


def read_manifest(root) -> list[ManifestEntry]:
    path = Path(root) / "manifest.txt"
    out = []
    for n, ln in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not ln.strip() or ln.startswith("#"):
            continue
        t = ln.split()
        if len(t) != 9:
            raise ShapeError(f"{path}:{n}: expected 9 fields, got {len(t)}")
        out.append(ManifestEntry(t[0], int(t[1]), int(t[2]), int(t[3]), t[4], int(t[5]),
                                 t[6], float(t[7]), float(t[8])))
    return out


def load_clip(root, entry: ManifestEntry) -> RenderedClip:
    from .camera import load_trajectory
    d = Path(root) / entry.clip_id
    rgb = np.stack([codec.load_rgb(d / f"frame_{k:04d}.png") for k in range(entry.frames)])
    depth = np.stack([codec.load_depth(d / f"depth_{k:04d}.png", entry.depth_min, entry.depth_max)[None]
                      for k in range(entry.frames)])
    return RenderedClip(rgb, depth, load_trajectory(d / "trajectory.txt"), entry.descriptor)


def load_scene(root, entry: ManifestEntry) -> SceneSpec:
    return SceneSpec.from_json((Path(root) / entry.clip_id / "scene.json").read_text(encoding="utf-8"))
