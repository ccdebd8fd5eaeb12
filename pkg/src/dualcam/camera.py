"""Camera poses, Plücker ray maps, trajectory files and pose-error metrics.

Conventions: poses are camera-to-world, camera axes follow the OpenCV
layout (x right, y down, z forward), intrinsics are in pixels, and the
pixel grid uses integer corner coordinates ``i in [0, W)``, ``j in [0, H)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from einops import rearrange

from .errors import InputError, ShapeError, TrajectoryParseError

ORTHO_TOL = 1e-6
TRAJ_MAGIC = "DCAM-TRAJ"
TRAJ_VERSION = "v1"


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(v) for v in vals):
            raise InputError(f"non-finite intrinsics {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise InputError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=np.float64)

    def scaled(self, sx: float, sy: float) -> "Intrinsics":
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy)


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InputError("non-finite pose entries")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "Pose":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def is_orthonormal(self, tol: float = ORTHO_TOL) -> bool:
        R = self.rotation
        return (np.abs(R.T @ R - np.eye(3)).max() <= tol
                and abs(np.linalg.det(R) - 1.0) <= tol)


@dataclass
class CameraTrajectory:
    """Per-clip camera path.

    ``intrinsics`` is either a single :class:`Intrinsics` shared by all frames
    or a list with one entry per frame. ``width``/``height`` record the image
    resolution the intrinsics refer to (optional, 0 when unknown).
    """

    intrinsics: Intrinsics | list[Intrinsics]
    poses: list[Pose]
    width: int = 0
    height: int = 0

    def __post_init__(self):
        self.poses = list(self.poses)
        if len(self.poses) < 1:
            raise InputError("trajectory needs at least one pose")
        if isinstance(self.intrinsics, (list, tuple)):
            self.intrinsics = list(self.intrinsics)
            if len(self.intrinsics) != len(self.poses):
                raise ShapeError(
                    f"{len(self.intrinsics)} intrinsics for {len(self.poses)} poses")

    @property
    def frame_count(self) -> int:
        return len(self.poses)

    def __len__(self):
        return len(self.poses)

    def intrinsics_at(self, k: int) -> Intrinsics:
        if isinstance(self.intrinsics, list):
            return self.intrinsics[k]
        return self.intrinsics

    @property
    def shared_intrinsics(self) -> Intrinsics | None:
        if not isinstance(self.intrinsics, list):
            return self.intrinsics
        first = self.intrinsics[0]
        return first if all(k == first for k in self.intrinsics) else None

    def rotations(self) -> np.ndarray:
        return np.stack([p.rotation for p in self.poses])

    def translations(self) -> np.ndarray:
        return np.stack([p.translation for p in self.poses])

    def subsample(self, stride: int) -> "CameraTrajectory":
        idx = range(0, len(self.poses), stride)
        intr = ([self.intrinsics[k] for k in idx]
                if isinstance(self.intrinsics, list) else self.intrinsics)
        return CameraTrajectory(intr, [self.poses[k] for k in idx], self.width, self.height)


# ---------------------------------------------------------------------------
# Plücker rays
# ---------------------------------------------------------------------------

def camera_directions(intr: Intrinsics, H: int, W: int) -> np.ndarray:
    """Unit camera-frame ray directions, shape ``(H, W, 3)``."""
    i, j = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    d = np.stack([(i - intr.cx) / intr.fx, (j - intr.cy) / intr.fy, np.ones_like(i)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def generate_plucker_rays(traj: CameraTrajectory, H: int, W: int) -> np.ndarray:
    """Per-pixel Plücker coordinates for every frame of ``traj``.

    Returns an array of shape ``(T, H, W, 6)`` with channels ``[m, d]``, where
    ``d`` is the unit world-space ray direction and ``m = o × d`` its moment
    about the world origin (``o`` is the camera center).
    """
    if H < 1 or W < 1:
        raise ShapeError(f"image size must be positive, got H={H} W={W}")
    out = np.empty((traj.frame_count, H, W, 6), dtype=np.float64)
    cache: dict[Intrinsics, np.ndarray] = {}
    for k, pose in enumerate(traj.poses):
        intr = traj.intrinsics_at(k)
        if intr not in cache:
            cache[intr] = camera_directions(intr, H, W)
        d_world = cache[intr] @ pose.rotation.T
        o = np.broadcast_to(pose.translation, d_world.shape)
        out[k, ..., 3:] = d_world
        out[k, ..., :3] = np.cross(o, d_world)
    return out


def temporal_groups(T: int) -> list[list[int]]:
    """Frame indices of each codec temporal group: ``[0], [1..4], [5..8], ...``."""
    if T < 1 or (T - 1) % 4:
        raise ShapeError(f"frame count must satisfy (T-1) % 4 == 0, got T={T}")
    return [[0]] + [list(range(s, s + 4)) for s in range(1, T, 4)]


def space_to_channel(rays: np.ndarray, factor: int) -> np.ndarray:
    """``(T, H, W, C) -> (T, C*factor*factor, H/factor, W/factor)``."""
    T, H, W, C = rays.shape
    if H % factor or W % factor:
        raise ShapeError(f"H={H}, W={W} not divisible by factor {factor}")
    return rearrange(rays, "t (h p) (w q) c -> t (c p q) h w", p=factor, q=factor)


def group_frames(x: np.ndarray) -> np.ndarray:
    """Average a ``(T, ...)`` array within each codec temporal group."""
    return np.stack([x[g].mean(axis=0) for g in temporal_groups(x.shape[0])])


def downsample_rayfield(rays: np.ndarray, factor: int = 8, projection=None) -> np.ndarray:
    """Pixel-shuffle a ray field down by ``factor`` and align it with the codec.

    The ``(T, H, W, 6)`` field becomes ``(T', 6*factor**2, H/factor, W/factor)``
    after space-to-channel rearrangement and per-group temporal averaging.
    When ``projection`` (a ``(C', 6*factor**2)`` matrix) is given it is applied
    channel-wise, giving ``(T', C', h, w)``.
    """
    grouped = group_frames(space_to_channel(rays, factor))
    if projection is None:
        return grouped
    P = np.asarray(projection, dtype=np.float64)
    if P.shape[1] != grouped.shape[1]:
        raise ShapeError(f"projection expects {P.shape[1]} channels, got {grouped.shape[1]}")
    return np.einsum("oc,tchw->tohw", P, grouped)


def orthonormal_rows(n_out: int, n_in: int, seed: int = 0) -> np.ndarray:
    """Seeded ``(n_out, n_in)`` matrix with orthonormal rows."""
    if n_out > n_in:
        raise ShapeError(f"cannot build {n_out} orthonormal rows in dimension {n_in}")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((n_in, n_out)))
    q = q * np.sign(np.diag(r))
    return q.T.copy()


# ---------------------------------------------------------------------------
# Relative poses and metrics
# ---------------------------------------------------------------------------

def normalize_to_first_frame(traj: CameraTrajectory) -> CameraTrajectory:
    inv0 = traj.poses[0].inverse()
    poses = [inv0.compose(p) for p in traj.poses]
    poses[0] = Pose.identity()
    return CameraTrajectory(traj.intrinsics, poses, traj.width, traj.height)


def rotation_angle_deg(R: np.ndarray) -> np.ndarray:
    """Geodesic angle of rotation matrices ``(..., 3, 3)`` in degrees."""
    R = np.asarray(R)
    cos = (np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0
    skew = np.stack([R[..., 2, 1] - R[..., 1, 2],
                     R[..., 0, 2] - R[..., 2, 0],
                     R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    sin = np.linalg.norm(skew, axis=-1) / 2.0
    return np.degrees(np.arctan2(sin, cos))


def _check_pair(a: CameraTrajectory, b: CameraTrajectory):
    if a.frame_count != b.frame_count:
        raise ShapeError(f"frame counts differ: {a.frame_count} vs {b.frame_count}")
    if a.frame_count < 2:
        raise ShapeError("pose errors need at least two frames")


def rotation_error(traj_a: CameraTrajectory, traj_b: CameraTrajectory) -> float:
    """Mean geodesic angle (degrees) between relative rotations, frames 1..T-1."""
    _check_pair(traj_a, traj_b)
    Ra = normalize_to_first_frame(traj_a).rotations()[1:]
    Rb = normalize_to_first_frame(traj_b).rotations()[1:]
    rel = np.einsum("kji,kjl->kil", Ra, Rb)
    return float(rotation_angle_deg(rel).mean())


def _scale_normalized_centers(traj: CameraTrajectory) -> np.ndarray:
    c = normalize_to_first_frame(traj).translations()
    scale = np.linalg.norm(c, axis=1).mean()
    return c / scale if scale > 0 else c


def translation_error(traj_a: CameraTrajectory, traj_b: CameraTrajectory) -> float:
    """Mean L2 distance between scale-normalized camera centers, frames 1..T-1."""
    _check_pair(traj_a, traj_b)
    ca = _scale_normalized_centers(traj_a)[1:]
    cb = _scale_normalized_centers(traj_b)[1:]
    return float(np.linalg.norm(ca - cb, axis=1).mean())


# ---------------------------------------------------------------------------
# Trajectory files
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def serialize_trajectory(traj: CameraTrajectory) -> str:
    intr = traj.shared_intrinsics
    if intr is None:
        raise ShapeError("native trajectory files require shared intrinsics")
    lines = [f"{TRAJ_MAGIC} {TRAJ_VERSION} frames={traj.frame_count} "
             f"fx={_fmt(intr.fx)} fy={_fmt(intr.fy)} cx={_fmt(intr.cx)} cy={_fmt(intr.cy)} "
             f"width={int(traj.width)} height={int(traj.height)}"]
    for p in traj.poses:
        M = np.hstack([p.rotation, p.translation[:, None]])
        lines.append(" ".join(_fmt(v) for v in M.ravel()))
    return "\n".join(lines) + "\n"


def _floats(tokens, lineno):
    try:
        vals = [float(tok) for tok in tokens]
    except ValueError as exc:
        raise TrajectoryParseError(f"expected numbers: {exc}", lineno) from None
    if not all(np.isfinite(vals)):
        raise TrajectoryParseError("non-finite value", lineno)
    return vals


def _checked_pose(R, t, lineno, tol):
    pose = Pose(R, t)
    if not pose.is_orthonormal(tol):
        raise TrajectoryParseError("rotation is not orthonormal", lineno)
    return pose


def parse_trajectory(text: str, ortho_tol: float = ORTHO_TOL) -> CameraTrajectory:
    """Parse a native ``DCAM-TRAJ v1`` trajectory file."""
    lines = [(n, ln.strip()) for n, ln in enumerate(text.splitlines(), start=1)]
    lines = [(n, ln) for n, ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise TrajectoryParseError("empty trajectory file", 1)
    lineno, header = lines[0]
    parts = header.split()
    if len(parts) < 2 or parts[0] != TRAJ_MAGIC:
        raise TrajectoryParseError(f"missing {TRAJ_MAGIC} header", lineno)
    if parts[1] != TRAJ_VERSION:
        raise TrajectoryParseError(f"unsupported version {parts[1]!r}", lineno)
    fields = {}
    for tok in parts[2:]:
        key, sep, val = tok.partition("=")
        if not sep:
            raise TrajectoryParseError(f"malformed header field {tok!r}", lineno)
        fields[key] = val
    required = ("frames", "fx", "fy", "cx", "cy", "width", "height")
    missing = [k for k in required if k not in fields]
    if missing:
        raise TrajectoryParseError(f"header missing {missing}", lineno)
    try:
        frames = int(fields["frames"])
        width, height = int(fields["width"]), int(fields["height"])
        fx, fy, cx, cy = _floats([fields[k] for k in ("fx", "fy", "cx", "cy")], lineno)
        intr = Intrinsics(fx, fy, cx, cy)
    except (ValueError, InputError) as exc:
        if isinstance(exc, TrajectoryParseError):
            raise
        raise TrajectoryParseError(f"bad header value: {exc}", lineno) from None
    body = lines[1:]
    if len(body) != frames:
        raise TrajectoryParseError(f"header declares {frames} frames, found {len(body)}",
                                   body[-1][0] if body else lineno)
    poses = []
    for n, ln in body:
        toks = ln.split()
        if len(toks) != 12:
            raise TrajectoryParseError(f"expected 12 values, got {len(toks)}", n)
        M = np.array(_floats(toks, n)).reshape(3, 4)
        poses.append(_checked_pose(M[:, :3], M[:, 3], n, ortho_tol))
    if frames < 1:
        raise TrajectoryParseError("trajectory has no frames", lineno)
    return CameraTrajectory(intr, poses, width, height)


def parse_re10k(text: str, width: int, height: int, ortho_tol: float = 1e-4) -> CameraTrajectory:
    """Import a RealEstate10K-style camera file.

    Each line is ``timestamp fx fy cx cy 0 0 r11 ... r34`` with intrinsics
    normalized by image size and a world-to-camera ``[R|t]``. A leading line
    with a single token (the video URL) is skipped. Intrinsics are rescaled
    to pixels and poses inverted to camera-to-world.
    """
    intrs, poses = [], []
    for n, raw in enumerate(text.splitlines(), start=1):
        toks = raw.split()
        if not toks or raw.lstrip().startswith("#"):
            continue
        if len(toks) == 1 and not poses:
            continue
        if len(toks) != 19:
            raise TrajectoryParseError(f"expected 19 values, got {len(toks)}", n)
        vals = _floats(toks, n)
        fx, fy, cx, cy = vals[1:5]
        try:
            intrs.append(Intrinsics(fx * width, fy * height, cx * width, cy * height))
        except InputError as exc:
            raise TrajectoryParseError(str(exc), n) from None
        w2c = np.array(vals[7:]).reshape(3, 4)
        poses.append(_checked_pose(w2c[:, :3], w2c[:, 3], n, ortho_tol).inverse())
    if not poses:
        raise TrajectoryParseError("no camera lines found", 1)
    return CameraTrajectory(intrs, poses, width, height)


def load_trajectory(path) -> CameraTrajectory:
    with open(path, encoding="utf-8") as fh:
        return parse_trajectory(fh.read())


def save_trajectory(path, traj: CameraTrajectory) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_trajectory(traj))


# ---------------------------------------------------------------------------
# Small rotation helpers
# ---------------------------------------------------------------------------

def axis_angle(axis: Sequence[float], degrees: float) -> np.ndarray:
    """Rodrigues rotation matrix about ``axis`` by ``degrees``."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    th = np.radians(degrees)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * (K @ K)


def project_to_so3(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def grouped_trajectory(traj: CameraTrajectory) -> CameraTrajectory:
    """Collapse a ``T``-frame trajectory to ``T'`` frames by codec-group averaging.

    Rotations are averaged chordally (mean matrix projected onto SO(3)).
    """
    groups = temporal_groups(traj.frame_count)
    poses = []
    for g in groups:
        R = project_to_so3(np.mean([traj.poses[k].rotation for k in g], axis=0))
        t = np.mean([traj.poses[k].translation for k in g], axis=0)
        poses.append(Pose(R, t))
    intr = traj.intrinsics_at(0) if traj.shared_intrinsics is None else traj.shared_intrinsics
    return CameraTrajectory(intr, poses, traj.width, traj.height)
