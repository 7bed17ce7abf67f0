"""Pinhole cameras, ray/Plücker maps and the shared trajectory file.

Conventions: extrinsics map world -> camera, the camera looks down +Z with
+X right and +Y down, and integer pixel coordinates are pixel centres
(``u = fx * X / Z + cx`` with no half-pixel offset).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BehindCameraError, ParseError, ValidationError
from .se3 import RigidTransform, quat_to_rotmat, rotmat_to_quat

CONVENTION = "world_to_camera/opencv(+x right,+y down,+z forward)/twist(omega,v)/quat(w,x,y,z)"
MIN_DEPTH = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    def scaled(self, factor):
        return Intrinsics(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                          int(round(self.width * factor)), int(round(self.height * factor)))


@dataclass(frozen=True)
class Extrinsics:
    """World -> camera rigid transform."""

    pose: RigidTransform

    @classmethod
    def identity(cls):
        return cls(RigidTransform.identity())

    @classmethod
    def from_center(cls, rotation, center):
        """Build from a world->camera rotation and the camera centre in world."""
        R = np.asarray(rotation, dtype=float)
        return cls(RigidTransform(R, -R @ np.asarray(center, dtype=float)))

    @property
    def R(self):
        return self.pose.rotation

    @property
    def t(self):
        return self.pose.translation

    @property
    def center(self):
        return -self.R.T @ self.t


@dataclass
class CameraTrajectory:
    intrinsics: Intrinsics
    poses: list = field(default_factory=list)
    frame_rate: float = 30.0

    def __post_init__(self):
        if len(self.poses) < 1:
            raise ValidationError("a trajectory needs at least one pose")

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]


# ---------------------------------------------------------------------------
# Projection and rays
# ---------------------------------------------------------------------------

def project_points(X, K: Intrinsics, E: Extrinsics):
    """Project world points ``(..., 3)``; returns ``(pixels (..., 2), depth (...))``."""
    Xc = np.asarray(X, dtype=float) @ E.R.T + E.t
    z = Xc[..., 2]
    if np.any(z <= MIN_DEPTH):
        raise BehindCameraError("point behind the camera (depth <= 1e-6)")
    u = K.fx * Xc[..., 0] / z + K.cx
    v = K.fy * Xc[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1), z


def project_point(x, K: Intrinsics, E: Extrinsics):
    pix, depth = project_points(np.asarray(x, dtype=float).reshape(3), K, E)
    return pix, float(depth)


def pixel_rays(u, v, K: Intrinsics, E: Extrinsics):
    """World-space rays through pixels ``u, v`` (broadcastable arrays).

    Returns the camera centre ``o`` (3,) and unit directions ``(..., 3)``.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones(np.broadcast(u, v).shape)], axis=-1)
    d = cam @ E.R  # R^T applied to row vectors
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return E.center, d


def pixel_ray(u, v, K: Intrinsics, E: Extrinsics):
    if not (0 <= u < K.width and 0 <= v < K.height):
        raise ValidationError(f"pixel ({u}, {v}) outside {K.width}x{K.height} image")
    o, d = pixel_rays(u, v, K, E)
    return o, d.reshape(3)


def plucker_embed(K: Intrinsics, E: Extrinsics):
    """Per-pixel ``<o x d, d>`` as a ``(6, h, w)`` array (moment first)."""
    v, u = np.mgrid[0:K.height, 0:K.width].astype(float)
    o, d = pixel_rays(u, v, K, E)
    m = np.cross(np.broadcast_to(o, d.shape), d)
    return np.concatenate([m, d], axis=-1).transpose(2, 0, 1)


def write_plucker(path, trajectory: CameraTrajectory):
    """Raw little-endian float32 planar ``6 x h x w`` per frame + ``header.json``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    K = trajectory.intrinsics
    files = []
    for i, E in enumerate(trajectory.poses):
        name = f"{i:05d}.f32"
        plucker_embed(K, E).astype("<f4").tofile(out / name)
        files.append(name)
    header = {
        "shape": [6, K.height, K.width],
        "dtype": "float32",
        "byte_order": "little",
        "layout": "planar CHW",
        "channels": ["m_x", "m_y", "m_z", "d_x", "d_y", "d_z"],
        "frames": files,
        "convention": CONVENTION,
    }
    (out / "header.json").write_text(json.dumps(header, indent=2))
    return files


def read_plucker(path):
    path = Path(path)
    header = json.loads((path / "header.json").read_text())
    shape = tuple(header["shape"])
    return np.stack([np.fromfile(path / f, dtype="<f4").reshape(shape) for f in header["frames"]])


# ---------------------------------------------------------------------------
# Trajectory authoring
# ---------------------------------------------------------------------------

def look_at(center, target, up=(0.0, -1.0, 0.0)) -> Extrinsics:
    center = np.asarray(center, dtype=float)
    f = np.asarray(target, dtype=float) - center
    n = np.linalg.norm(f)
    if n < 1e-12:
        raise ValidationError("look_at: camera centre coincides with target")
    f /= n
    right = np.cross(f, np.asarray(up, dtype=float))
    if np.linalg.norm(right) < 1e-9:
        raise ValidationError("look_at: up vector parallel to viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    R = np.stack([right, down, f])  # rows: camera axes in world coords
    return Extrinsics.from_center(R, center)


def default_intrinsics(width=128, height=96, fov_deg=60.0):
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    return Intrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


def make_trajectory(kind, n_frames, intrinsics=None, frame_rate=30.0, **params) -> CameraTrajectory:
    """Author a smooth camera path.

    ``orbit``/``arc``: ``radius``, ``target``, ``arc_degrees`` (360 for orbit,
    30 for arc by default), ``elevation``; the camera circles the vertical
    axis through ``target`` and always looks at it. ``dolly``: ``start``,
    ``direction``, ``distance``, optional ``target``. ``static``: ``center``
    and ``target``.
    """
    if n_frames < 1:
        raise ValidationError("n_frames must be >= 1")
    K = intrinsics or default_intrinsics()
    target = np.asarray(params.get("target", (0.0, 0.0, 0.0)), dtype=float)

    if kind in ("orbit", "arc"):
        radius = float(params.get("radius", 2.0))
        if not radius > 0:
            raise ValidationError(f"orbit radius must be > 0, got {radius}")
        arc = float(params.get("arc_degrees", 360.0 if kind == "orbit" else 30.0))
        elevation = float(params.get("elevation", 0.0))
        if kind == "orbit" and abs(arc - 360.0) < 1e-12:
            angles = np.linspace(0.0, 2 * np.pi, n_frames, endpoint=False)
        else:
            half = math.radians(arc) / 2
            angles = np.linspace(-half, half, n_frames) if n_frames > 1 else np.zeros(1)
        poses = []
        for a in angles:
            c = target + radius * np.array([math.sin(a), 0.0, -math.cos(a)]) + np.array([0.0, -elevation, 0.0])
            poses.append(look_at(c, target))
    elif kind == "dolly":
        start = np.asarray(params.get("start", (0.0, 0.0, -2.0)), dtype=float)
        direction = np.asarray(params.get("direction", (0.0, 0.0, 1.0)), dtype=float)
        distance = float(params.get("distance", 1.0))
        if np.linalg.norm(direction) == 0:
            raise ValidationError("dolly direction must be non-zero")
        direction = direction / np.linalg.norm(direction)
        steps = np.linspace(0.0, distance, n_frames) if n_frames > 1 else np.zeros(1)
        if "target" in params:
            poses = [look_at(start + s * direction, target) for s in steps]
        else:
            R = np.eye(3)
            poses = [Extrinsics.from_center(R, start + s * direction) for s in steps]
    elif kind == "static":
        center = np.asarray(params.get("center", (0.0, 0.0, 0.0)), dtype=float)
        if "target" in params:
            E = look_at(center, target)
        else:
            E = Extrinsics.from_center(np.eye(3), center)
        poses = [E] * n_frames
    else:
        raise ValidationError(f"unknown trajectory kind {kind!r}; expected orbit, dolly, arc or static")
    return CameraTrajectory(K, poses, frame_rate)


# ---------------------------------------------------------------------------
# camera.json
# ---------------------------------------------------------------------------

def trajectory_to_dict(traj: CameraTrajectory):
    frames = []
    for E in traj.poses:
        frames.append({"q": [float(x) for x in rotmat_to_quat(E.R)], "t": [float(x) for x in E.t]})
    return {
        "convention": CONVENTION,
        "frame_rate": float(traj.frame_rate),
        "intrinsics": traj.intrinsics.to_dict(),
        "frames": frames,
    }


def write_trajectory(path, traj: CameraTrajectory):
    # json emits repr(float): shortest string that round-trips exactly.
    Path(path).write_text(json.dumps(trajectory_to_dict(traj), indent=1))


def _numbers(obj, n, where):
    if not isinstance(obj, list) or len(obj) != n or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in obj
    ):
        raise ParseError(f"{where}: expected a list of {n} numbers, got {obj!r}")
    arr = np.asarray(obj, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ParseError(f"{where}: non-finite value")
    return arr


def trajectory_from_dict(data, source="camera.json") -> CameraTrajectory:
    if not isinstance(data, dict):
        raise ParseError(f"{source}: top level must be an object")
    for key in ("frame_rate", "intrinsics", "frames"):
        if key not in data:
            raise ParseError(f"{source}: missing field '{key}'")
    conv = data.get("convention", CONVENTION)
    if not str(conv).startswith("world_to_camera"):
        raise ValidationError(f"{source}: unsupported convention {conv!r}")
    intr = data["intrinsics"]
    try:
        K = Intrinsics(float(intr["fx"]), float(intr["fy"]), float(intr["cx"]), float(intr["cy"]),
                       int(intr["width"]), int(intr["height"]))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{source}: intrinsics: missing or invalid field {exc}") from exc
    frames = data["frames"]
    if not isinstance(frames, list) or not frames:
        raise ParseError(f"{source}: 'frames' must be a non-empty list")
    poses = []
    for i, fr in enumerate(frames):
        where = f"{source}: frames[{i}]"
        if not isinstance(fr, dict) or "t" not in fr or not ("q" in fr or "R" in fr):
            raise ParseError(f"{where}: needs 't' and one of 'q' or 'R'")
        t = _numbers(fr["t"], 3, where + ".t")
        if "R" in fr:
            R = _numbers(fr["R"], 9, where + ".R").reshape(3, 3)
        else:
            q = _numbers(fr["q"], 4, where + ".q")
            if abs(np.linalg.norm(q) - 1.0) > 1e-4:
                raise ValidationError(f"{where}.q: quaternion norm {np.linalg.norm(q):.6f} is not 1")
            R = quat_to_rotmat(q)
        err = np.max(np.abs(R.T @ R - np.eye(3)))
        if err > 1e-4 or np.linalg.det(R) < 0:
            raise ValidationError(
                f"{where}: rotation is not in SO(3) (orthonormality error {err:.2e}, det {np.linalg.det(R):.3f})"
            )
        poses.append(Extrinsics(RigidTransform(R, t)))
    return CameraTrajectory(K, poses, float(data["frame_rate"]))


def read_trajectory(path) -> CameraTrajectory:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"{path} is missing")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return trajectory_from_dict(data, str(path))
