"""In-memory scene dataset and its directory layout.

Layout::

    camera.json              intrinsics + per-frame world-to-camera poses
    frames/00000.png ...     RGB frames (8-bit)
    depths/00000.png ...     16-bit depth, metres = value * scale
    depths/depth_scale.json  {"format": "png16", "scale": s} or {"format": "raw"}
    depths/00000.raw ...     (format "raw") little-endian float32, H x W
    tracks.tsv               query_id, frame, u, v, visible
    masks/00000.png ...      optional foreground masks
    heldout/views.json       optional held-out cameras + images
    scene.json               optional {"background": [r, g, b]}

A depth of 0 marks a pixel without a depth estimate.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..camera import CameraTrajectory, Extrinsics, read_trajectory, write_trajectory
from ..errors import ValidationError
from ..se3 import RigidTransform, quat_to_rotmat, rotmat_to_quat

TRACK_COLUMNS = ("query_id", "frame", "u", "v", "visible")


@dataclass
class TrackSet:
    query_ids: np.ndarray  # (Q,)
    positions: np.ndarray  # (Q, F, 2) pixel coordinates
    visible: np.ndarray  # (Q, F) bool

    def __len__(self):
        return len(self.query_ids)

    @classmethod
    def empty(cls, n_frames):
        return cls(np.zeros(0, np.int64), np.zeros((0, n_frames, 2)), np.zeros((0, n_frames), bool))


@dataclass
class HeldoutView:
    frame: int
    extrinsics: Extrinsics
    image: np.ndarray


@dataclass
class SceneDataset:
    frames: np.ndarray  # (F, H, W, 3) float in [0, 1]
    depths: np.ndarray  # (F, H, W)
    tracks: TrackSet
    trajectory: CameraTrajectory
    masks: np.ndarray = None  # (F, H, W) bool
    heldout: list = field(default_factory=list)
    background: tuple = (0.0, 0.0, 0.0)

    @property
    def n_frames(self):
        return len(self.frames)

    @property
    def intrinsics(self):
        return self.trajectory.intrinsics

    def validate(self):
        F = len(self.frames)
        K = self.trajectory.intrinsics
        if self.frames.ndim != 4 or self.frames.shape[3] != 3:
            raise ValidationError(f"frames must be (F, H, W, 3), got {self.frames.shape}")
        if self.frames.shape[1:3] != (K.height, K.width):
            raise ValidationError(
                f"frames are {self.frames.shape[2]}x{self.frames.shape[1]} but intrinsics say {K.width}x{K.height}")
        if len(self.depths) != F:
            raise ValidationError(f"{F} frames but {len(self.depths)} depth maps")
        if self.depths.shape[1:] != self.frames.shape[1:3]:
            raise ValidationError(f"depth maps are {self.depths.shape[1:]} but frames are {self.frames.shape[1:3]}")
        if not np.all(np.isfinite(self.depths)):
            bad = np.argwhere(~np.isfinite(self.depths))[0]
            raise ValidationError(f"non-finite depth at frame {bad[0]}, pixel (u={bad[2]}, v={bad[1]})")
        if len(self.trajectory) != F:
            raise ValidationError(f"{F} frames but camera.json has {len(self.trajectory)} poses")
        if self.masks is not None and self.masks.shape != self.frames.shape[:3]:
            raise ValidationError(f"masks have shape {self.masks.shape}, expected {self.frames.shape[:3]}")
        tr = self.tracks
        if tr.positions.shape[1:] != (F, 2) or tr.visible.shape != tr.positions.shape[:2]:
            raise ValidationError("track arrays do not match the frame count")
        pos = tr.positions
        inside = (pos[..., 0] >= -0.5) & (pos[..., 0] <= K.width - 0.5) & \
                 (pos[..., 1] >= -0.5) & (pos[..., 1] <= K.height - 0.5)
        bad = tr.visible & ~inside
        if np.any(bad):
            q, f = np.argwhere(bad)[0]
            raise ValidationError(
                f"track {tr.query_ids[q]} is visible at frame {f} but lies outside the image "
                f"at ({pos[q, f, 0]:.2f}, {pos[q, f, 1]:.2f})")
        return self


def _png_paths(directory: Path, suffix=".png"):
    return sorted(p for p in directory.glob(f"*{suffix}") if p.stem.isdigit())


def _read_rgb(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


def _write_rgb(path, rgb):
    Image.fromarray(np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)).save(path)


def write_depth_png16(path, depth, scale):
    q = np.round(np.asarray(depth) / scale)
    if q.max(initial=0) > 65535:
        raise ValidationError(f"depth exceeds the 16-bit range at scale {scale}")
    Image.fromarray(q.astype(np.uint16)).save(path)


def read_tracks_tsv(path, n_frames, width=None, height=None) -> TrackSet:
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TRACK_COLUMNS:
            raise ValidationError(f"{path}: header must be the columns {', '.join(TRACK_COLUMNS)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != 5:
                raise ValidationError(f"{path}:{lineno}: expected 5 columns, got {len(rec)}")
            try:
                qid, f = int(rec[0]), int(rec[1])
                u, v = float(rec[2]), float(rec[3])
                vis = int(rec[4])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            if not 0 <= f < n_frames:
                raise ValidationError(f"{path}:{lineno}: frame {f} outside 0..{n_frames - 1}")
            if vis not in (0, 1):
                raise ValidationError(f"{path}:{lineno}: visible must be 0 or 1")
            if not (np.isfinite(u) and np.isfinite(v)):
                raise ValidationError(f"{path}:{lineno}: non-finite track position")
            if vis and width is not None and not (-0.5 <= u <= width - 0.5 and -0.5 <= v <= height - 0.5):
                raise ValidationError(f"{path}:{lineno}: visible track point ({u}, {v}) outside the image")
            rows.setdefault(qid, {})[f] = (u, v, bool(vis))
    ids = np.array(sorted(rows), dtype=np.int64)
    pos = np.zeros((len(ids), n_frames, 2))
    vis = np.zeros((len(ids), n_frames), bool)
    for i, qid in enumerate(ids):
        for f, (u, v, s) in rows[qid].items():
            pos[i, f] = (u, v)
            vis[i, f] = s
    return TrackSet(ids, pos, vis)


def write_tracks_tsv(path, tracks: TrackSet):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(TRACK_COLUMNS)
        for i, qid in enumerate(tracks.query_ids):
            for f in range(tracks.positions.shape[1]):
                u, v = tracks.positions[i, f]
                w.writerow([int(qid), f, f"{u:.6f}", f"{v:.6f}", int(tracks.visible[i, f])])


def _read_depths(directory: Path, n_frames, shape):
    meta_path = directory / "depth_scale.json"
    if not meta_path.exists():
        raise ValidationError(f"{meta_path} is missing")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{meta_path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    fmt = meta.get("format", "png16")
    if fmt == "png16":
        scale = meta.get("scale")
        if not isinstance(scale, (int, float)) or not scale > 0:
            raise ValidationError(f"{meta_path}: 'scale' must be a positive number")
        paths = _png_paths(directory)
        out = []
        for p in paths:
            with Image.open(p) as im:
                out.append(np.asarray(im, dtype=float) * scale)
    elif fmt == "raw":
        paths = _png_paths(directory, ".raw")
        out = []
        for p in paths:
            a = np.fromfile(p, dtype="<f4")
            if a.size != shape[0] * shape[1]:
                raise ValidationError(f"{p}: {a.size} values, expected {shape[0] * shape[1]}")
            out.append(a.reshape(shape).astype(float))
    else:
        raise ValidationError(f"{meta_path}: unknown depth format {fmt!r}")
    if len(out) != n_frames:
        raise ValidationError(f"{n_frames} frames but {len(out)} depth maps in {directory}")
    for i, d in enumerate(out):
        if d.shape != shape:
            raise ValidationError(f"depth map {i} is {d.shape[1]}x{d.shape[0]}, frames are {shape[1]}x{shape[0]}")
    return np.stack(out)


def load_dataset(path) -> SceneDataset:
    root = Path(path)
    if not root.is_dir():
        raise ValidationError(f"dataset directory {root} does not exist")
    traj = read_trajectory(root / "camera.json")
    frame_paths = _png_paths(root / "frames")
    if not frame_paths:
        raise ValidationError(f"no frames found in {root / 'frames'}")
    frames = np.stack([_read_rgb(p) for p in frame_paths])
    K = traj.intrinsics
    if frames.shape[1:3] != (K.height, K.width):
        raise ValidationError(
            f"frames are {frames.shape[2]}x{frames.shape[1]} but intrinsics say {K.width}x{K.height}")
    if len(frames) != len(traj):
        raise ValidationError(f"{len(frames)} frames but camera.json has {len(traj)} poses")
    depths = _read_depths(root / "depths", len(frames), frames.shape[1:3])
    tracks_path = root / "tracks.tsv"
    tracks = (read_tracks_tsv(tracks_path, len(frames), K.width, K.height) if tracks_path.exists()
              else TrackSet.empty(len(frames)))
    masks = None
    if (root / "masks").is_dir():
        mp = _png_paths(root / "masks")
        if len(mp) != len(frames):
            raise ValidationError(f"{len(frames)} frames but {len(mp)} masks")
        masks = np.stack([np.asarray(Image.open(p).convert("L")) > 127 for p in mp])
    heldout = []
    hv = root / "heldout" / "views.json"
    if hv.exists():
        for i, view in enumerate(json.loads(hv.read_text()).get("views", [])):
            try:
                R = quat_to_rotmat(np.asarray(view["q"], float))
                t = np.asarray(view["t"], float)
                img = _read_rgb(root / "heldout" / view["image"])
                frame = int(view["frame"])
            except (KeyError, TypeError, ValueError, OSError) as exc:
                raise ValidationError(f"{hv}: view {i}: {exc}") from exc
            if not 0 <= frame < len(frames):
                raise ValidationError(f"{hv}: view {i}: frame {frame} out of range")
            heldout.append(HeldoutView(frame, Extrinsics(RigidTransform(R, t)), img))
    background = (0.0, 0.0, 0.0)
    sj = root / "scene.json"
    if sj.exists():
        background = tuple(float(x) for x in json.loads(sj.read_text()).get("background", background))
    ds = SceneDataset(frames, depths, tracks, traj, masks, heldout, background)
    return ds.validate()


def save_dataset(ds: SceneDataset, path, depth_format="png16"):
    ds.validate()
    root = Path(path)
    for sub in ("frames", "depths"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_trajectory(root / "camera.json", ds.trajectory)
    for i, f in enumerate(ds.frames):
        _write_rgb(root / "frames" / f"{i:05d}.png", f)
    if depth_format == "png16":
        scale = max(float(ds.depths.max()), 1e-6) / 65535.0
        for i, d in enumerate(ds.depths):
            write_depth_png16(root / "depths" / f"{i:05d}.png", d, scale)
        meta = {"format": "png16", "scale": scale}
    elif depth_format == "raw":
        for i, d in enumerate(ds.depths):
            d.astype("<f4").tofile(root / "depths" / f"{i:05d}.raw")
        meta = {"format": "raw", "dtype": "float32", "width": ds.depths.shape[2], "height": ds.depths.shape[1]}
    else:
        raise ValidationError(f"unknown depth format {depth_format!r}")
    (root / "depths" / "depth_scale.json").write_text(json.dumps(meta))
    write_tracks_tsv(root / "tracks.tsv", ds.tracks)
    if ds.masks is not None:
        (root / "masks").mkdir(exist_ok=True)
        for i, m in enumerate(ds.masks):
            Image.fromarray(np.where(m, 255, 0).astype(np.uint8)).save(root / "masks" / f"{i:05d}.png")
    if ds.heldout:
        (root / "heldout").mkdir(exist_ok=True)
        views = []
        for i, hv in enumerate(ds.heldout):
            name = f"{i:05d}.png"
            _write_rgb(root / "heldout" / name, hv.image)
            views.append({"frame": int(hv.frame), "q": rotmat_to_quat(hv.extrinsics.R).tolist(),
                          "t": hv.extrinsics.t.tolist(), "image": name})
        (root / "heldout" / "views.json").write_text(json.dumps({"views": views}, indent=1))
    (root / "scene.json").write_text(json.dumps({"background": list(map(float, ds.background))}))
    return root
