"""Writers and readers for fitted scenes, trajectories and renders."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ValidationError
from ..gaussians import GaussianCloud, MotionModel

PLY_FIELDS = ("x", "y", "z", "qw", "qx", "qy", "qz", "s0", "s1", "s2", "opacity", "r", "g", "b")
TRACK3D_COLUMNS = ("query_id", "t", "x", "y", "z")


def write_tracks_3d(path, query_ids, points):
    """``points`` is ``(Q, F, 3)``; one row per query and frame."""
    points = np.asarray(points, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(TRACK3D_COLUMNS)
        for qid, traj in zip(query_ids, points):
            for t, (x, y, z) in enumerate(traj):
                w.writerow([int(qid), t, f"{x:.9g}", f"{y:.9g}", f"{z:.9g}"])


def read_tracks_3d(path):
    """Returns ``(query_ids (Q,), points (Q, F, 3))``."""
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(header) != TRACK3D_COLUMNS:
            raise ValidationError(f"{path}: header must be the columns {', '.join(TRACK3D_COLUMNS)}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                rows.setdefault(int(rec[0]), {})[int(rec[1])] = [float(v) for v in rec[2:5]]
            except (ValueError, IndexError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    ids = np.array(sorted(rows), dtype=np.int64)
    F = max((max(r) + 1 for r in rows.values()), default=0)
    pts = np.full((len(ids), F, 3), np.nan)
    for i, q in enumerate(ids):
        for t, p in rows[q].items():
            pts[i, t] = p
    return ids, pts


def write_ply(path, cloud: GaussianCloud):
    """Binary little-endian PLY; scales as logs and opacity as a logit."""
    n = len(cloud)
    dtype = [(f, "<f4") for f in PLY_FIELDS] + [("dynamic", "u1")]
    rec = np.empty(n, dtype=dtype)
    cols = np.concatenate([cloud.means, cloud.quats, cloud.log_scales, cloud.opacity_logits[:, None],
                           cloud.colors], axis=1)
    for i, f in enumerate(PLY_FIELDS):
        rec[f] = cols[:, i]
    rec["dynamic"] = cloud.dynamic.astype(np.uint8)
    header = ["ply", "format binary_little_endian 1.0",
              "comment s0..s2 are log scales, opacity is a logit, r g b in [0, 1]",
              f"element vertex {n}"]
    header += [f"property float {f}" for f in PLY_FIELDS] + ["property uchar dynamic", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path) -> GaussianCloud:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ValidationError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValidationError(f"{path}: only binary little-endian PLY is supported")
    n = None
    props = []
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            props.append((parts[2], {"float": "<f4", "uchar": "u1", "double": "<f8"}[parts[1]]))
    names = [p[0] for p in props]
    if n is None or names != list(PLY_FIELDS) + ["dynamic"]:
        raise ValidationError(f"{path}: unexpected vertex layout {names}")
    rec = np.frombuffer(data, dtype=props, count=n, offset=end + len(b"end_header\n"))
    cols = np.stack([rec[f].astype(float) for f in PLY_FIELDS], axis=1)
    return GaussianCloud(cols[:, 0:3], cols[:, 3:7], cols[:, 7:10], cols[:, 10], cols[:, 11:14],
                         rec["dynamic"].astype(bool))


def write_motion(directory, model: MotionModel):
    """``motion.json`` header plus raw float32 ``bases.f32`` and ``coeffs.f32``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    model.bases.astype("<f4").tofile(d / "bases.f32")
    model.coeffs.astype("<f4").tofile(d / "coeffs.f32")
    header = {
        "n_bases": model.B,
        "n_fixed": 6,
        "n_frames": model.F,
        "n_dynamic": int(model.coeffs.shape[0]),
        "canonical_frame": int(model.canonical_frame),
        "twist_order": "omega, v",
        "bases": {"file": "bases.f32", "shape": [model.B, 6], "dtype": "float32", "byte_order": "little"},
        "coeffs": {"file": "coeffs.f32", "shape": list(model.coeffs.shape), "dtype": "float32",
                   "byte_order": "little"},
    }
    (d / "motion.json").write_text(json.dumps(header, indent=2))


def read_motion(directory) -> MotionModel:
    d = Path(directory)
    try:
        h = json.loads((d / "motion.json").read_text())
        bases = np.fromfile(d / h["bases"]["file"], dtype="<f4").reshape(h["bases"]["shape"])
        coeffs = np.fromfile(d / h["coeffs"]["file"], dtype="<f4").reshape(h["coeffs"]["shape"])
    except (OSError, KeyError, ValueError) as exc:
        raise ValidationError(f"{d}: cannot read motion model: {exc}") from exc
    return MotionModel(bases[6:].astype(float), coeffs.astype(float), int(h["canonical_frame"]))


def save_scene(directory, cloud: GaussianCloud, model: MotionModel):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ply(d / "cloud.ply", cloud)
    write_motion(d, model)


def load_scene(directory):
    d = Path(directory)
    if not (d / "cloud.ply").exists():
        raise ValidationError(f"{d} does not contain a fitted scene (cloud.ply missing)")
    cloud = read_ply(d / "cloud.ply")
    model = read_motion(d)
    if model.coeffs.shape[0] != cloud.n_dynamic:
        raise ValidationError(f"{d}: motion has {model.coeffs.shape[0]} rows for {cloud.n_dynamic} dynamic Gaussians")
    return cloud, model


def write_renders(directory, targets):
    """8-bit PNG + float32 ``.npy`` per RGB frame; 16-bit PNG + float32 ``.npy`` per depth map."""
    d = Path(directory)
    (d / "rgb").mkdir(parents=True, exist_ok=True)
    (d / "depth").mkdir(parents=True, exist_ok=True)
    depths = [t.normalized_depth() for t in targets]
    scale = max(max((float(x.max()) for x in depths), default=0.0), 1e-6) / 65535.0
    for i, (t, dep) in enumerate(zip(targets, depths)):
        rgb = np.clip(t.rgb, 0.0, 1.0)
        Image.fromarray(np.round(rgb * 255).astype(np.uint8)).save(d / "rgb" / f"{i:05d}.png")
        np.save(d / "rgb" / f"{i:05d}.npy", t.rgb.astype(np.float32))
        Image.fromarray(np.round(dep / scale).astype(np.uint16)).save(d / "depth" / f"{i:05d}.png")
        np.save(d / "depth" / f"{i:05d}.npy", dep.astype(np.float32))
    (d / "depth" / "depth_scale.json").write_text(json.dumps({"format": "png16", "scale": scale}))
    return len(targets)
