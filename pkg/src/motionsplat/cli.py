"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 invalid input, 4 optimisation
diverged, 1 any other library error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DivergenceError, MotionSplatError, ValidationError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_DIVERGED = 4

log = logging.getLogger("motionsplat")


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_inputs(paths):
    """sha256 of every file under each path, keyed by a stable relative name."""
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        if p.is_file():
            out[p.name] = sha256_file(p)
        elif p.is_dir():
            for f in sorted(q for q in p.rglob("*") if q.is_file()):
                out[f"{p.name}/{f.relative_to(p).as_posix()}"] = sha256_file(f)
    return out


def write_manifest(out_dir, command, args, inputs, config=None):
    """RunManifest: written before any work so a crashed run still records its inputs.

    ``finish_manifest`` later adds wall-clock timings.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": "motionsplat",
        "version": __version__,
        "command": command,
        "seed": args.seed,
        "workers": args.workers,
        "arguments": {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
                      if k not in ("func",)},
        "inputs": [str(p) for p in inputs if p is not None],
        "inputs_sha256": hash_inputs(inputs),
        "config": config,
        "timings_s": {},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return manifest


def finish_manifest(out_dir, manifest, timings):
    manifest["timings_s"] = {k: round(v, 3) for k, v in timings.items()}
    (Path(out_dir) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def write_csv(path, rows, columns=None):
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_trajectory(args):
    from .camera import default_intrinsics, make_trajectory, write_plucker, write_trajectory

    K = default_intrinsics(args.width, args.height, args.fov)
    params = {"radius": args.radius, "elevation": args.elevation}
    if args.arc_degrees is not None:
        params["arc_degrees"] = args.arc_degrees
    traj = make_trajectory(args.kind, args.frames, K, args.frame_rate, **params)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trajectory(out, traj)
    print(f"wrote {out} ({len(traj)} poses)")
    if args.export_plucker:
        files = write_plucker(args.export_plucker, traj)
        print(f"wrote {len(files)} Plucker maps to {args.export_plucker}")
    return EXIT_OK


def cmd_synth(args):
    from .dataio import save_dataset, synth_scene
    from .dataio.export import save_scene, write_tracks_3d

    scene = synth_scene(n_gaussians=args.gaussians, n_frames=args.frames, width=args.width, height=args.height,
                        motion=args.motion, velocity=tuple(args.velocity), image_noise=args.noise,
                        depth_noise=args.depth_noise,
                        track_noise=args.track_noise, n_queries=args.queries, seed=args.seed)
    out = Path(args.out)
    save_dataset(scene.dataset, out, depth_format=args.depth_format)
    save_scene(out / "ground_truth", scene.cloud, scene.model)
    write_tracks_3d(out / "ground_truth" / "tracks_3d.tsv", scene.dataset.tracks.query_ids, scene.query_points)
    print(f"wrote synthetic scene to {out}")
    return EXIT_OK


def _load_config(args):
    from .optimizer import FitConfig, load_config

    cfg = load_config(args.config) if args.config else FitConfig()
    cfg.seed = args.seed
    s = cfg.schedule
    for flag, name in (("init_iters", "init_iters"), ("epochs", "joint_epochs"), ("gaussians", "init_gaussians"),
                       ("lr", "lr"), ("bases", "basis_count")):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(s, name, v)
    s.__post_init__()
    return cfg


def cmd_fit(args):
    from .dataio import load_dataset
    from .dataio.export import save_scene
    from .optimizer import evaluate_heldout
    from .optimizer.fit import Trainer
    from .plotting import plot_loss_curve

    cfg = _load_config(args)
    out = Path(args.out)
    manifest = write_manifest(out, "fit", args, [args.data, args.config], cfg.to_dict())
    clock = time.perf_counter()
    timings = {}
    ds = load_dataset(args.data)
    timings["load"] = time.perf_counter() - clock

    def progress(row):
        if args.verbose or row["phase"] == "joint":
            log.info("%s step %s loss %.6g", row["phase"], row["step"], row["total"])

    trainer = Trainer(ds, cfg, out_dir=out, progress=progress)
    t = time.perf_counter()
    trainer.phase_motion()
    timings["phase_motion"] = time.perf_counter() - t
    t = time.perf_counter()
    trainer.phase_joint()
    timings["phase_joint"] = time.perf_counter() - t
    save_scene(out / "scene", trainer.cloud, trainer.model)
    (out / "scene" / "scene.json").write_text(json.dumps({"background": list(map(float, ds.background))}))
    write_csv(out / "metrics.csv", trainer.log)
    plot_loss_curve(trainer.log, out / "loss_curve.png")
    timings["total"] = time.perf_counter() - clock
    finish_manifest(out, manifest, timings)
    if ds.heldout:
        p, s = evaluate_heldout(trainer.cloud, trainer.model, ds, with_ssim=True)
        print(f"held-out PSNR {p:.3f} dB, SSIM {s:.4f}")
    print(f"wrote {out / 'scene'}, {out / 'metrics.csv'}, {out / 'loss_curve.png'}")
    return EXIT_OK


OFFSETS = {"left": (-1.0, 0.0), "top": (0.0, -1.0), "right": (1.0, 0.0), "bottom": (0.0, 1.0)}


def _offset_pose(E, dx, dy):
    """Shift the camera centre along its own right/down axes, keeping its rotation."""
    from .camera import Extrinsics

    return Extrinsics.from_center(E.R, E.center + dx * E.R[0] + dy * E.R[1])


def cmd_render(args):
    from .camera import read_trajectory
    from .dataio.export import load_scene, write_renders
    from .gaussians import pose_at_time
    from .rasterizer import render

    args.scene = _scene_dir(args.scene)
    cloud, model = load_scene(args.scene)
    traj = read_trajectory(args.camera)
    out = Path(args.out)
    write_manifest(out, "render", args, [args.scene, args.camera])
    if args.time is not None and not 0 <= args.time < model.F:
        raise ValidationError(f"frame id {args.time} outside 0..{model.F - 1}")
    bg = args.background
    if bg is None:
        sj = Path(args.scene) / "scene.json"
        bg = json.loads(sj.read_text()).get("background", (0.0, 0.0, 0.0)) if sj.exists() else (0.0, 0.0, 0.0)
    bg = tuple(map(float, bg))
    sequences = {"": (0.0, 0.0)}
    if args.offset_views:
        sequences = {name: (args.offset_views * dx, args.offset_views * dy) for name, (dx, dy) in OFFSETS.items()}
    for name, (dx, dy) in sequences.items():
        targets = []
        for i, E in enumerate(traj.poses):
            t = min(i, model.F - 1) if args.time is None else args.time
            targets.append(render(pose_at_time(cloud, model, t), traj.intrinsics, _offset_pose(E, dx, dy), bg))
        n = write_renders(out / name if name else out, targets)
        print(f"wrote {n} frames to {out / name if name else out}")
    return EXIT_OK


def _parse_queries(text):
    pts = []
    for item in text:
        try:
            u, v = (float(x) for x in item.split(","))
        except ValueError as exc:
            raise ValidationError(f"query {item!r} must be 'u,v'") from exc
        pts.append((u, v))
    return np.asarray(pts, dtype=float).reshape(-1, 2)


def cmd_track(args):
    from .dataio import load_dataset
    from .dataio.export import load_scene, write_tracks_3d
    from .gaussians import pose_at_time, track_gaussians
    from .optimizer.fit import query_trajectories
    from .optimizer.init import backproject, lift_tracks
    from .optimizer.losses import build_track_anchors
    from .plotting import plot_tracks_3d
    from .rasterizer import render

    args.scene = _scene_dir(args.scene)
    cloud, model = load_scene(args.scene)
    out = Path(args.out)
    write_manifest(out, "track", args, [args.scene, args.data])
    t0 = model.canonical_frame
    if args.gaussians:
        try:
            idx = np.array([int(x) for x in args.gaussians.split(",")], dtype=np.int64)
        except ValueError as exc:
            raise ValidationError(f"--gaussians must be comma-separated integers: {exc}") from exc
        if np.any((idx < 0) | (idx >= len(cloud))):
            raise ValidationError(f"Gaussian indices must lie in 0..{len(cloud) - 1}")
        ids, pts = idx, track_gaussians(idx, model, cloud)
    else:
        if not args.data:
            raise ValidationError("track needs --data (camera and 2D queries) or --gaussians")
        ds = load_dataset(args.data)
        K, E = ds.intrinsics, ds.trajectory.poses[t0]
        if args.query:
            q = _parse_queries(args.query)
            bad = (q[:, 0] < 0) | (q[:, 0] > K.width - 1) | (q[:, 1] < 0) | (q[:, 1] > K.height - 1)
            if np.any(bad):
                u, v = q[np.argmax(bad)]
                raise ValidationError(f"query pixel ({u}, {v}) outside the {K.width}x{K.height} image")
            # Lift through the fitted scene's own depth at the canonical frame.
            target = render(pose_at_time(cloud, model, t0), K, E, ds.background)
            ui, vi = np.round(q[:, 0]).astype(int), np.round(q[:, 1]).astype(int)
            if np.any(target.alpha[vi, ui] <= 0.5):
                k = int(np.argmax(target.alpha[vi, ui] <= 0.5))
                raise ValidationError(f"query pixel ({q[k, 0]}, {q[k, 1]}) does not hit the fitted scene")
            depth = target.normalized_depth()[vi, ui]
            canon = backproject(q[:, 0], q[:, 1], depth, K, E)
            query_ids = np.arange(len(q))
        else:
            lifted, valid = lift_tracks(ds)
            use = np.flatnonzero(valid[:, t0])
            canon, query_ids = lifted[use, t0], ds.tracks.query_ids[use]
        anchors = build_track_anchors(cloud, canon, query_ids, dynamic_only=False)
        ids, pts = anchors.query_ids, query_trajectories(cloud, model, anchors)
    write_tracks_3d(out / "tracks_3d.tsv", ids, pts)
    plot_tracks_3d(pts, out / "tracks_3d.png")
    print(f"wrote {len(ids)} trajectories to {out / 'tracks_3d.tsv'}")
    return EXIT_OK


def _scene_dir(path):
    """Accept either a fit output directory or its scene/ folder."""
    p = Path(path)
    return p / "scene" if (p / "scene" / "cloud.ply").exists() else p


def _image_files(d):
    d = Path(d)
    if not d.is_dir():
        raise ValidationError(f"{d} is not a directory")
    if (d / "rgb").is_dir():
        d = d / "rgb"
    # float arrays win over 8-bit PNGs when both exist
    npy = sorted(d.glob("*.npy"))
    return npy if npy else sorted(d.glob("*.png"))


def _read_image(path):
    from PIL import Image

    if path.suffix == ".npy":
        a = np.load(path).astype(float)
        if a.ndim != 3 or a.shape[2] != 3:
            raise ValidationError(f"{path}: expected an H x W x 3 array, got shape {a.shape}")
        return a
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), float) / 255.0


def _print_table(rows, columns):
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([f"{r[c]:.4f}" if isinstance(r[c], float) else r[c] for c in columns])


def cmd_eval(args):
    from .optimizer.metrics import psnr, ssim
    from .plotting import plot_eval

    out = Path(args.out)
    rows = []
    if args.renders:
        if not args.reference:
            raise ValidationError("--renders needs --reference")
        write_manifest(out, "eval", args, [args.renders, args.reference])
        a, b = _image_files(args.renders), _image_files(args.reference)
        if len(a) != len(b):
            raise ValidationError(f"{len(a)} rendered images but {len(b)} reference images")
        if not a:
            raise ValidationError(f"no images in {args.renders}")
        for pa, pb in zip(a, b):
            x, y = _read_image(pa), _read_image(pb)
            if x.shape != y.shape:
                raise ValidationError(f"{pa.name} is {x.shape[1]}x{x.shape[0]}, {pb.name} is {y.shape[1]}x{y.shape[0]}")
            rows.append({"split": "render", "frame": pa.stem, "psnr": psnr(x, y), "ssim": ssim(x, y)})
    else:
        if not (args.scene and args.data):
            raise ValidationError("eval needs --renders/--reference or --scene/--data")
        from .dataio import load_dataset
        from .dataio.export import load_scene
        from .gaussians import pose_at_time
        from .rasterizer import render

        args.scene = _scene_dir(args.scene)
        cloud, model = load_scene(args.scene)
        ds = load_dataset(args.data)
        write_manifest(out, "eval", args, [args.scene, args.data])
        if model.F != ds.n_frames:
            raise ValidationError(f"scene has {model.F} frames, dataset has {ds.n_frames}")
        views = [("train", t, E, ds.frames[t]) for t, E in enumerate(ds.trajectory.poses)]
        views += [("heldout", v.frame, v.extrinsics, v.image) for v in ds.heldout]
        for kind, t, E, img in views:
            rgb = render(pose_at_time(cloud, model, t), ds.intrinsics, E, ds.background).rgb
            rows.append({"split": kind, "frame": t, "psnr": psnr(rgb, img), "ssim": ssim(rgb, img)})
    write_csv(out / "eval.csv", rows)
    summary = []
    for kind in dict.fromkeys(r["split"] for r in rows):
        sel = [r for r in rows if r["split"] == kind]
        summary.append({"split": kind, "views": len(sel), "psnr": float(np.mean([r["psnr"] for r in sel])),
                        "ssim": float(np.mean([r["ssim"] for r in sel]))})
    write_csv(out / "eval_summary.csv", summary)
    plot_eval([f"{r['split']}:{r['frame']}" for r in rows], [r["psnr"] for r in rows], out / "eval.png")
    print("# LPIPS not computed (needs a pretrained network)")
    _print_table(summary, ["split", "views", "psnr", "ssim"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--workers", type=int, default=None, help="renderer threads (1 = bitwise reproducible)")
    common.add_argument("--config", type=Path, default=None, help="YAML file with 'loss' and 'schedule' sections")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="motionsplat", description="Dynamic Gaussian splatting with hybrid motion bases.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("trajectory", parents=[common], help="author a camera path (camera.json)")
    t.add_argument("kind", choices=("orbit", "arc", "dolly", "static"))
    t.add_argument("--frames", type=int, default=16)
    t.add_argument("--width", type=int, default=128)
    t.add_argument("--height", type=int, default=96)
    t.add_argument("--fov", type=float, default=60.0, help="horizontal field of view in degrees")
    t.add_argument("--radius", type=float, default=2.0)
    t.add_argument("--elevation", type=float, default=0.0)
    t.add_argument("--arc-degrees", type=float, default=None)
    t.add_argument("--frame-rate", type=float, default=30.0)
    t.add_argument("--export-plucker", type=Path, default=None, metavar="DIR",
                   help="also write per-frame 6xHxW float32 Plucker maps + header.json to DIR")
    t.add_argument("--out", type=Path, required=True)
    t.set_defaults(func=cmd_trajectory)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset with ground truth")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--motion", choices=("two-cluster", "rigid-translate", "rotate", "static"), default="two-cluster")
    s.add_argument("--velocity", type=float, nargs=3, default=(0.03, 0.0, 0.0), help="per-frame translation")
    s.add_argument("--gaussians", type=int, default=200)
    s.add_argument("--frames", type=int, default=16)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--height", type=int, default=96)
    s.add_argument("--noise", type=float, default=0.0, help="RGB noise std")
    s.add_argument("--depth-noise", type=float, default=0.0, help="relative depth noise std")
    s.add_argument("--track-noise", type=float, default=0.0, help="2D track noise std in pixels")
    s.add_argument("--queries", type=int, default=64)
    s.add_argument("--depth-format", choices=("png16", "raw"), default="png16")
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit", parents=[common], help="fit a dynamic scene to a dataset")
    f.add_argument("--data", type=Path, required=True)
    f.add_argument("--out", type=Path, required=True)
    f.add_argument("--init-iters", type=int, default=None)
    f.add_argument("--epochs", type=int, default=None)
    f.add_argument("--gaussians", type=int, default=None, help="initial Gaussian count")
    f.add_argument("--lr", type=float, default=None)
    f.add_argument("--bases", type=int, default=None, help="total motion bases (>= 6)")
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("render", parents=[common], help="render a fitted scene along a camera path")
    r.add_argument("--scene", type=Path, required=True, help="output directory of 'fit' (or its scene/ folder)")
    r.add_argument("--camera", type=Path, required=True, help="camera.json with the poses to render")
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--time", type=int, default=None,
                   help="freeze the scene at this frame id (default: pose i shows frame i)")
    r.add_argument("--offset-views", type=float, default=None, metavar="DIST",
                   help="render four sequences with the camera shifted left/top/right/bottom by DIST")
    r.add_argument("--background", type=float, nargs=3, default=None,
                   help="RGB background (default: the one the scene was fitted with)")
    r.set_defaults(func=cmd_render)

    k = sub.add_parser("track", parents=[common], help="export 3D trajectories of query points")
    k.add_argument("--scene", type=Path, required=True)
    k.add_argument("--data", type=Path, default=None, help="dataset supplying the camera and 2D query tracks")
    k.add_argument("--query", action="append", default=None, metavar="U,V",
                   help="query pixel at the canonical frame (repeatable); default: the dataset's tracks")
    k.add_argument("--gaussians", type=str, default=None, help="comma-separated Gaussian indices instead")
    k.add_argument("--out", type=Path, required=True)
    k.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", parents=[common], help="PSNR / SSIM tables as CSV")
    e.add_argument("--renders", type=Path, default=None, help="directory of rendered images (.npy preferred, else .png)")
    e.add_argument("--reference", type=Path, default=None, help="directory of reference images")
    e.add_argument("--scene", type=Path, default=None, help="fitted scene (alternative to --renders)")
    e.add_argument("--data", type=Path, default=None, help="dataset for --scene: training + held-out views")
    e.add_argument("--out", type=Path, required=True)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        from .rasterizer import set_workers

        set_workers(args.workers)
        return args.func(args)
    except DivergenceError as exc:
        where = f" (state saved to {exc.state_path})" if exc.state_path else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except MotionSplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
