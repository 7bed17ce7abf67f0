import csv
import json

import numpy as np
import pytest

from motionsplat.camera import read_plucker, read_trajectory, write_trajectory
from motionsplat.cli import main
from motionsplat.dataio import load_dataset
from motionsplat.dataio.export import read_tracks_3d
from motionsplat.optimizer import psnr

FIT_FLAGS = ["--init-iters", "30", "--epochs", "3", "--gaussians", "300", "--lr", "1e-3", "--workers", "1"]


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", root / "data", "--gaussians", 60, "--frames", 4, "--width", 48, "--height", 36,
               "--queries", 12, "--seed", 2) == 0
    assert run("fit", "--data", root / "data", "--out", root / "fit", "--seed", 7, *FIT_FLAGS) == 0
    return root


# -- trajectory ----------------------------------------------------------------

def test_trajectory_orbit_80_frames(tmp_path):
    assert run("trajectory", "orbit", "--frames", 80, "--radius", 2, "--out", tmp_path / "camera.json") == 0
    traj = read_trajectory(tmp_path / "camera.json")
    assert len(traj) == 80
    assert np.allclose([np.linalg.norm(E.center) for E in traj.poses], 2.0)


def test_trajectory_plucker_export(tmp_path):
    # 80 frames as in the reference clip, at 1/10 of its 960x720 size
    assert run("trajectory", "orbit", "--frames", 80, "--width", 96, "--height", 72, "--out", tmp_path / "c.json",
               "--export-plucker", tmp_path / "pl") == 0
    arrays = sorted(f for f in (tmp_path / "pl").iterdir() if f.suffix != ".json")
    assert len(arrays) == 80
    assert all(f.stat().st_size == 6 * 72 * 96 * 4 for f in arrays)
    maps = read_plucker(tmp_path / "pl")
    assert maps.shape == (80, 6, 72, 96) and maps.dtype == np.float32
    assert np.allclose(np.linalg.norm(maps[:, 3:], axis=1), 1, atol=1e-6)


def test_invalid_kind_is_usage_error(tmp_path, capsys):
    assert run("trajectory", "spiral", "--out", tmp_path / "c.json") == 2
    assert "invalid choice" in capsys.readouterr().err
    assert not (tmp_path / "c.json").exists()


def test_bad_workers_is_usage_error(tmp_path):
    assert run("trajectory", "orbit", "--workers", 0, "--out", tmp_path / "c.json") == 2


# -- fit -------------------------------------------------------------------------

def test_fit_outputs(fitted, capsys):
    out = fitted / "fit"
    for name in ("manifest.json", "metrics.csv", "loss_curve.png", "scene/cloud.ply", "scene/motion.json"):
        assert (out / name).exists(), name
    rows = read_csv(out / "metrics.csv")
    assert rows[-1]["phase"] == "joint" and float(rows[-1]["train_psnr"]) > 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["config"]["schedule"]["init_iters"] == 30
    assert "data/camera.json" in manifest["inputs_sha256"]
    assert set(manifest["timings_s"]) >= {"phase_motion", "phase_joint", "total"}


def test_fit_missing_camera_names_file(tmp_path, fitted, capsys):
    data = tmp_path / "data"
    data.mkdir()
    for sub in ("frames", "depths"):
        (data / sub).symlink_to(fitted / "data" / sub)
    code = run("fit", "--data", data, "--out", tmp_path / "fit", *FIT_FLAGS)
    assert code == 3
    assert "camera.json" in capsys.readouterr().err
    # the manifest is written before any work
    assert (tmp_path / "fit" / "manifest.json").exists()


def test_fit_bad_config_is_validation_error(tmp_path, fitted, capsys):
    (tmp_path / "c.yaml").write_text("schedule:\n  lr: -1\n")
    code = run("fit", "--data", fitted / "data", "--out", tmp_path / "fit", "--config", tmp_path / "c.yaml")
    assert code == 3 and "learning rate" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fit_divergence_exit_code(tmp_path, fitted, capsys):
    (tmp_path / "c.yaml").write_text("schedule:\n  lr: 1.0e+6\n  lr_scale: {means: 1.0e+6}\n")
    code = run("fit", "--data", fitted / "data", "--out", tmp_path / "fit", "--config", tmp_path / "c.yaml",
               *FIT_FLAGS[:6])
    assert code == 4
    assert "diverged" in capsys.readouterr().err


# -- render ----------------------------------------------------------------------

def test_render_training_poses_match_log(tmp_path, fitted):
    assert run("render", "--scene", fitted / "fit" / "scene", "--camera", fitted / "data" / "camera.json",
               "--out", tmp_path, "--workers", 1) == 0
    ds = load_dataset(fitted / "data")
    scores = [psnr(np.load(tmp_path / "rgb" / f"{t:05d}.npy").astype(float), ds.frames[t])
              for t in range(ds.n_frames)]
    logged = float(read_csv(fitted / "fit" / "metrics.csv")[-1]["train_psnr"])
    assert np.mean(scores) >= logged - 0.1
    assert len(list((tmp_path / "rgb").glob("*.png"))) == ds.n_frames
    assert len(list((tmp_path / "depth").glob("*.png"))) == ds.n_frames


def test_render_offset_views(tmp_path, fitted):
    assert run("render", "--scene", fitted / "fit" / "scene", "--camera", fitted / "data" / "camera.json",
               "--out", tmp_path, "--offset-views", 0.2, "--time", 1) == 0
    for side in ("left", "top", "right", "bottom"):
        assert len(list((tmp_path / side / "rgb").glob("*.png"))) == 4
    left = np.load(tmp_path / "left" / "rgb" / "00000.npy")
    right = np.load(tmp_path / "right" / "rgb" / "00000.npy")
    assert not np.array_equal(left, right)


def test_render_accepts_fit_output_dir(tmp_path, fitted):
    for name, scene in (("a", fitted / "fit"), ("b", fitted / "fit" / "scene")):
        assert run("render", "--scene", scene, "--camera", fitted / "data" / "camera.json",
                   "--out", tmp_path / name, "--workers", 1) == 0
    assert np.array_equal(np.load(tmp_path / "a" / "rgb" / "00002.npy"), np.load(tmp_path / "b" / "rgb" / "00002.npy"))


def test_render_unknown_frame(tmp_path, fitted, capsys):
    code = run("render", "--scene", fitted / "fit" / "scene", "--camera", fitted / "data" / "camera.json",
               "--out", tmp_path, "--time", 99)
    assert code == 3 and "frame id 99" in capsys.readouterr().err


# -- track -----------------------------------------------------------------------

def test_track_out_of_bounds_query(tmp_path, fitted, capsys):
    code = run("track", "--scene", fitted / "fit" / "scene", "--data", fitted / "data", "--out", tmp_path,
               "--query", "60,5")
    assert code == 3 and "outside the 48x36 image" in capsys.readouterr().err


def test_track_dataset_queries(tmp_path, fitted):
    assert run("track", "--scene", fitted / "fit" / "scene", "--data", fitted / "data", "--out", tmp_path) == 0
    ids, pts = read_tracks_3d(tmp_path / "tracks_3d.tsv")
    assert pts.shape == (len(ids), 4, 3) and np.all(np.isfinite(pts))
    assert (tmp_path / "tracks_3d.png").exists()


def test_track_static_masked_query_is_constant(tmp_path):
    data = tmp_path / "data"
    assert run("synth", "--out", data, "--motion", "rigid-translate", "--velocity", 0.05, 0, 0, "--gaussians", 60,
               "--frames", 4, "--width", 48, "--height", 36, "--queries", 8, "--seed", 3) == 0
    (data / "masks").mkdir()
    from PIL import Image
    for t in range(4):
        Image.fromarray(np.zeros((36, 48), np.uint8)).save(data / "masks" / f"{t:05d}.png")
    assert run("fit", "--data", data, "--out", tmp_path / "fit", "--seed", 1, *FIT_FLAGS) == 0
    assert run("track", "--scene", tmp_path / "fit" / "scene", "--data", data, "--out", tmp_path / "tr",
               "--query", "24,18") == 0
    _, pts = read_tracks_3d(tmp_path / "tr" / "tracks_3d.tsv")
    assert np.array_equal(pts[0], np.repeat(pts[0, :1], 4, axis=0))


@pytest.mark.slow
def test_track_recovers_rigid_translation(tmp_path):
    v = 0.05
    data = tmp_path / "data"
    assert run("synth", "--out", data, "--motion", "rigid-translate", "--velocity", v, 0, 0, "--gaussians", 120,
               "--frames", 6, "--width", 64, "--height", 48, "--seed", 1) == 0
    assert run("fit", "--data", data, "--out", tmp_path / "fit", "--seed", 1, "--init-iters", 300, "--epochs", 20,
               "--gaussians", 800, "--lr", "1e-3", "--workers", 1) == 0
    assert run("track", "--scene", tmp_path / "fit" / "scene", "--data", data, "--out", tmp_path / "tr") == 0
    _, pts = read_tracks_3d(tmp_path / "tr" / "tracks_3d.tsv")
    slopes = np.polyfit(np.arange(6), pts[:, :, 0].T, 1)[0]
    assert abs(slopes.mean() - v) <= 0.05 * v, slopes.mean()


# -- eval ------------------------------------------------------------------------

def write_arrays(d, images):
    d.mkdir(parents=True)
    for i, a in enumerate(images):
        np.save(d / f"{i:05d}.npy", np.asarray(a, np.float32))


def test_eval_identical(tmp_path, capsys):
    rng = np.random.default_rng(0)
    imgs = rng.uniform(size=(2, 16, 16, 3))
    write_arrays(tmp_path / "a", imgs)
    write_arrays(tmp_path / "b", imgs)
    assert run("eval", "--renders", tmp_path / "a", "--reference", tmp_path / "b", "--out", tmp_path / "e") == 0
    rows = read_csv(tmp_path / "e" / "eval.csv")
    assert all(float(r["psnr"]) == 100.0 and abs(float(r["ssim"]) - 1) < 1e-12 for r in rows)
    assert "LPIPS" in capsys.readouterr().out
    assert (tmp_path / "e" / "eval.png").exists()


def test_eval_uniform_shift(tmp_path):
    write_arrays(tmp_path / "a", [np.full((16, 16, 3), 0.25)])
    write_arrays(tmp_path / "b", [np.full((16, 16, 3), 0.375)])
    assert run("eval", "--renders", tmp_path / "a", "--reference", tmp_path / "b", "--out", tmp_path / "e") == 0
    # a 0.125 shift is exact in float32; 0.1 is not
    assert abs(float(read_csv(tmp_path / "e" / "eval.csv")[0]["psnr"]) - 20 * np.log10(8)) < 1e-6


def test_eval_shift_by_tenth(tmp_path):
    write_arrays(tmp_path / "a", [np.full((16, 16, 3), 0.3)])
    write_arrays(tmp_path / "b", [np.full((16, 16, 3), 0.4)])
    assert run("eval", "--renders", tmp_path / "a", "--reference", tmp_path / "b", "--out", tmp_path / "e") == 0
    assert abs(float(read_csv(tmp_path / "e" / "eval.csv")[0]["psnr"]) - 20.0) < 1e-5


def test_eval_mismatched_counts(tmp_path, capsys):
    write_arrays(tmp_path / "a", [np.zeros((4, 4, 3))] * 2)
    write_arrays(tmp_path / "b", [np.zeros((4, 4, 3))] * 3)
    code = run("eval", "--renders", tmp_path / "a", "--reference", tmp_path / "b", "--out", tmp_path / "e")
    assert code == 3 and "2 rendered images but 3 reference images" in capsys.readouterr().err


def test_eval_scene_against_dataset(tmp_path, fitted):
    assert run("eval", "--scene", fitted / "fit" / "scene", "--data", fitted / "data", "--out", tmp_path) == 0
    summary = read_csv(tmp_path / "eval_summary.csv")
    assert [r["split"] for r in summary] == ["train", "heldout"]


def test_synth_writes_ground_truth(tmp_path):
    assert run("synth", "--out", tmp_path, "--gaussians", 20, "--frames", 3, "--width", 24, "--height", 16,
               "--depth-format", "raw") == 0
    assert (tmp_path / "ground_truth" / "cloud.ply").exists()
    assert json.loads((tmp_path / "depths" / "depth_scale.json").read_text())["format"] == "raw"
    assert load_dataset(tmp_path).n_frames == 3


def test_trajectory_file_round_trips_through_fit_inputs(tmp_path, fitted):
    traj = read_trajectory(fitted / "data" / "camera.json")
    write_trajectory(tmp_path / "c.json", traj)
    assert read_trajectory(tmp_path / "c.json").poses[0].t.tolist() == traj.poses[0].t.tolist()
