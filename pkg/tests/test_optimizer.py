import hashlib
import logging

import numpy as np
import pytest
import yaml

from motionsplat.camera import CameraTrajectory, Extrinsics, Intrinsics
from motionsplat.dataio import SceneDataset, TrackSet, synth_scene
from motionsplat.errors import DivergenceError, ValidationError
from motionsplat.gaussians import GaussianCloud, logit, pose_at_time, static_pose
from motionsplat.optimizer import (Adam, FitConfig, LossConfig, TrainSchedule, Trainer, config_from_dict,
                                   load_config, psnr, save_config, ssim)
from motionsplat.optimizer.init import cluster_weights, init_cloud, init_motion
from motionsplat.optimizer.losses import (build_track_anchors, coefficient_loss, depth_loss, l1_loss,
                                          smoothness_loss, ssim_loss, track_loss)
from motionsplat.rasterizer import render, render_backward
from oracles import central_difference, ssim_loops


def plane_dataset(n_frames=1, width=24, height=16, depth=2.0, tracks=None, masks=None):
    K = Intrinsics(20.0, 20.0, (width - 1) / 2, (height - 1) / 2, width, height)
    traj = CameraTrajectory(K, [Extrinsics.identity()] * n_frames)
    frames = np.full((n_frames, height, width, 3), 0.5)
    depths = np.full((n_frames, height, width), depth)
    return SceneDataset(frames, depths, tracks or TrackSet.empty(n_frames), traj, masks)


# -- config ------------------------------------------------------------------

def test_defaults():
    L, S = LossConfig(), TrainSchedule()
    assert (L.w_rgb, L.w_ssim, L.w_depth, L.w_track, L.w_coeff, L.lambda_fixed, L.w_smooth) == (
        1.0, 0.2, 0.5, 2.0, 0.1, 0.8, 0.1)
    assert (S.init_iters, S.joint_epochs, S.lr, S.adam_betas, S.downsample_factor, S.basis_count,
            S.init_gaussians) == (1000, 600, 1e-4, (0.9, 0.999), 0.5, 15, 50000)


def test_config_validation():
    with pytest.raises(ValidationError):
        LossConfig(lambda_fixed=1.5)
    with pytest.raises(ValidationError):
        LossConfig(w_rgb=-1)
    with pytest.raises(ValidationError):
        TrainSchedule(lr=0)
    with pytest.raises(ValidationError):
        config_from_dict({"schedule": {"epochs": 3}})


def test_config_yaml_round_trip(tmp_path):
    cfg = FitConfig(LossConfig(w_coeff=0.0), TrainSchedule(joint_epochs=7, lr_scale={"colors": 3.0}), seed=9)
    save_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back.to_dict() == cfg.to_dict()
    assert yaml.safe_load((tmp_path / "c.yaml").read_text())["seed"] == 9


# -- metrics -----------------------------------------------------------------

def test_psnr_examples():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == 100.0
    assert np.isclose(psnr(a, a + 0.1), 20.0)
    with pytest.raises(ValueError):
        psnr(a, np.zeros((4, 4)))


def test_ssim_identical_and_loops():
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(20, 24))
    assert np.isclose(ssim(a, a), 1.0)
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    assert abs(ssim(a, b) - ssim_loops(a, b)) < 1e-6
    rgb_a, rgb_b = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
    ref = np.mean([ssim_loops(rgb_a[..., c], rgb_b[..., c]) for c in range(3)])
    assert abs(ssim(rgb_a, rgb_b) - ref) < 1e-6


def test_ssim_gradient():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(13, 14, 3)), rng.uniform(size=(13, 14, 3))
    _, g = ssim(a, b, return_grad=True)
    fd = central_difference(lambda x: ssim(x, b), a, 1e-5)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6


# -- losses ------------------------------------------------------------------

def coeff_loss_loops(c, lam):
    total = 0.0
    for i in range(c.shape[0]):
        for t in range(c.shape[1]):
            total += lam * sum(c[i, t, b] ** 2 for b in range(6))
            total += (1 - lam) * sum(c[i, t, b] ** 2 for b in range(6, c.shape[2]))
    return total / (c.shape[0] * c.shape[1])


def smooth_loops(c):
    total = 0.0
    for i in range(c.shape[0]):
        for t in range(c.shape[1] - 1):
            total += sum((c[i, t + 1, b] - c[i, t, b]) ** 2 for b in range(c.shape[2]))
    return total / (c.shape[0] * (c.shape[1] - 1))


def depth_loops(depth, alpha, target, amin):
    total, n = 0.0, 0
    for v in range(depth.shape[0]):
        for u in range(depth.shape[1]):
            if alpha[v, u] > amin and target[v, u] > 0:
                total += abs(depth[v, u] / alpha[v, u] - target[v, u])
                n += 1
    return total / n


def test_coefficient_loss_example():
    c = np.zeros((3, 4, 15))
    c[:, :, :6] = 1.0
    value, _ = coefficient_loss(c, 0.8)
    assert np.isclose(value, 4.8)


def test_losses_match_scalar_loops():
    rng = np.random.default_rng(2)
    c = rng.normal(size=(5, 4, 15))
    assert abs(coefficient_loss(c, 0.8)[0] - coeff_loss_loops(c, 0.8)) < 1e-6
    assert abs(smoothness_loss(c)[0] - smooth_loops(c)) < 1e-6
    d, a, tgt = rng.uniform(1, 3, (9, 8)), rng.uniform(0, 1, (9, 8)), rng.uniform(0, 3, (9, 8))
    tgt[0, :3] = 0
    assert abs(depth_loss(d, a, tgt, 0.5)[0] - depth_loops(d, a, tgt, 0.5)) < 1e-6
    p, q = rng.uniform(size=(6, 5, 3)), rng.uniform(size=(6, 5, 3))
    assert abs(l1_loss(p, q)[0] - np.mean([abs(x - y) for x, y in zip(p.ravel(), q.ravel())])) < 1e-6


def test_loss_gradients():
    rng = np.random.default_rng(3)
    c = rng.normal(size=(3, 4, 8))
    for f in (lambda x: coefficient_loss(x, 0.8), smoothness_loss):
        _, g = f(c)
        assert np.allclose(g, central_difference(lambda x: f(x)[0], c, 1e-6), atol=1e-6)
    d, a, tgt = rng.uniform(1, 3, (5, 6)), rng.uniform(0.6, 1, (5, 6)), rng.uniform(0.5, 3, (5, 6))
    _, gd, ga = depth_loss(d, a, tgt)
    assert np.allclose(gd, central_difference(lambda x: depth_loss(x, a, tgt)[0], d, 1e-7), atol=1e-6)
    assert np.allclose(ga, central_difference(lambda x: depth_loss(d, x, tgt)[0], a, 1e-7), atol=1e-6)


def test_coefficient_loss_monotone():
    rng = np.random.default_rng(4)
    c = rng.normal(size=(2, 3, 15))
    base = coefficient_loss(c, 0.8)[0]
    for idx in [(0, 0, 0), (1, 2, 14)]:
        bigger = c.copy()
        bigger[idx] *= 1.5
        assert coefficient_loss(bigger, 0.8)[0] > base


def test_zero_loss_when_render_equals_target():
    rng = np.random.default_rng(5)
    img = rng.uniform(size=(16, 16, 3))
    assert l1_loss(img, img)[0] == 0 and np.isclose(ssim_loss(img, img)[0], 0)
    depth, alpha = np.full((16, 16), 2.0), np.ones((16, 16))
    assert depth_loss(depth, alpha, depth)[0] == 0
    c = np.zeros((4, 3, 15))
    assert coefficient_loss(c)[0] == 0 and smoothness_loss(c)[0] == 0


def test_track_loss_gradient_and_zero():
    rng = np.random.default_rng(6)
    cloud = GaussianCloud(rng.normal(scale=0.3, size=(12, 3)) + [0, 0, 3], np.tile([1.0, 0, 0, 0], (12, 1)),
                          np.zeros((12, 3)), np.zeros(12), np.zeros((12, 3)))
    K = Intrinsics(30.0, 30.0, 15.5, 11.5, 32, 24)
    E = Extrinsics.identity()
    qp = rng.normal(scale=0.2, size=(4, 3)) + [0, 0, 3]
    anchors = build_track_anchors(cloud, qp, k=3)
    assert np.allclose(anchors.points(cloud.means), qp)
    obs = np.stack([K.fx * qp[:, 0] / qp[:, 2] + K.cx, K.fy * qp[:, 1] / qp[:, 2] + K.cy], axis=1)
    assert track_loss(cloud.means, anchors, obs, np.ones(4, bool), K, E)[0] < 1e-12
    obs += rng.normal(size=obs.shape)
    _, g = track_loss(cloud.means, anchors, obs, np.ones(4, bool), K, E)
    fd = central_difference(lambda m: track_loss(m, anchors, obs, np.ones(4, bool), K, E)[0], cloud.means, 1e-7)
    assert np.allclose(g, fd, atol=1e-6)


# -- Adam --------------------------------------------------------------------

def test_adam_zero_gradient_changes_nothing():
    rng = np.random.default_rng(7)
    p = {"a": rng.normal(size=(4, 3)), "b": rng.normal(size=5)}
    before = {k: v.copy() for k, v in p.items()}
    opt = Adam(p, {"a": 0.1, "b": 0.1})
    for _ in range(3):
        opt.step({k: np.zeros_like(v) for k, v in p.items()})
    assert all(np.array_equal(p[k], before[k]) for k in p)


def test_adam_first_step_is_lr_sign():
    p = {"x": np.array([1.0, -2.0, 3.0])}
    Adam(p, {"x": 0.01}, eps=0).step({"x": np.array([5.0, -0.1, 0.0001])})
    assert np.allclose(p["x"], [0.99, -1.99, 2.99])


def test_adam_frozen_and_remap():
    p = {"x": np.zeros(3), "y": np.zeros(2)}
    opt = Adam(p, {"x": 0.1, "y": 0.1}, frozen=("y",))
    opt.step({"x": np.array([1.0, 2.0, 3.0]), "y": np.ones(2)})
    assert np.array_equal(p["y"], np.zeros(2))
    m = opt.m["x"].copy()
    opt.remap("x", np.zeros(4), [2, 2, 0, 1])
    assert np.array_equal(opt.m["x"], m[[2, 2, 0, 1]])


def test_single_pixel_color_recovery():
    # convex sub-problem: one Gaussian, one pixel, colour only
    K = Intrinsics(32.0, 32.0, 15.5, 15.5, 32, 32)
    truth = np.array([0.2, 0.7, 0.4])

    def cloud_with(color):
        return GaussianCloud([[0, 0, 2]], [[1.0, 0, 0, 0]], np.log([[0.1] * 3]), logit(np.array([0.8])), [color])

    target = render(static_pose(cloud_with(truth)), K, Extrinsics.identity()).rgb[16, 16]
    cloud = cloud_with([0.5, 0.5, 0.5])
    opt = Adam({"colors": cloud.colors}, {"colors": 0.02})
    for _ in range(600):
        out = render(static_pose(cloud), K, Extrinsics.identity())
        d = np.zeros_like(out.rgb)
        d[16, 16] = 2 * (out.rgb[16, 16] - target)
        opt.step({"colors": render_backward(out, d).colors})
    assert np.max(np.abs(cloud.colors[0] - truth)) < 1e-3


# -- initialisation ----------------------------------------------------------

def test_init_cloud_on_plane():
    ds = plane_dataset()
    cloud = init_cloud(ds, 0, 100, np.random.default_rng(0))
    assert len(cloud) == 100
    assert np.allclose(cloud.means[:, 2], 2.0)
    assert np.allclose(cloud.opacities, 0.1)
    assert cloud.dynamic.all()


def test_init_cloud_clamps_to_pixels(caplog):
    ds = plane_dataset(width=12, height=12)
    with caplog.at_level(logging.WARNING):
        cloud = init_cloud(ds, 0, 1000, np.random.default_rng(0))
    assert len(cloud) == 144 and "only 144 pixels" in caplog.text
    assert len(init_cloud(ds, 0, 200, np.random.default_rng(0), allow_resample=True)) == 200


def test_init_cloud_needs_depth():
    ds = plane_dataset(depth=0.0)
    with pytest.raises(ValidationError):
        init_cloud(ds, 0, 10, np.random.default_rng(0))


def test_init_cloud_masks_mark_static():
    masks = np.zeros((1, 16, 24), bool)
    masks[0, :, :12] = True
    ds = plane_dataset(masks=masks)
    cloud = init_cloud(ds, 0, 384, np.random.default_rng(0))
    assert np.array_equal(cloud.dynamic, cloud.means[:, 0] < 0)


def test_init_cloud_near_true_surface():
    scene = synth_scene(n_gaussians=60, n_frames=3, width=48, height=40, depth_noise=0.01, seed=2)
    ds = scene.dataset
    cloud = init_cloud(ds, 1, 300, np.random.default_rng(0))
    clean = synth_scene(n_gaussians=60, n_frames=3, width=48, height=40, seed=2).dataset
    E = ds.trajectory.poses[1]
    z = (cloud.means @ E.R.T + E.t)[:, 2]
    K = ds.intrinsics
    u = np.round(K.fx * (cloud.means @ E.R.T + E.t)[:, 0] / z + K.cx).astype(int)
    v = np.round(K.fy * (cloud.means @ E.R.T + E.t)[:, 1] / z + K.cy).astype(int)
    true_z = clean.depths[1][v, u]
    assert np.mean(np.abs(z - true_z) <= 2 * 0.01 * true_z + 1e-9) >= 0.95


def planted_tracks(n_frames=9, per_group=12, speed=0.05):
    rng = np.random.default_rng(0)
    K = Intrinsics(20.0, 20.0, 23.5, 15.5, 48, 32)
    t0 = n_frames // 2
    xs = np.concatenate([rng.uniform(-0.9, -0.4, per_group), rng.uniform(0.4, 0.9, per_group)])
    ys = rng.uniform(-0.5, 0.5, 2 * per_group)
    labels = np.repeat([0, 1], per_group)
    sign = np.where(labels == 0, 1.0, -1.0)
    pos = np.zeros((2 * per_group, n_frames, 2))
    for t in range(n_frames):
        x = xs + sign * speed * (t - t0)
        pos[:, t, 0] = K.fx * x / 4.0 + K.cx
        pos[:, t, 1] = K.fy * ys / 4.0 + K.cy
    tracks = TrackSet(np.arange(2 * per_group), pos, np.ones(pos.shape[:2], bool))
    traj = CameraTrajectory(K, [Extrinsics.identity()] * n_frames)
    ds = SceneDataset(np.full((n_frames, 32, 48, 3), 0.5), np.full((n_frames, 32, 48), 4.0), tracks, traj)
    return ds.validate(), labels


def test_init_motion_recovers_planted_clusters():
    ds, labels = planted_tracks()
    rng = np.random.default_rng(1)
    cloud = init_cloud(ds, 4, 200, rng)
    mi = init_motion(ds, cloud, 8, 4, rng)
    assert len(set(zip(mi.labels, labels))) == 2
    assert np.all(mi.model.coeffs[:, 4] == 0)
    assert np.all(mi.model.coeffs[:, :, :6] == 0)
    # soft weights blend clusters, but each side still moves its own way
    for t in (0, 8):
        moved = pose_at_time(cloud, mi.model, t).means - cloud.means
        left = cloud.means[:, 0] < -0.5
        right = cloud.means[:, 0] > 0.5
        assert np.sign(moved[left, 0].mean()) == np.sign(t - 4)
        assert np.sign(moved[right, 0].mean()) == -np.sign(t - 4)


def test_init_motion_static_tracks_give_zero():
    ds, _ = planted_tracks(speed=0.0)
    rng = np.random.default_rng(2)
    cloud = init_cloud(ds, 4, 100, rng)
    mi = init_motion(ds, cloud, 8, 4, rng)
    assert np.max(np.abs(mi.model.coeffs)) < 1e-9


def test_init_motion_too_few_tracks_falls_back(caplog):
    ds = plane_dataset(n_frames=3)
    rng = np.random.default_rng(3)
    cloud = init_cloud(ds, 1, 50, rng)
    with caplog.at_level(logging.WARNING):
        mi = init_motion(ds, cloud, 15, 1, rng)
    assert "motion starts at rest" in caplog.text
    assert not np.any(mi.model.coeffs)


def test_cluster_weight_at_centre_is_max():
    centers = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 2.0, 0]])
    raw = cluster_weights(centers[1:2], centers, tau=0.7, normalize=False)
    assert raw[0, 1] == 1.0 and raw[0].argmax() == 1
    w = cluster_weights(centers, centers, tau=0.7)
    assert np.allclose(w.sum(axis=1), 1) and np.array_equal(w.argmax(axis=1), [0, 1, 2])


# -- fitting -----------------------------------------------------------------

def tiny_config(**sched):
    base = dict(init_iters=30, joint_epochs=2, init_gaussians=300, lr=1e-3, densify_every=0)
    base.update(sched)
    return FitConfig(LossConfig(), TrainSchedule(**base), seed=3)


def bases_hash(model):
    return hashlib.sha256(np.ascontiguousarray(model.fixed).tobytes()).hexdigest()


def test_zero_motion_phase_one_keeps_coefficients_small():
    scene = synth_scene(n_gaussians=60, n_frames=5, width=40, height=32, motion="static", seed=1)
    tr = Trainer(scene.dataset, tiny_config(init_iters=100, lr=1e-4))
    tr.phase_motion()
    assert np.max(np.abs(tr.model.coeffs)) < 1e-2


def test_fit_freezes_fixed_bases_and_is_seeded():
    scene = synth_scene(n_gaussians=60, n_frames=4, width=40, height=32, seed=4)
    tr = Trainer(scene.dataset, tiny_config())
    before = bases_hash(tr.model)
    res = tr.run()
    assert bases_hash(res.model) == before
    assert [r["phase"] for r in res.log].count("joint") == 2
    again = Trainer(scene.dataset, tiny_config()).run()
    assert res.log == again.log


def test_freeze_motion_keeps_motion_at_rest():
    scene = synth_scene(n_gaussians=60, n_frames=4, width=40, height=32, seed=5)
    res = Trainer(scene.dataset, tiny_config(freeze_motion=True)).run()
    assert not np.any(res.model.coeffs) and not np.any(res.model.trainable)


def test_divergence_dumps_state(tmp_path):
    scene = synth_scene(n_gaussians=60, n_frames=3, width=40, height=32, seed=6)
    tr = Trainer(scene.dataset, tiny_config(), out_dir=tmp_path)
    tr.model.coeffs[0, 0, 0] = np.nan
    with pytest.raises(DivergenceError) as err:
        tr.phase_motion()
    assert "coeffs" in str(err.value)
    assert (tmp_path / "diverged_state.npz").exists()


def test_large_coefficient_weight_pins_motion():
    scene = synth_scene(n_gaussians=60, n_frames=4, width=40, height=32, seed=7)
    loose = Trainer(scene.dataset, tiny_config(init_iters=150, joint_epochs=0)).run()
    cfg = tiny_config(init_iters=150, joint_epochs=0)
    cfg.loss.w_coeff = 1e3
    tight = Trainer(scene.dataset, cfg).run()
    assert np.abs(tight.model.coeffs).mean() < 0.25 * np.abs(loose.model.coeffs).mean()
