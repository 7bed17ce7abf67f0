"""Two-phase fitting of a dynamic Gaussian scene.

Phase 1 fits only the motion model (coefficients and trainable bases)
against the depth and 2D-track losses, starting from a dense cloud lifted
from the canonical frame. The cloud is then downsampled once and phase 2
optimises everything jointly, one epoch being every frame once in random
order, with periodic clone/split/prune during the first half.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DivergenceError, ValidationError
from ..gaussians import (
    DensifyOptions,
    GaussianCloud,
    MotionModel,
    densify_and_prune,
    downsample,
    pose_at_time,
    pose_backward,
)
from ..rasterizer import render, render_backward
from .adam import Adam
from .config import FitConfig
from .init import init_cloud, init_motion
from .losses import (
    build_track_anchors,
    coefficient_loss,
    depth_loss,
    l1_loss,
    smoothness_loss,
    ssim_loss,
    track_loss,
)
from .metrics import psnr, ssim

log = logging.getLogger(__name__)

CLOUD_PARAMS = ("means", "quats", "log_scales", "opacity_logits", "colors")
MOTION_PARAMS = ("coeffs", "trainable")
TERMS = ("rgb", "ssim", "depth", "track", "coeff", "smooth")


@dataclass
class FitResult:
    cloud: GaussianCloud
    model: MotionModel
    log: list = field(default_factory=list)
    anchors: object = None
    query_points: np.ndarray = None
    query_valid: np.ndarray = None


def evaluate_heldout(cloud, model, dataset, with_ssim=False):
    """Mean PSNR (and SSIM) over the dataset's held-out views."""
    if not dataset.heldout:
        return (math.nan, math.nan) if with_ssim else math.nan
    K = dataset.intrinsics
    ps, ss = [], []
    for view in dataset.heldout:
        rgb = render(pose_at_time(cloud, model, view.frame), K, view.extrinsics, dataset.background).rgb
        ps.append(psnr(rgb, view.image))
        if with_ssim:
            ss.append(ssim(rgb, view.image))
    if with_ssim:
        return float(np.mean(ps)), float(np.mean(ss))
    return float(np.mean(ps))


class Trainer:
    def __init__(self, dataset, cfg: FitConfig = None, out_dir=None, progress=None):
        self.ds = dataset.validate()
        self.cfg = cfg or FitConfig()
        self.out_dir = Path(out_dir) if out_dir else None
        self.progress = progress
        self.rng = np.random.default_rng(self.cfg.seed)
        self.log = []
        self.K = dataset.intrinsics
        self.bg = np.asarray(dataset.background, float)
        s = self.cfg.schedule
        self.t0 = dataset.n_frames // 2
        self.cloud = init_cloud(dataset, self.t0, s.init_gaussians, self.rng, s.init_opacity, s.allow_resample)
        mi = init_motion(dataset, self.cloud, s.basis_count, self.t0, self.rng, s.trainable_init_std)
        self.model = mi.model
        if s.freeze_motion:
            # Motion pinned to the identity: zero bases, zero coefficients.
            self.model.trainable[:] = 0.0
            self.model.coeffs[:] = 0.0
        self.query_points = mi.query_points
        self.query_valid = mi.query_valid
        self.query_rows = np.flatnonzero(mi.query_valid)
        self._rebuild_anchors()
        self.step_count = 0

    # -- helpers ---------------------------------------------------------

    def _rebuild_anchors(self):
        self.anchors = build_track_anchors(self.cloud, self.query_points[self.query_rows],
                                           self.query_rows, self.cfg.loss.track_neighbors)

    def _params(self):
        c, m = self.cloud, self.model
        return {"means": c.means, "quats": c.quats, "log_scales": c.log_scales,
                "opacity_logits": c.opacity_logits, "colors": c.colors,
                "coeffs": m.coeffs, "trainable": m.trainable}

    def _optimizer(self, groups):
        s = self.cfg.schedule
        params = {k: v for k, v in self._params().items() if k in groups}
        frozen = MOTION_PARAMS if s.freeze_motion else ()
        lrs = {k: s.lr * s.lr_scale[k] for k in params}
        return Adam(params, lrs, s.adam_betas, s.adam_eps, frozen=frozen)

    def _diverged(self, what):
        path = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path = self.out_dir / "diverged_state.npz"
            np.savez(path, **{k: v for k, v in self._params().items()})
        raise DivergenceError(f"optimisation diverged at step {self.step_count}: {what}", state_path=path)

    # -- one optimisation step -------------------------------------------

    def _step(self, t, joint, opt, stats=None):
        L = self.cfg.loss
        E = self.ds.trajectory.poses[t]
        for k, v in self._params().items():
            if not np.all(np.isfinite(v)):
                self._diverged(f"non-finite {k} before frame {t}")
        posed = pose_at_time(self.cloud, self.model, t)
        target = render(posed, self.K, E, self.bg)
        terms = dict.fromkeys(TERMS, 0.0)
        shape = (self.K.height, self.K.width)
        d_rgb = np.zeros(shape + (3,))
        if joint:
            gt = self.ds.frames[t]
            if L.w_rgb:
                terms["rgb"], g = l1_loss(target.rgb, gt)
                d_rgb += L.w_rgb * g
            if L.w_ssim:
                terms["ssim"], g = ssim_loss(target.rgb, gt)
                d_rgb += L.w_ssim * g
        d_depth = d_alpha = None
        if L.w_depth:
            terms["depth"], dD, dA = depth_loss(target.depth, target.alpha, self.ds.depths[t], L.depth_alpha_min)
            d_depth, d_alpha = L.w_depth * dD, L.w_depth * dA
        d_track = 0.0
        if L.w_track and len(self.anchors.query_ids):
            tr = self.ds.tracks
            rows = self.anchors.query_ids
            terms["track"], g = track_loss(posed.means, self.anchors, tr.positions[rows, t],
                                           tr.visible[rows, t], self.K, E)
            d_track = L.w_track * g
        buf = render_backward(target, d_rgb, d_depth, d_alpha)
        d_mu0, d_q, d_c_t, d_tr = pose_backward(posed, self.model, buf.means + d_track, buf.rotations)
        d_coeffs = np.zeros_like(self.model.coeffs)
        if L.w_coeff:
            terms["coeff"], g = coefficient_loss(self.model.coeffs, L.lambda_fixed)
            d_coeffs += L.w_coeff * g
        if L.w_smooth:
            terms["smooth"], g = smoothness_loss(self.model.coeffs)
            d_coeffs += L.w_smooth * g
        d_coeffs[:, t] += d_c_t
        # the canonical means already define frame t0
        d_coeffs[:, self.t0] = 0.0
        total = (L.w_rgb * terms["rgb"] + L.w_ssim * terms["ssim"] + L.w_depth * terms["depth"]
                 + L.w_track * terms["track"] + L.w_coeff * terms["coeff"] + L.w_smooth * terms["smooth"])
        terms["total"] = total
        if not math.isfinite(total):
            bad = [k for k in TERMS if not math.isfinite(terms[k])] or ["total"]
            self._diverged(f"non-finite loss term(s) {', '.join(bad)} at frame {t}")
        if joint:
            terms["psnr"] = psnr(target.rgb, self.ds.frames[t])
        grads = {"coeffs": d_coeffs, "trainable": d_tr}
        if joint:
            grads.update(means=d_mu0, quats=d_q, log_scales=buf.log_scales,
                         opacity_logits=buf.opacity_logits, colors=buf.colors)
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                self._diverged(f"non-finite gradient for {k}")
        opt.step(grads)
        if joint:
            c = self.cloud
            np.clip(c.colors, 0.0, 1.0, out=c.colors)
            c.quats /= np.linalg.norm(c.quats, axis=1, keepdims=True)
            if stats is not None:
                seen = target.aux["proj"].radius > 0
                ndc = buf.mu2d * np.array([0.5 * self.K.width, 0.5 * self.K.height])
                stats["grad"][seen] += np.linalg.norm(ndc[seen], axis=1)
                stats["count"][seen] += 1
                stats["mean_grad"] += d_mu0
        self.step_count += 1
        return terms

    # -- phases ----------------------------------------------------------

    def phase_motion(self):
        s = self.cfg.schedule
        if s.init_iters == 0 or s.freeze_motion:
            return
        opt = self._optimizer(MOTION_PARAMS)
        F = self.ds.n_frames
        acc = []
        every = max(1, min(50, s.init_iters))
        for it in range(s.init_iters):
            t = int(self.rng.integers(F))
            acc.append(self._step(t, False, opt))
            if (it + 1) % every == 0 or it + 1 == s.init_iters:
                self._record("init", it + 1, None, acc)
                acc = []

    def _densify(self, stats, opt):
        s = self.cfg.schedule
        grads = stats["grad"] / np.maximum(stats["count"], 1)
        opts = DensifyOptions(s.densify_grad_threshold, s.densify_percent_dense, s.prune_opacity,
                              max_gaussians=s.max_gaussians)
        old_rows = self.cloud.dynamic_rows()
        cloud, model, src = densify_and_prune(self.cloud, self.model, grads, opts,
                                              mean_grads=-stats["mean_grad"], rng=self.rng, return_index=True)
        self.cloud, self.model = cloud, model
        params = self._params()
        for k in CLOUD_PARAMS:
            opt.remap(k, params[k], src)
        rows = old_rows[src]
        opt.remap("coeffs", params["coeffs"], rows[rows >= 0])
        opt.params["trainable"] = params["trainable"]
        self._rebuild_anchors()

    def _new_stats(self):
        n = len(self.cloud)
        return {"grad": np.zeros(n), "count": np.zeros(n), "mean_grad": np.zeros((n, 3))}

    def phase_joint(self):
        s = self.cfg.schedule
        if s.downsample_factor < 1:
            seed = int(self.rng.integers(2**31 - 1))
            self.cloud, self.model = downsample(self.cloud, self.model, s.downsample_factor, seed=seed)
            self._rebuild_anchors()
        opt = self._optimizer(CLOUD_PARAMS + MOTION_PARAMS)
        F = self.ds.n_frames
        total_steps = s.joint_epochs * F
        densify_until = total_steps // 2
        stats = self._new_stats()
        base_lrs = dict(opt.lrs)
        step = 0
        for epoch in range(s.joint_epochs):
            acc = []
            for t in self.rng.permutation(F):
                # exponential decay to lr_final_ratio over the joint phase
                decay = s.lr_final_ratio ** (step / max(total_steps - 1, 1))
                opt.lrs = {k: v * decay for k, v in base_lrs.items()}
                acc.append(self._step(int(t), True, opt, stats))
                step += 1
                if s.densify_every and step % s.densify_every == 0 and step < densify_until:
                    self._densify(stats, opt)
                    stats = self._new_stats()
            heldout = None
            if self.ds.heldout and s.eval_every and ((epoch + 1) % s.eval_every == 0 or epoch + 1 == s.joint_epochs):
                heldout = evaluate_heldout(self.cloud, self.model, self.ds)
            self._record("joint", step, epoch + 1, acc, heldout)

    def _record(self, phase, step, epoch, acc, heldout=None):
        row = {"phase": phase, "step": step, "epoch": epoch if epoch is not None else ""}
        for k in ("total",) + TERMS:
            row[k] = float(np.mean([a[k] for a in acc]))
        row["train_psnr"] = float(np.mean([a["psnr"] for a in acc])) if phase == "joint" else ""
        row["n_gaussians"] = len(self.cloud)
        row["heldout_psnr"] = "" if heldout is None else heldout
        self.log.append(row)
        if self.progress:
            self.progress(row)

    def run(self) -> FitResult:
        self.phase_motion()
        self.phase_joint()
        return FitResult(self.cloud, self.model, self.log, self.anchors, self.query_points, self.query_valid)


def fit(dataset, cfg: FitConfig = None, out_dir=None, progress=None) -> FitResult:
    if dataset.n_frames < 1:
        raise ValidationError("dataset has no frames")
    return Trainer(dataset, cfg, out_dir, progress).run()


def query_trajectories(cloud, model, anchors):
    """World positions of the anchored query points at every frame, ``(Q, F, 3)``."""
    out = np.zeros((len(anchors.query_ids), model.F, 3))
    for t in range(model.F):
        out[:, t] = anchors.points(pose_at_time(cloud, model, t).means)
    return out


def track_endpoint_error(pred, truth, extent):
    """Mean 3D distance at the first and last frame, as a fraction of ``extent``."""
    ends = [0, -1]
    d = np.linalg.norm(pred[:, ends] - truth[:, ends], axis=-1)
    return float(d.mean() / extent)
