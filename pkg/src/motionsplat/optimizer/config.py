"""Loss weights and training schedule, plus (de)serialisation of both."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ..errors import ValidationError


@dataclass
class LossConfig:
    w_rgb: float = 1.0
    w_ssim: float = 0.2
    w_depth: float = 0.5
    w_track: float = 2.0
    w_coeff: float = 0.1
    lambda_fixed: float = 0.8
    w_smooth: float = 0.1
    track_neighbors: int = 8
    depth_alpha_min: float = 0.5

    def __post_init__(self):
        for f in ("w_rgb", "w_ssim", "w_depth", "w_track", "w_coeff", "w_smooth"):
            if getattr(self, f) < 0:
                raise ValidationError(f"loss weight {f} must be >= 0")
        if not 0.0 <= self.lambda_fixed <= 1.0:
            raise ValidationError("lambda_fixed must lie in [0, 1]")


def _default_lr_scale():
    # Multipliers on the base learning rate, per parameter group.
    return {
        "means": 1.0,
        "quats": 10.0,
        "log_scales": 50.0,
        "opacity_logits": 500.0,
        "colors": 25.0,
        "coeffs": 1.0,  # Adam turns weak gradients into full steps; larger rates erase the track init
        "trainable": 10.0,
    }


@dataclass
class TrainSchedule:
    init_iters: int = 1000
    joint_epochs: int = 600
    lr: float = 1e-4
    lr_final_ratio: float = 1.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-15
    downsample_factor: float = 0.5
    basis_count: int = 15
    init_gaussians: int = 50000
    densify_every: int = 200
    densify_grad_threshold: float = 2e-4
    densify_percent_dense: float = 0.01
    prune_opacity: float = 5e-3
    max_gaussians: int = None
    lr_scale: dict = field(default_factory=_default_lr_scale)
    init_opacity: float = 0.1
    trainable_init_std: float = 0.01
    allow_resample: bool = False
    freeze_motion: bool = False
    eval_every: int = 1

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.init_iters < 0 or self.joint_epochs < 0 or self.init_gaussians < 1:
            raise ValidationError("iteration, epoch and Gaussian counts must be non-negative")
        if not self.lr > 0:
            raise ValidationError("learning rate must be > 0")
        if not 0 < self.lr_final_ratio <= 1:
            raise ValidationError("lr_final_ratio must be in (0, 1]")
        if self.basis_count < 6:
            raise ValidationError("basis_count must be >= 6")
        if not 0 < self.downsample_factor <= 1:
            raise ValidationError("downsample_factor must be in (0, 1]")
        scale = _default_lr_scale()
        scale.update(self.lr_scale or {})
        self.lr_scale = scale


@dataclass
class FitConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["schedule"]["adam_betas"] = list(self.schedule.adam_betas)
        return d


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ValidationError(f"config section '{where}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown key(s) in config section '{where}': {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data) -> FitConfig:
    data = data or {}
    unknown = set(data) - {"loss", "schedule", "seed"}
    if unknown:
        raise ValidationError(f"unknown top-level config key(s): {sorted(unknown)}")
    return FitConfig(_build(LossConfig, data.get("loss"), "loss"),
                     _build(TrainSchedule, data.get("schedule"), "schedule"),
                     int(data.get("seed", 0)))


def load_config(path) -> FitConfig:
    """Read a YAML (or JSON) config file mirroring LossConfig + TrainSchedule."""
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg: FitConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
