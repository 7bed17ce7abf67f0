"""Losses, metrics, Adam and the two-phase fitting loop."""

from .adam import Adam
from .config import FitConfig, LossConfig, TrainSchedule, config_from_dict, load_config, save_config
from .fit import FitResult, Trainer, evaluate_heldout, fit, query_trajectories, track_endpoint_error
from .metrics import psnr, ssim

__all__ = [
    "Adam", "FitConfig", "FitResult", "LossConfig", "TrainSchedule", "Trainer", "config_from_dict",
    "evaluate_heldout", "fit", "load_config", "psnr", "query_trajectories", "save_config", "ssim",
    "track_endpoint_error",
]
