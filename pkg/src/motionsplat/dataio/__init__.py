from .dataset import HeldoutView, SceneDataset, TrackSet, load_dataset, save_dataset
from .synth import SynthConfig, SyntheticScene, perturb_trajectory, synth_scene

__all__ = [
    "HeldoutView", "SceneDataset", "SynthConfig", "SyntheticScene", "TrackSet", "load_dataset",
    "perturb_trajectory", "save_dataset", "synth_scene",
]
