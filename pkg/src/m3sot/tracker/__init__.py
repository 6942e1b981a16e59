"""End-to-end tracking: cropping, template sets, training and sequence inference."""
from .inference import TemplateEntry, TrackerState, init_state, run_sequence, track_step
from .model import ModelConfig, OracleModel, TrackerModel
from .sampling import FrameEmpty, augment, crop_and_sample, perturb_box
from .training import DivergenceError, TrainConfig, Trainer, TrainResult, compute_losses, train

__all__ = [
    "TemplateEntry", "TrackerState", "init_state", "run_sequence", "track_step",
    "ModelConfig", "OracleModel", "TrackerModel",
    "FrameEmpty", "augment", "crop_and_sample", "perturb_box",
    "DivergenceError", "TrainConfig", "Trainer", "TrainResult", "compute_losses", "train",
]
