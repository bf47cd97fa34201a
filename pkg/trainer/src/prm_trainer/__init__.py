from .model import MARKER_ID, PAD_ID, StepRewardModel, TrainerConfig, encode_text, encode_trajectory
from .training import load_checkpoint, load_labeled, score_steps, train_prm

__all__ = [
    "MARKER_ID",
    "PAD_ID",
    "StepRewardModel",
    "TrainerConfig",
    "encode_text",
    "encode_trajectory",
    "load_checkpoint",
    "load_labeled",
    "score_steps",
    "train_prm",
]
