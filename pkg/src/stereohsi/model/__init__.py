"""3-D CNN patch classifier: kernels, network, optimizer, checkpoints."""
from .checkpoint import read_checkpoint, write_checkpoint
from .estimator import Conv3dNetClassifier
from .network import DEFAULT_ARCHITECTURE, Architecture, Conv3dNet
from .training import (AdamState, PlateauScheduler, TrainConfig, TrainReport, adam_step,
                       evaluate_loss, plateau_schedule, train)

__all__ = [
    "AdamState", "Architecture", "Conv3dNet", "Conv3dNetClassifier", "DEFAULT_ARCHITECTURE",
    "PlateauScheduler", "TrainConfig", "TrainReport", "adam_step", "evaluate_loss",
    "plateau_schedule", "read_checkpoint", "train", "write_checkpoint",
]
