"""Reparameterizable convolutional inertial localization with sparse temporal attention."""
from .config import ModelConfig, TrainConfig
from .model import DEPLOY, TRAIN, RepILN, count_flops, count_params, fuse_model, load_checkpoint, save_checkpoint
from .repblock import FusedRepBlock, RepBlock
from .gcu import SAGCU
from .tssa import TSSA
from .tensor import Tape, Tensor

__all__ = [
    "ModelConfig", "TrainConfig", "RepILN", "TRAIN", "DEPLOY", "count_params", "count_flops", "fuse_model",
    "save_checkpoint", "load_checkpoint", "RepBlock", "FusedRepBlock", "SAGCU", "TSSA", "Tape", "Tensor",
]
