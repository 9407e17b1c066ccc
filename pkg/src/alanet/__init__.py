"""Bone age assessment from hand radiographs with joint anatomical ROI
detection, ordinal age regression, and per-ROI patch supervision."""

from .data import DatasetManifest, ImageRecord, synth_generate
from .evaluation import EvalReport, evaluate
from .network import ALANet, ALANetConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, run_training

__all__ = [
    "ALANet",
    "ALANetConfig",
    "DatasetManifest",
    "EvalReport",
    "ImageRecord",
    "TrainConfig",
    "evaluate",
    "load_checkpoint",
    "run_training",
    "save_checkpoint",
    "synth_generate",
]

__version__ = "0.1.0"
