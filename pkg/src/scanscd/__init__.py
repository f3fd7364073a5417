"""Semantic change detection with a triple encoder-decoder and cross-shaped window attention."""

from .config import ExperimentConfig, ModelConfig, TrainConfig
from .errors import CheckpointError, ConfigError, DataError, NumericError, ScdError
from .metrics import ConfusionMatrix, MetricsReport, TransitionMatrix, metrics_report
from .model import SCanNet, build_model, load_checkpoint, save_checkpoint
from .types import BitemporalSample, derive_change_mask, validate_sample

__version__ = "0.1.0"

__all__ = [
    "BitemporalSample", "CheckpointError", "ConfigError", "ConfusionMatrix", "DataError",
    "ExperimentConfig", "MetricsReport", "ModelConfig", "NumericError", "SCanNet", "ScdError",
    "TrainConfig", "TransitionMatrix", "build_model", "derive_change_mask", "load_checkpoint",
    "metrics_report", "save_checkpoint", "validate_sample",
]
