"""Attention-only, waveform-input MOS prediction with self-teaching."""
from .estimator import AttentiveMOSRegressor, SelfTeachingMOSRegressor, WaveFramer
from .metrics import EvalReport, mse_metric, pcc, srcc
from .model import AttentiveMOS, ModelConfig
from .training import LossConfig, SustainSchedule, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "AttentiveMOS",
    "AttentiveMOSRegressor",
    "EvalReport",
    "LossConfig",
    "ModelConfig",
    "SelfTeachingMOSRegressor",
    "SustainSchedule",
    "TrainConfig",
    "WaveFramer",
    "mse_metric",
    "pcc",
    "srcc",
]
