"""Antenna-count-agnostic channel charting on synthetic CIR data."""
from __future__ import annotations

__version__ = "0.1.0"

from .errors import AdaposError
from .metrics import PseudoDistanceProvider
from .models import AdaPosModel, BaselineResNet, ModelConfig
from .sim import CirDataset, default_environment, generate_dataset, generate_trajectory
from .training import Strategy, TrainConfig, train
from .evaluation import evaluate_model, sweep

__all__ = [
    "AdaposError", "AdaPosModel", "BaselineResNet", "CirDataset", "ModelConfig",
    "PseudoDistanceProvider", "Strategy", "TrainConfig", "default_environment",
    "evaluate_model", "generate_dataset", "generate_trajectory", "sweep", "train",
]
