"""Unified spatio-temporal flow forecasting for grid and graph data."""

from .data import LONG_TERM, SHORT_TERM, FlowDataset, TaskSpec, load_dataset, save_dataset
from .estimator import HistoryAverage, KWayPartitioner, MinMaxFlowScaler, UniFlowForecaster
from .model import ModelConfig, UniFlow
from .patching import PatchConfig
from .synth import SynthConfig, gen_suite
from .training import TrainConfig

__all__ = [
    "FlowDataset",
    "HistoryAverage",
    "KWayPartitioner",
    "LONG_TERM",
    "MinMaxFlowScaler",
    "ModelConfig",
    "PatchConfig",
    "SHORT_TERM",
    "SynthConfig",
    "TaskSpec",
    "TrainConfig",
    "UniFlow",
    "UniFlowForecaster",
    "gen_suite",
    "load_dataset",
    "save_dataset",
]

__version__ = "0.1.0"
