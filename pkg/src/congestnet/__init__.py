"""Congestion prediction on gridded maps from fused multimodal rasters."""

from .config import ModelConfig, TrainConfig
from .errors import CongestNetError, ConfigError, FormatError, NumericError, UsageError
from .grid import DatasetSplit, FeatureLayer, GridMap, QueryLocation, TrafficRecord
from .metrics import MetricsReport
from .model import CongestionModel

__version__ = "0.1.0"

__all__ = [
    "CongestionModel", "ConfigError", "CongestNetError", "DatasetSplit", "FeatureLayer", "FormatError",
    "GridMap", "MetricsReport", "ModelConfig", "NumericError", "QueryLocation", "TrafficRecord",
    "TrainConfig", "UsageError",
]
