"""Representation Fusion and Prediction Module.

concat[R^meta, R^loc] -> strided conv stack -> global average pool ->
fully connected layer -> sigmoid, giving one congestion score per time point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import ConfigError
from .grid import QueryLocation
from .layers import add_conv_stack, conv_stack
from .optim import Parameters
from .tensor import Tensor, concat_channels, global_avg_pool, linear, sigmoid


@dataclass
class PredictionVector:
    location: QueryLocation
    scores: np.ndarray  # (T,) in [0, 1]
    threshold: float = 0.5

    def binarize(self) -> np.ndarray:
        return binarize(self)


def init_rfpm(params: Parameters, cfg: ModelConfig, rng) -> None:
    widths = (cfg.d_meta + cfg.d_loc, *cfg.head_channels)
    add_conv_stack(params, "rfpm.conv", cfg.head_kernel, widths, rng, relu_last=True)
    fan_in = cfg.head_channels[-1]
    params.add("rfpm.fc.weight", (rng.standard_normal((fan_in, cfg.time_points)) / np.sqrt(fan_in)).astype(np.float32))
    params.add("rfpm.fc.bias", np.zeros(cfg.time_points, dtype=np.float32))


def predict(meta: Tensor, loc: Tensor, params: Parameters, cfg: ModelConfig) -> Tensor:
    """y_hat = f^pred(concat[R^meta, R^loc]) as a length-T tensor."""
    if meta.shape[:2] != loc.shape[:2]:
        raise ConfigError(f"meta {meta.shape} and mapped {loc.shape} representations differ spatially")
    if meta.shape[2] != cfg.d_meta or loc.shape[2] != cfg.d_loc:
        raise ConfigError(f"channel widths {meta.shape[2]}/{loc.shape[2]} do not match config "
                          f"{cfg.d_meta}/{cfg.d_loc}")
    x = concat_channels([meta, loc])
    x = conv_stack(params, "rfpm.conv", x, len(cfg.head_channels), relu_last=True, stride=cfg.head_stride)
    x = global_avg_pool(x)
    return sigmoid(linear(x, params["rfpm.fc.weight"], params["rfpm.fc.bias"]))


def binarize(pred: PredictionVector) -> np.ndarray:
    """1 where the score reaches the threshold (inclusive), else 0."""
    return (np.asarray(pred.scores) >= pred.threshold).astype(np.uint8)
