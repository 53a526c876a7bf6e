"""Parameter initialisation and conv-stack application shared by the modules."""

from __future__ import annotations

import numpy as np

from .optim import Parameters
from .tensor import Tensor, conv2d, relu


def add_conv(params: Parameters, name: str, k: int, cin: int, cout: int, rng, relu_after: bool = True):
    # He init for relu-followed layers, LeCun for linear outputs
    std = np.sqrt((2.0 if relu_after else 1.0) / (k * k * cin))
    params.add(f"{name}.kernel", (rng.standard_normal((k, k, cin, cout)) * std).astype(np.float32))
    params.add(f"{name}.bias", np.zeros(cout, dtype=np.float32))


def add_conv_stack(params: Parameters, prefix: str, k: int, widths, rng, relu_last: bool):
    """Register convs widths[0] -> widths[1] -> ... as ``prefix.0``, ``prefix.1``, ..."""
    n = len(widths) - 1
    for i in range(n):
        last = i == n - 1
        add_conv(params, f"{prefix}.{i}", k, widths[i], widths[i + 1], rng, relu_after=(not last) or relu_last)


def conv_stack(params: Parameters, prefix: str, x: Tensor, n_layers: int, relu_last: bool,
               stride: int = 1) -> Tensor:
    for i in range(n_layers):
        x = conv2d(x, params[f"{prefix}.{i}.kernel"], params[f"{prefix}.{i}.bias"], "same", stride)
        if i < n_layers - 1 or relu_last:
            x = relu(x)
    return x
