"""Parameter registry and the two update rules (plain SGD and Adam)."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Tensor


class Parameters(OrderedDict):
    """Ordered name -> Tensor map.  Insertion order is the canonical order
    used by checkpoints, optimizers and gradient checks."""

    def add(self, name: str, value) -> Tensor:
        if name in self:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self[name] = t
        return t

    def zero_grad(self):
        for t in self.values():
            t.zero_grad()

    def subset(self, prefixes) -> "Parameters":
        out = Parameters()
        for name, t in self.items():
            if name.startswith(tuple(prefixes)):
                out[name] = t
        return out

    def astype(self, dtype) -> "Parameters":
        out = Parameters()
        for name, t in self.items():
            out[name] = Tensor(t.value.astype(dtype), requires_grad=True)
        return out

    def copy(self) -> "Parameters":
        out = Parameters()
        for name, t in self.items():
            out[name] = Tensor(t.value.copy(), requires_grad=True)
        return out

    def count(self) -> int:
        return sum(t.value.size for t in self.values())


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")


def optimizer_step(state: OptimizerState, params: Parameters) -> None:
    """Apply one update in place, zero the gradients, bump ``step_count``.

    Every gradient is checked before anything is modified, so a NaN
    aborts the step with the parameters untouched.
    """
    for name, p in params.items():
        if p.grad is None or not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient for parameter {name!r} at step {state.step_count}")

    if state.kind == "sgd":
        lr = state.learning_rate
        for p in params.values():
            p.value -= (lr * p.grad).astype(p.value.dtype)
    else:
        t = state.step_count + 1
        b1, b2 = state.beta1, state.beta2
        corr1 = 1.0 - b1 ** t
        corr2 = 1.0 - b2 ** t
        for name, p in params.items():
            if name not in state.m:
                state.m[name] = np.zeros_like(p.value, dtype=np.float64)
                state.v[name] = np.zeros_like(p.value, dtype=np.float64)
            g = p.grad.astype(np.float64)
            m, v = state.m[name], state.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
            p.value -= update.astype(p.value.dtype)

    params.zero_grad()
    state.step_count += 1
