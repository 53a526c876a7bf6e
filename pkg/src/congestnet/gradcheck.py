"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericError
from .optim import Parameters
from .tensor import Tensor, trace_relu


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)  # parameter name -> worst relative error
    checked: int = 0
    masked: int = 0  # scalars skipped because a perturbation crossed a relu kink

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)


def _evaluate(closure):
    with trace_relu() as pattern:
        loss = closure()
    return float(loss.value), pattern


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(params: Parameters, closure: Callable[[], Tensor], eps: float = 1e-3,
               max_scalars: int = 10_000, seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare backprop gradients with central differences for every parameter scalar.

    ``closure`` must rebuild the forward graph from the current parameter
    values and return a scalar loss.  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.  A scalar whose +/-eps perturbation
    flips the sign of any relu input is excluded (kink masking).  Above
    ``max_scalars`` total scalars a seeded uniform subsample is checked.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ConfigError(f"eps must lie in [1e-4, 1e-2], got {eps}")

    params.zero_grad()
    loss = closure()
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in params.items()}
    params.zero_grad()

    base, base_pattern = _evaluate(closure)
    again, _ = _evaluate(closure)
    if base != again or base != float(loss.value):
        raise NumericError("loss closure is not deterministic (repeat evaluation differs)")

    sizes = [p.value.size for p in params.values()]
    total = int(sum(sizes))
    if total > max_scalars:
        picks = np.sort(np.random.default_rng(seed).choice(total, size=max_scalars, replace=False))
    else:
        picks = np.arange(total)
    offsets = np.cumsum([0] + sizes)

    report = GradCheckReport()
    names = list(params.keys())
    for flat in picks:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[i]
        p = params[name]
        idx = int(flat - offsets[i])
        view = p.value.reshape(-1)
        orig = view[idx]
        view[idx] = orig + eps
        plus, pat_plus = _evaluate(closure)
        view[idx] = orig - eps
        minus, pat_minus = _evaluate(closure)
        view[idx] = orig
        if not (_same_pattern(base_pattern, pat_plus) and _same_pattern(base_pattern, pat_minus)):
            report.masked += 1
            continue
        numeric = (plus - minus) / (2 * eps)
        a = float(analytic[name].reshape(-1)[idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        report.errors[name] = max(report.errors.get(name, 0.0), rel)
        report.checked += 1
    return report
