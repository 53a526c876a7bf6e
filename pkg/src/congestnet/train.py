"""Training loop, evaluation, threshold tuning, and the ablation harness."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ModelConfig, TrainConfig
from .errors import ConfigError, NumericError
from .grid import FeatureLayer, normalize_layer
from .metrics import MetricsReport
from .mfgm import MetaRepresentation
from .model import CongestionModel
from .optim import OptimizerState, Parameters, optimizer_step
from .tensor import Tensor, mse_loss, no_grad

log = logging.getLogger(__name__)

ABLATION_MODES = ("zero_meta", "onehot_mask", "unimodal_mt", "unimodal_re", "unimodal_pi")


@dataclass
class TrainResult:
    model: CongestionModel
    meta: MetaRepresentation
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_f1: float = 0.0
    steps: int = 0
    stopped_early: bool = False
    seconds: float = 0.0


def normalize_layers(layers: dict) -> dict:
    return {m: (l if l.normalized else normalize_layer(l)) for m, l in layers.items()}


def check_dims(layers: dict, records, cfg: ModelConfig) -> None:
    for m, layer in layers.items():
        if layer.data.shape[:2] != (cfg.height, cfg.width):
            raise ConfigError(f"{m} layer is {layer.data.shape[:2]}, config grid is {(cfg.height, cfg.width)}")
    want = {"media_text": cfg.d_mt, "real_estate": cfg.d_re, "poi": cfg.d_pi}
    for m, layer in layers.items():
        if layer.channels != want[m]:
            raise ConfigError(f"{m} layer has {layer.channels} channels, config expects {want[m]}")
    for r in records:
        if len(r.labels) != cfg.time_points:
            raise ConfigError(f"records carry {len(r.labels)} time points, config expects {cfg.time_points}")
        if not (1 <= r.location.h <= cfg.height and 1 <= r.location.w <= cfg.width):
            raise ConfigError(f"record ({r.location.h},{r.location.w}) outside the configured grid")


def train_step(model: CongestionModel, layers: dict, batch, opt: OptimizerState) -> float:
    """One optimisation step over a batch of training records.

    MFGM runs once; each query's mapped representation and prediction are
    backpropagated separately into a shared detached copy of the meta
    tensor, whose accumulated gradient then flows back through MFGM.  The
    resulting gradients equal those of the batch-mean loss.
    """
    params = model.params
    # overflow surfaces as NumericError from the finiteness checks instead
    with np.errstate(over="ignore", invalid="ignore"):
        meta = model.meta(layers)
        trainable_meta = meta.tensor.requires_grad
        meta_in = Tensor(meta.tensor.value, requires_grad=True) if trainable_meta else meta.tensor
        seed = np.asarray(1.0 / len(batch), dtype=np.float32)
        total = 0.0
        for r in batch:
            loss = mse_loss(model.forward_query(meta_in, r.location), r.labels)
            loss.backward(seed)
            total += float(loss.value)
        if trainable_meta:
            meta.tensor.backward(meta_in.grad)
    optimizer_step(opt, params)
    return total / len(batch)


def predict_scores(model: CongestionModel, meta: Tensor, locations) -> np.ndarray:
    """(n, T) float32 score matrix in the given order."""
    with no_grad():
        return np.stack([model.forward_query(meta, q).value for q in locations])


def metrics_from_scores(scores: np.ndarray, labels: np.ndarray, threshold: float) -> MetricsReport:
    return MetricsReport.from_labels(labels, scores >= threshold)


def tune_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    """Threshold in 0.01 steps maximising F1; ties keep the value closest to 0.5."""
    grid = np.round(np.arange(0.01, 1.0, 0.01), 2)
    grid = grid[np.argsort(np.abs(grid - 0.5), kind="stable")]
    best_t, best_f1 = 0.5, -1.0
    for t in grid:
        f1 = metrics_from_scores(scores, labels, t).f1
        if f1 > best_f1:
            best_t, best_f1 = float(t), f1
    return best_t


def train(layers: dict, records, split, cfg: ModelConfig, tcfg: TrainConfig, progress=None) -> TrainResult:
    """Fit the network on ``split.train`` with early stopping on validation F1.

    The parameters from the best validation epoch are restored before the
    frozen meta-representation is computed.
    """
    start = time.perf_counter()
    layers = normalize_layers(layers)
    check_dims(layers, records, cfg)
    by_loc = {r.location: r for r in records}
    train_recs = [by_loc[q] for q in split.train]
    val_recs = [by_loc[q] for q in split.validation]
    if not train_recs or not val_recs:
        raise ConfigError("training and validation splits must be non-empty")
    val_labels = np.stack([r.labels for r in val_recs])

    model = CongestionModel(cfg, seed=tcfg.seed)
    opt = OptimizerState(tcfg.optimizer, tcfg.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence(tcfg.seed).spawn(4)[3])
    result = TrainResult(model, None)
    best: Parameters | None = None
    bad = 0
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(train_recs))
        losses = []
        for b in range(0, len(order), tcfg.batch_size):
            batch = [train_recs[i] for i in order[b:b + tcfg.batch_size]]
            try:
                losses.append(train_step(model, layers, batch, opt))
            except NumericError as exc:
                raise NumericError(f"training diverged at step {opt.step_count + 1}: {exc}") from None
        with no_grad():
            meta = model.meta(layers).tensor
        scores = predict_scores(model, meta, [r.location for r in val_recs])
        val = metrics_from_scores(scores, val_labels, cfg.threshold)
        entry = {"epoch": epoch, "loss": float(np.mean(losses)), "val_f1": val.f1, "val_accuracy": val.accuracy}
        result.history.append(entry)
        if progress:
            progress(entry)
        log.info("epoch %d loss %.4f val F1 %.2f acc %.2f", epoch, entry["loss"], val.f1, val.accuracy)
        if val.f1 > result.best_val_f1 or best is None:
            result.best_val_f1, result.best_epoch, best, bad = val.f1, epoch, model.params.copy(), 0
        else:
            bad += 1
            if bad >= tcfg.patience:
                result.stopped_early = True
                break
    for name, t in best.items():
        model.params[name].value[...] = t.value
    result.steps = opt.step_count
    result.meta = model.frozen_meta(layers)
    result.seconds = time.perf_counter() - start
    return result


def evaluate(model: CongestionModel, meta: Tensor, records, threshold: float | None = None) -> MetricsReport:
    """Pooled confusion counts over every (grid, t) of ``records``."""
    if not records:
        raise ConfigError("nothing to evaluate")
    for r in records:
        if len(r.labels) != model.cfg.time_points:
            raise ConfigError(f"records carry {len(r.labels)} time points, model predicts {model.cfg.time_points}")
    scores = predict_scores(model, meta, [r.location for r in records])
    labels = np.stack([r.labels for r in records])
    return metrics_from_scores(scores, labels, model.cfg.threshold if threshold is None else threshold)


def ablation_config(mode: str, cfg: ModelConfig) -> ModelConfig:
    if mode == "full":
        return cfg
    if mode == "zero_meta":
        return replace(cfg, use_meta=False)
    if mode == "onehot_mask":
        return replace(cfg, mask_kind="onehot")
    if mode.startswith("unimodal_") and mode[len("unimodal_"):] in ("mt", "re", "pi"):
        return replace(cfg, modalities=(mode[len("unimodal_"):],))
    raise ConfigError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")


def run_ablation(mode: str, layers: dict, records, split, cfg: ModelConfig, tcfg: TrainConfig,
                 progress=None):
    """Train and test one arm under the same protocol as the full model.

    Returns (MetricsReport on the test split, TrainResult)."""
    arm = ablation_config(mode, cfg)
    result = train(layers, records, split, arm, tcfg, progress)
    by_loc = {r.location: r for r in records}
    report = evaluate(result.model, result.meta.tensor, [by_loc[q] for q in split.test])
    return report, result
