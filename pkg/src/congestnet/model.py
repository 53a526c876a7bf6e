"""The assembled network: MFGM -> meta, QLMM -> mapped, RFPM -> scores."""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .grid import QueryLocation
from .mfgm import MetaRepresentation, init_mfgm, run_mfgm
from .optim import Parameters
from .qlmm import build_mask, init_qlmm, map_location, mask_input
from .rfpm import PredictionVector, init_rfpm, predict
from .tensor import Tensor, no_grad

MFGM_PREFIX = "mfgm."
FAST_PREFIXES = ("qlmm.", "rfpm.")


def init_params(cfg: ModelConfig, seed: int = 0) -> Parameters:
    """Seeded initialisation.  Each module draws from its own child stream,
    so QLMM/RFPM start identically whatever MFGM variant is configured."""
    rng_mfgm, rng_qlmm, rng_rfpm = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    params = Parameters()
    init_mfgm(params, cfg, rng_mfgm)
    init_qlmm(params, cfg, rng_qlmm)
    init_rfpm(params, cfg, rng_rfpm)
    return params


class CongestionModel:
    def __init__(self, cfg: ModelConfig, params: Parameters | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        self._masks: dict = {}

    def mask_input(self, q: QueryLocation) -> np.ndarray:
        x = self._masks.get(q)
        if x is None:
            x = mask_input(build_mask(q, self.cfg))
            self._masks[q] = x
        return x

    def meta(self, layers: dict) -> MetaRepresentation:
        return run_mfgm(layers, self.params, self.cfg)

    def forward_query(self, meta: Tensor, q: QueryLocation) -> Tensor:
        loc = map_location(self.mask_input(q), self.params, self.cfg)
        return predict(meta, loc.tensor, self.params, self.cfg)

    def predict_vector(self, meta: Tensor, q: QueryLocation, threshold: float | None = None) -> PredictionVector:
        with no_grad():
            scores = self.forward_query(meta, q).value
        return PredictionVector(q, scores, self.cfg.threshold if threshold is None else threshold)

    def frozen_meta(self, layers: dict) -> MetaRepresentation:
        with no_grad():
            return self.meta(layers).freeze()

    def full_predict(self, layers: dict, q: QueryLocation) -> PredictionVector:
        """Uncached pipeline for one query: MFGM runs again every call."""
        meta = self.frozen_meta(layers)
        return self.predict_vector(meta.tensor, q)
