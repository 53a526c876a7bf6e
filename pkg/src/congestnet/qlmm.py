"""Query Location Mapping Module.

A query cell becomes an H x W prior mask (bivariate normal density at every
cell centre, normalised to sum to one, or a one-hot ablation mask), which a
small conv stack maps to the location-aware representation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import ConfigError
from .grid import GridMap, QueryLocation
from .layers import add_conv_stack, conv_stack
from .optim import Parameters
from .tensor import Tensor, default_dtype


@dataclass(frozen=True)
class MaskConfig:
    covariance: tuple = ((1.0, 0.0), (0.0, 1.0))  # grid-cell units squared
    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind not in ("gaussian", "onehot"):
            raise ConfigError(f"mask kind must be gaussian or onehot, got {self.kind!r}")
        _check_covariance(np.asarray(self.covariance, dtype=np.float64))

    @classmethod
    def isotropic(cls, sigma: float, kind: str = "gaussian") -> "MaskConfig":
        s2 = float(sigma) ** 2
        return cls(((s2, 0.0), (0.0, s2)), kind)


@dataclass
class LocationMask:
    center: QueryLocation
    matrix: np.ndarray  # (H, W) float64, sums to 1
    kind: str = "gaussian"


@dataclass
class MappedRepresentation:
    tensor: Tensor


def _check_covariance(cov: np.ndarray) -> np.ndarray:
    if cov.shape != (2, 2) or not np.isfinite(cov).all():
        raise ConfigError(f"covariance must be a finite 2x2 matrix, got shape {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
        raise ConfigError("covariance must be symmetric")
    eig = np.linalg.eigvalsh(cov)
    if eig.min() <= 0:
        raise ConfigError(f"covariance must be positive definite (eigenvalues {eig.tolist()})")
    return cov


def gaussian_mask(center: QueryLocation, covariance, grid: GridMap) -> LocationMask:
    """Density of N(center, covariance) at every cell centre, normalised to sum 1.

    Densities are formed in float64 relative to the centre value (the
    log-density is shifted by its maximum before exponentiating), so the
    centre always keeps weight 1 before normalisation; when every other cell
    underflows the result is exactly the one-hot mask.
    """
    grid.check(center)
    cov = _check_covariance(np.asarray(covariance, dtype=np.float64))
    prec = np.linalg.inv(cov)
    dh = np.arange(1, grid.height + 1, dtype=np.float64)[:, None] - center.h
    dw = np.arange(1, grid.width + 1, dtype=np.float64)[None, :] - center.w
    quad = prec[0, 0] * dh * dh + 2 * prec[0, 1] * dh * dw + prec[1, 1] * dw * dw
    # the 1/(2 pi sqrt|cov|) factor cancels in the normalisation
    dens = np.exp(-0.5 * (quad - quad.min()))
    return LocationMask(center, dens / dens.sum(), "gaussian")


def onehot_mask(center: QueryLocation, grid: GridMap) -> LocationMask:
    grid.check(center)
    m = np.zeros((grid.height, grid.width), dtype=np.float64)
    m[center.index] = 1.0
    return LocationMask(center, m, "onehot")


def build_mask(center: QueryLocation, cfg: ModelConfig) -> LocationMask:
    grid = GridMap(cfg.height, cfg.width)
    if cfg.mask_kind == "onehot":
        return onehot_mask(center, grid)
    s2 = cfg.mask_sigma ** 2
    return gaussian_mask(center, ((s2, 0.0), (0.0, s2)), grid)


def mask_input(mask: LocationMask) -> np.ndarray:
    """Network input for f^map: the mask rescaled so its peak is 1.

    The sum-to-one mask has peak values around 1 / (2 pi sigma^2); a
    positive rescale keeps the prior's shape while putting the input on the
    unit scale the conv initialisation assumes.
    """
    m = mask.matrix
    return (m / m.max())[:, :, None].astype(default_dtype())


def init_qlmm(params: Parameters, cfg: ModelConfig, rng) -> None:
    add_conv_stack(params, "qlmm.map", cfg.map_kernel, (1, *cfg.map_hidden, cfg.d_loc), rng, relu_last=False)


def map_location(mask, params: Parameters, cfg: ModelConfig) -> MappedRepresentation:
    """R^loc = f^map(M).  ``mask`` is a LocationMask or an already prepared
    (H, W, 1) input array from :func:`mask_input`."""
    x = mask_input(mask) if isinstance(mask, LocationMask) else mask
    if x.shape != (cfg.height, cfg.width, 1):
        raise ConfigError(f"mask shape {x.shape[:2]} does not match grid {(cfg.height, cfg.width)}")
    out = conv_stack(params, "qlmm.map", Tensor(x), len(cfg.map_hidden) + 1, relu_last=False)
    return MappedRepresentation(out)
