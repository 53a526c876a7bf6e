"""Synthetic city with a known congestion-generating process.

Everything is a pure function of :class:`CitySpec`.  A handful of activity
centres drive three observable rasters (POI counts, real-estate prices,
media-text embeddings); the latent congestion probability p[h, w, t] mixes
local activity, neighbourhood pressure, price, and a spatially varying
morning/evening commuting phase with a two-peak daily profile.  All latent
fields vary smoothly over a few cells, and the logit is squashed so that most
(grid, t) pairs sit at a moderate rather than a near-certain probability.
Labels are Bernoulli(p) draws flipped with probability ``noise``.  Because p
is kept, the Bayes-optimal accuracy of any split is computable exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import binio
from .errors import ConfigError, FormatError
from .grid import (FeatureLayer, QueryLocation, TrafficRecord, decode_raster, gfl_bytes,
                   load_feature_layer, load_traffic_records, store_feature_layer,
                   store_traffic_records)

log = logging.getLogger(__name__)

ORACLE_MAGIC = b"GORACLE1"
N_POI = 23
MAX_ATTEMPTS = 10
HEADROOM = 0.10

# logit coefficients of the generating process
COEFFS = {
    "bias": -0.9,
    "activity": 2.0,
    "pressure": 1.25,
    "morning": 4.7,
    "morning_price": 3.0,
    "evening": 4.7,
    "evening_activity": 1.6,
}
# smoothing scales are divisors of max(H, W); weights scale the standardised field
FIELDS = {
    "development_scale": 16,
    "development_weight": 0.7,
    "poi_smoothing": 32,
    "price_noise_scale": 16,
    "price_noise_weight": 0.8,
    "phase_scale": 10,
}
# logit -> amplitude * tanh((logit - quantile(logit, centre)) / width)
SQUASH = {"amplitude": 1.4, "width": 0.7, "centre": 0.5}

LAYER_FILES = {"media_text": "media_text.gfl", "real_estate": "real_estate.gfl", "poi": "poi.gfl"}
RECORDS_FILE = "traffic.gtr"
ORACLE_FILE = "oracle.bin"


@dataclass(frozen=True)
class CitySpec:
    height: int = 48
    width: int = 48
    seed: int = 0
    n_centers: int = 6
    noise: float = 0.1
    time_points: int = 216
    record_fraction: float = 0.4
    d_mt: int = 32
    label_mode: str = "bernoulli"  # or "threshold": label = [p >= 0.5] before flips
    enforce_headroom: bool = True

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ConfigError(f"city must be at least 2x2, got {self.height}x{self.width}")
        if not 0 <= self.noise < 0.5:
            raise ConfigError(f"noise must lie in [0, 0.5), got {self.noise}")
        if not 0 < self.record_fraction <= 1:
            raise ConfigError(f"record_fraction must lie in (0, 1], got {self.record_fraction}")
        if self.n_centers < 1 or self.time_points < 1 or self.d_mt < 1:
            raise ConfigError("n_centers, time_points and d_mt must be positive")
        if self.label_mode not in ("bernoulli", "threshold"):
            raise ConfigError(f"unknown label_mode {self.label_mode!r}")


@dataclass
class Oracle:
    spec: CitySpec
    p: np.ndarray  # (H, W, T) float32 congestion probability before flips
    centers: list
    coefficients: dict
    records_digest: str
    effective_seed: int
    record_cells: list = field(default_factory=list)  # flat 0-based indices of recorded grids
    attempts: int = 1

    def header(self) -> dict:
        return {"version": 1, "spec": asdict(self.spec), "centers": self.centers,
                "coefficients": self.coefficients, "records_digest": self.records_digest,
                "record_cells": [int(c) for c in self.record_cells], "effective_seed": self.effective_seed, "attempts": self.attempts}


@dataclass
class SyntheticCity:
    layers: dict  # modality -> FeatureLayer (raw, unnormalised)
    records: list
    oracle: Oracle
    latents: dict = field(default_factory=dict)


def rush_profile(t_points: int) -> tuple:
    """Morning and evening Gaussian bumps over T daily slots."""
    t = np.arange(t_points, dtype=np.float64)
    width = t_points / 24
    morning = np.exp(-0.5 * ((t - (t_points * 8) // 24) / width) ** 2)
    evening = np.exp(-0.5 * ((t - (t_points * 18) // 24) / width) ** 2)
    return morning, evening


def _standardize(x):
    sd = x.std()
    return (x - x.mean()) / (sd if sd > 0 else 1.0)


def records_digest(records) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(np.array([r.location.h, r.location.w], dtype="<u4").tobytes())
        h.update(r.labels.tobytes())
    return h.hexdigest()


def _generate_once(spec: CitySpec, seed: int) -> SyntheticCity:
    rng = np.random.default_rng(seed)
    H, W, T = spec.height, spec.width, spec.time_points
    L = max(H, W)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    n = spec.n_centers
    cy = rng.uniform(0.1, 0.9, n) * (H - 1)
    cx = rng.uniform(0.1, 0.9, n) * (W - 1)
    spread = rng.uniform(0.06, 0.16, n) * L
    weight = rng.uniform(0.6, 1.0, n)
    bumps = weight[:, None, None] * np.exp(
        -((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2)
        / (2 * spread[:, None, None] ** 2))
    prox = bumps.sum(axis=0)
    prox /= prox.max()

    # POI counts: centre-driven intensity times a smooth development factor
    f = FIELDS
    development = _standardize(gaussian_filter(rng.normal(0.0, 1.0, (H, W)), sigma=L / f["development_scale"],
                                               mode="wrap"))
    mix = rng.dirichlet(np.full(N_POI, 0.4), n)
    intensity = 0.15 + 6.0 * np.einsum("khw,kc->hwc", bumps, mix)
    intensity *= np.exp(f["development_weight"] * development)[:, :, None]
    counts = rng.poisson(intensity).astype(np.float64)
    # the published layer is per-category counts smoothed over neighbouring grids
    counts = gaussian_filter(counts, sigma=(L / f["poi_smoothing"], L / f["poi_smoothing"], 0), mode="nearest")
    activity = _standardize(np.log1p(counts.sum(axis=2)))
    pressure = _standardize(gaussian_filter(activity, sigma=L / 8, mode="constant"))

    # real estate: distance-decay log price, missing on some grids
    has_price = rng.random((H, W)) < 0.55 + 0.4 * prox
    price_noise = _standardize(gaussian_filter(rng.normal(0.0, 1.0, (H, W)), sigma=L / f["price_noise_scale"],
                                               mode="wrap"))
    log_price = 1.2 * prox + f["price_noise_weight"] * price_noise
    price = np.where(has_price, np.exp(8.5 + log_price), 0.0)
    price_z = np.where(has_price, _standardize(log_price), 0.0)

    # commuting phase: share of the evening peak; smooth field plus a little jitter
    field_ = _standardize(gaussian_filter(rng.normal(0.0, 1.0, (H, W)), sigma=L / f["phase_scale"], mode="wrap"))
    phase = 1.0 / (1.0 + np.exp(-(1.2 * field_ + 0.2 * rng.normal(0.0, 1.0, (H, W)))))

    # media text: random projection of (proximity, phase) plus noise
    has_text = rng.random((H, W)) < 0.8 + 0.2 * prox
    proj = rng.normal(0.0, 1.0, (3, spec.d_mt)) / np.sqrt(3)
    basis = np.stack([prox, phase, np.ones_like(prox)], axis=2)
    text = basis @ proj + 0.05 * rng.normal(0.0, 1.0, (H, W, spec.d_mt))
    text = np.where(has_text[:, :, None], text, 0.0)

    c = COEFFS
    morning, evening = rush_profile(T)
    base = c["bias"] + c["activity"] * activity + c["pressure"] * pressure
    am = 2 * (1 - phase) * (c["morning"] + c["morning_price"] * price_z)
    pm = 2 * phase * (c["evening"] + c["evening_activity"] * activity)
    logit = base[:, :, None] + am[:, :, None] * morning + pm[:, :, None] * evening
    logit = SQUASH["amplitude"] * np.tanh((logit - np.quantile(logit, SQUASH["centre"])) / SQUASH["width"])
    p = (1.0 / (1.0 + np.exp(-logit))).astype(np.float32)

    n_rec = max(1, int(round(spec.record_fraction * H * W)))
    cells = np.sort(rng.choice(H * W, size=n_rec, replace=False))
    rows, cols = np.divmod(cells, W)
    p_rec = p[rows, cols]
    if spec.label_mode == "bernoulli":
        raw = rng.random(p_rec.shape) < p_rec
    else:
        raw = p_rec >= 0.5
    flips = rng.random(p_rec.shape) < spec.noise
    labels = (raw ^ flips).astype(np.uint8)
    records = [TrafficRecord(QueryLocation.from_index(r, q), labels[i]) for i, (r, q) in enumerate(zip(rows, cols))]

    layers = {
        "media_text": FeatureLayer("media_text", text.astype(np.float32)),
        "real_estate": FeatureLayer("real_estate", price[:, :, None].astype(np.float32)),
        "poi": FeatureLayer("poi", counts.astype(np.float32)),
    }
    centers = [{"h": float(a + 1), "w": float(b + 1), "spread": float(s), "weight": float(wt)}
               for a, b, s, wt in zip(cy, cx, spread, weight)]
    oracle = Oracle(spec, p, centers, {**c, **SQUASH, **FIELDS}, records_digest(records), seed, [int(v) for v in cells])
    latents = {"activity": activity, "pressure": pressure, "price_z": price_z, "phase": phase, "prox": prox}
    return SyntheticCity(layers, records, oracle, latents)


def majority_rate(oracle: Oracle, records) -> float:
    q = _label_probability(oracle, records)
    m = float(q.mean())
    return max(m, 1 - m)


def _label_probability(oracle: Oracle, records):
    p = _record_p(oracle, records).astype(np.float64)
    rho = oracle.spec.noise
    return p * (1 - rho) + (1 - p) * rho


def _record_p(oracle: Oracle, records):
    rows = np.array([r.location.h - 1 for r in records])
    cols = np.array([r.location.w - 1 for r in records])
    return oracle.p[rows, cols]


def generate_city(spec: CitySpec) -> SyntheticCity:
    """Generate layers, records and oracle; retry with derived seeds until
    the Bayes accuracy clears the majority rate by the headroom margin."""
    seed = spec.seed
    for attempt in range(1, MAX_ATTEMPTS + 1):
        city = _generate_once(spec, seed)
        city.oracle.attempts = attempt
        if not spec.enforce_headroom:
            return city
        gap = bayes_accuracy(city.oracle, city.records) - majority_rate(city.oracle, city.records)
        if gap >= HEADROOM:
            return city
        log.warning("seed %d gives Bayes headroom %.3f < %.2f; regenerating", seed, gap, HEADROOM)
        seed = int(np.random.SeedSequence([spec.seed, attempt]).generate_state(1)[0])
    raise ConfigError(f"no seed within {MAX_ATTEMPTS} attempts reached Bayes headroom {HEADROOM}")


def bayes_accuracy(oracle: Oracle, records, check: bool = True) -> float:
    """Mean over (grid, t) of (1-rho)*max(p, 1-p) + rho*min(p, 1-p).

    With ``check`` the records must be the exact set produced with this
    oracle (or a subset drawn from it); a digest/label mismatch raises.
    """
    if not records:
        raise ConfigError("bayes_accuracy needs at least one record")
    if check:
        _check_records(oracle, records)
    p = _record_p(oracle, records).astype(np.float64)
    rho = oracle.spec.noise
    hi, lo = np.maximum(p, 1 - p), np.minimum(p, 1 - p)
    return float(((1 - rho) * hi + rho * lo).mean())


def _check_records(oracle: Oracle, records):
    H, W, T = oracle.p.shape
    recorded = set(oracle.record_cells)
    for r in records:
        if not (1 <= r.location.h <= H and 1 <= r.location.w <= W):
            raise ConfigError(f"record ({r.location.h},{r.location.w}) lies outside the oracle grid")
        if (r.location.h - 1) * W + (r.location.w - 1) not in recorded:
            raise ConfigError(f"record ({r.location.h},{r.location.w}) was not generated with this oracle")
        if len(r.labels) != T:
            raise ConfigError("record length does not match the oracle's time points")
    if len(records) == len(recorded) and records_digest(sorted(records, key=lambda r: r.location)) != oracle.records_digest:
        raise ConfigError("records do not match this oracle (digest mismatch)")


# ---------------------------------------------------------------- files

def store_oracle(oracle: Oracle, path) -> None:
    block = gfl_bytes(FeatureLayer("media_text", oracle.p), modality="oracle_p")
    binio.write_container(path, ORACLE_MAGIC, oracle.header(), block)


def load_oracle(path) -> Oracle:
    header, payload, off = binio.read_container(path, ORACLE_MAGIC, f"oracle file {path}")
    try:
        spec = CitySpec(**header["spec"])
        _, p = decode_raster(payload, "oracle p block")
    except (KeyError, TypeError) as exc:
        raise FormatError(f"oracle header incomplete: {exc}", offset=len(ORACLE_MAGIC) + 4) from None
    return Oracle(spec, p, header["centers"], header["coefficients"], header["records_digest"],
                  header["effective_seed"], header.get("record_cells", []), header.get("attempts", 1))


def write_city(city: SyntheticCity, out_dir) -> dict:
    import os
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for modality, layer in city.layers.items():
        paths[modality] = os.path.join(out_dir, LAYER_FILES[modality])
        store_feature_layer(layer, paths[modality])
    paths["records"] = os.path.join(out_dir, RECORDS_FILE)
    store_traffic_records(city.records, paths["records"])
    paths["oracle"] = os.path.join(out_dir, ORACLE_FILE)
    store_oracle(city.oracle, paths["oracle"])
    return paths


def read_dataset(data_dir):
    """Load (layers, records, oracle-or-None) from a directory written by
    :func:`write_city` (the oracle is optional for real data)."""
    import os
    layers = {m: load_feature_layer(os.path.join(data_dir, f)) for m, f in LAYER_FILES.items()}
    records = load_traffic_records(os.path.join(data_dir, RECORDS_FILE))
    oracle_path = os.path.join(data_dir, ORACLE_FILE)
    oracle = load_oracle(oracle_path) if os.path.exists(oracle_path) else None
    return layers, records, oracle


def spec_json(spec: CitySpec) -> str:
    return json.dumps(asdict(spec), sort_keys=True)
