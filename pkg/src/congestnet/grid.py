"""Gridded-map data model: feature layers, traffic records, query
locations, normalisation, and the train/validation/test split.

Coordinates are 1-based ``(h, w)`` wherever a user or a file sees them
and 0-based ``(row, col)`` inside arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import binio
from .errors import ConfigError, FormatError

GFL_MAGIC = b"GFL1"
GTR_MAGIC = b"GTR1"
FORMAT_VERSION = 1

MODALITIES = ("media_text", "real_estate", "poi")
SHORT = {"mt": "media_text", "re": "real_estate", "pi": "poi"}
SHORT_OF = {v: k for k, v in SHORT.items()}
FIXED_CHANNELS = {"real_estate": 1, "poi": 23}
DEFAULT_TIME_POINTS = 216


def modality_name(m: str) -> str:
    m = SHORT.get(m, m)
    if m not in MODALITIES:
        raise ConfigError(f"unknown modality {m!r}; expected one of {MODALITIES}")
    return m


@dataclass(frozen=True)
class GridMap:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"grid must be at least 1x1, got {self.height}x{self.width}")

    @property
    def cells(self) -> int:
        return self.height * self.width

    def contains(self, loc: "QueryLocation") -> bool:
        return 1 <= loc.h <= self.height and 1 <= loc.w <= self.width

    def check(self, loc: "QueryLocation") -> None:
        if not self.contains(loc):
            raise ConfigError(f"location ({loc.h},{loc.w}) outside {self.height}x{self.width} grid")

    def locations(self):
        return [QueryLocation(h, w) for h in range(1, self.height + 1) for w in range(1, self.width + 1)]


@dataclass(frozen=True, order=True)
class QueryLocation:
    """A grid cell x_{h,w} in 1-based paper coordinates."""
    h: int
    w: int

    @property
    def index(self) -> tuple:
        return self.h - 1, self.w - 1

    @classmethod
    def from_index(cls, row: int, col: int) -> "QueryLocation":
        return cls(int(row) + 1, int(col) + 1)

    @classmethod
    def parse(cls, text: str) -> "QueryLocation":
        h, w = (int(v) for v in text.split(","))
        return cls(h, w)


@dataclass
class FeatureLayer:
    modality: str
    data: np.ndarray  # (H, W, C) float32
    empty_mask: np.ndarray = None  # (H, W) bool, True where the grid has no source data
    normalized: bool = False

    def __post_init__(self):
        self.modality = modality_name(self.modality)
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[2] < 1:
            raise ConfigError(f"feature layer must be (H, W, C) with C >= 1, got {self.data.shape}")
        want = FIXED_CHANNELS.get(self.modality)
        if want is not None and self.channels != want:
            raise ConfigError(f"{self.modality} layer has {self.channels} channels, expected {want}")
        if self.empty_mask is None:
            self.empty_mask = ~self.data.any(axis=2)
        else:
            self.empty_mask = np.asarray(self.empty_mask, dtype=bool)
            if self.empty_mask.shape != self.data.shape[:2]:
                raise ConfigError(f"empty mask {self.empty_mask.shape} does not match layer {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def grid(self) -> GridMap:
        return GridMap(self.data.shape[0], self.data.shape[1])

    def __eq__(self, other):
        if not isinstance(other, FeatureLayer):
            return NotImplemented
        return (self.modality == other.modality and self.normalized == other.normalized
                and self.data.shape == other.data.shape
                and self.data.tobytes() == other.data.tobytes()
                and np.array_equal(self.empty_mask, other.empty_mask))


@dataclass
class TrafficRecord:
    location: QueryLocation
    labels: np.ndarray  # (T,) uint8 in {0, 1}

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 1 or (self.labels > 1).any():
            raise ConfigError(f"labels at ({self.location.h},{self.location.w}) must be a binary vector")

    def __eq__(self, other):
        if not isinstance(other, TrafficRecord):
            return NotImplemented
        return self.location == other.location and np.array_equal(self.labels, other.labels)


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    seed: int = 0
    mode: str = "iid"

    def subset(self, name: str) -> list:
        key = {"val": "validation"}.get(name, name)
        if key not in ("train", "validation", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, key)

    def to_dict(self) -> dict:
        def enc(locs):
            return [[q.h, q.w] for q in locs]
        return {"seed": self.seed, "mode": self.mode, "train": enc(self.train),
                "validation": enc(self.validation), "test": enc(self.test)}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        def dec(items):
            return [QueryLocation(int(h), int(w)) for h, w in items]
        return cls(dec(d["train"]), dec(d["validation"]), dec(d["test"]), int(d["seed"]), d.get("mode", "iid"))


# ---------------------------------------------------------------- GFL

def gfl_bytes(layer: FeatureLayer, modality: str | None = None, extra: dict | None = None) -> bytes:
    h, w, c = layer.data.shape
    header = {"version": FORMAT_VERSION, "modality": modality or layer.modality, "height": h,
              "width": w, "channels": c, "dtype": "f32", "normalized": bool(layer.normalized)}
    if extra:
        header.update(extra)
    return binio.pack(GFL_MAGIC, header, binio.f32_bytes(layer.data))


def store_feature_layer(layer: FeatureLayer, path) -> None:
    data = gfl_bytes(layer)
    with open(path, "wb") as fh:
        fh.write(data)


def write_raster(path, array: np.ndarray, modality: str, extra: dict | None = None) -> None:
    """GFL-encode an arbitrary (H, W, C) raster (masks, heatmaps, oracle p)."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    header = {"version": FORMAT_VERSION, "modality": modality, "height": h, "width": w,
              "channels": c, "dtype": "f32", "normalized": False}
    if extra:
        header.update(extra)
    with open(path, "wb") as fh:
        fh.write(binio.pack(GFL_MAGIC, header, binio.f32_bytes(arr)))


def decode_raster(data: bytes, what: str = "GFL file"):
    """Return (header, array) for any GFL block without modality checks."""
    header, payload, off = binio.unpack(data, GFL_MAGIC, what)
    try:
        h, w, c = int(header["height"]), int(header["width"]), int(header["channels"])
    except (KeyError, TypeError, ValueError):
        raise FormatError(f"{what} header lacks height/width/channels", offset=len(GFL_MAGIC) + 4) from None
    if header.get("dtype", "f32") != "f32":
        raise FormatError(f"{what} dtype {header.get('dtype')!r} unsupported", offset=len(GFL_MAGIC) + 4)
    if h < 1 or w < 1 or c < 1:
        raise FormatError(f"{what} has non-positive dims {h}x{w}x{c}", offset=len(GFL_MAGIC) + 4)
    need = h * w * c * 4
    if len(payload) < need:
        raise FormatError(f"truncated {what}: payload {len(payload)} bytes, header implies {need}",
                          offset=off + len(payload))
    if len(payload) > need:
        raise FormatError(f"{what} has {len(payload) - need} trailing bytes", offset=off + need)
    arr = np.frombuffer(payload, dtype=binio.F32, count=h * w * c).astype(np.float32).reshape(h, w, c)
    return header, arr


def read_raster(path):
    with open(path, "rb") as fh:
        return decode_raster(fh.read(), f"GFL file {path}")


def load_feature_layer(path) -> FeatureLayer:
    with open(path, "rb") as fh:
        data = fh.read()
    header, arr = decode_raster(data, f"GFL file {path}")
    hdr_off = len(GFL_MAGIC) + 4
    modality = header.get("modality")
    if modality not in MODALITIES:
        raise FormatError(f"GFL modality {modality!r} is not a feature modality", offset=hdr_off)
    want = FIXED_CHANNELS.get(modality)
    if want is not None and arr.shape[2] != want:
        raise FormatError(f"{modality} layer has {arr.shape[2]} channels, expected {want}", offset=hdr_off)
    return FeatureLayer(modality, arr, normalized=bool(header.get("normalized", False)))


def normalize_layer(layer: FeatureLayer) -> FeatureLayer:
    """Per-channel min-max rescale over non-empty grids.

    Empty grids stay exactly zero; a channel that is constant over the
    non-empty grids maps to 0.5 there.  The empty mask is carried over
    unchanged, which makes the operation idempotent.
    """
    data = layer.data.astype(np.float64)
    keep = ~layer.empty_mask
    out = np.zeros_like(data)
    if keep.any():
        vals = data[keep]  # (n, C)
        lo, hi = vals.min(axis=0), vals.max(axis=0)
        varying = hi > lo
        scaled = np.full_like(vals, 0.5)
        scaled[:, varying] = (vals[:, varying] - lo[varying]) / (hi[varying] - lo[varying])
        out[keep] = scaled
    return FeatureLayer(layer.modality, out.astype(np.float32), layer.empty_mask.copy(), normalized=True)


# ---------------------------------------------------------------- GTR

def store_traffic_records(records: Sequence[TrafficRecord], path) -> None:
    if not records:
        raise ConfigError("no traffic records to store")
    t = len(records[0].labels)
    parts = []
    for r in records:
        if len(r.labels) != t:
            raise ConfigError(f"record ({r.location.h},{r.location.w}) has {len(r.labels)} labels, expected {t}")
        parts.append(np.array([r.location.h, r.location.w], dtype=binio.U32).tobytes())
        parts.append(r.labels.astype(np.uint8).tobytes())
    header = {"version": FORMAT_VERSION, "count": len(records), "time_points": t}
    binio.write_container(path, GTR_MAGIC, header, b"".join(parts))


def load_traffic_records(path) -> list:
    header, payload, off = binio.read_container(path, GTR_MAGIC, f"GTR file {path}")
    try:
        count, t = int(header["count"]), int(header["time_points"])
    except (KeyError, TypeError, ValueError):
        raise FormatError("GTR header lacks count/time_points", offset=len(GTR_MAGIC) + 4) from None
    if t < 1 or count < 0:
        raise FormatError(f"GTR header has invalid count={count} time_points={t}", offset=len(GTR_MAGIC) + 4)
    size = 8 + t
    if len(payload) != count * size:
        short = len(payload) < count * size
        bad = (len(payload) // size) * size if short else count * size
        raise FormatError(f"GTR payload is {len(payload)} bytes, header implies {count} records of "
                          f"{t} time points ({count * size} bytes)", offset=off + bad)
    buf = np.frombuffer(payload, dtype=np.uint8).reshape(count, size) if count else np.zeros((0, size), np.uint8)
    coords = buf[:, :8].copy().view(binio.U32).reshape(count, 2).astype(np.int64)
    labels = buf[:, 8:]
    records, seen = [], set()
    for i in range(count):
        h, w = int(coords[i, 0]), int(coords[i, 1])
        roff = off + i * size
        if h < 1 or w < 1:
            raise FormatError(f"record {i} has non 1-based location ({h},{w})", offset=roff)
        if (h, w) in seen:
            raise FormatError(f"duplicate record location ({h},{w})", offset=roff)
        bad = np.flatnonzero(labels[i] > 1)
        if bad.size:
            raise FormatError(f"record {i} at ({h},{w}) has label {labels[i][bad[0]]} outside {{0,1}}",
                              offset=roff + 8 + int(bad[0]))
        seen.add((h, w))
        records.append(TrafficRecord(QueryLocation(h, w), labels[i].copy()))
    return records


# ---------------------------------------------------------------- split

TEST_FRACTION = 0.2
VALIDATION_FRACTION = 0.2


def split_sizes(n: int) -> tuple:
    """(train, validation, test) counts: test = 20% of all, validation = 20%
    of the remainder, both rounded up."""
    n_test = math.ceil(TEST_FRACTION * n)
    n_val = math.ceil(VALIDATION_FRACTION * (n - n_test))
    return n - n_test - n_val, n_val, n_test


def split_dataset(records: Sequence[TrafficRecord], seed: int = 0, mode: str = "iid",
                  block_size: int = 8) -> DatasetSplit:
    """Seeded partition of recorded grids into train / validation / test.

    ``iid`` shuffles grids uniformly.  ``blocks`` shuffles contiguous
    ``block_size`` x ``block_size`` super-blocks and fills test, then
    validation, then train with whole blocks.
    """
    if len(records) < 10:
        raise ConfigError(f"need at least 10 records to split, got {len(records)}")
    locs = [r.location for r in records]
    if len(set(locs)) != len(locs):
        raise ConfigError("records contain duplicate locations")
    rng = np.random.default_rng(seed)
    _, n_val, n_test = split_sizes(len(locs))
    if mode == "iid":
        order = [locs[i] for i in rng.permutation(len(locs))]
        test = order[:n_test]
        val = order[n_test:n_test + n_val]
        train = order[n_test + n_val:]
    elif mode == "blocks":
        groups: dict = {}
        for q in sorted(locs):
            groups.setdefault(((q.h - 1) // block_size, (q.w - 1) // block_size), []).append(q)
        keys = sorted(groups)
        keys = [keys[i] for i in rng.permutation(len(keys))]
        test, val, train = [], [], []
        for key in keys:
            if len(test) < n_test:
                test.extend(groups[key])
            elif len(val) < n_val:
                val.extend(groups[key])
            else:
                train.extend(groups[key])
    else:
        raise ConfigError(f"unknown split mode {mode!r}")
    return DatasetSplit(train, val, test, seed, mode)
