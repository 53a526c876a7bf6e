"""Run artefacts and the cached-meta inference path.

A finished training run leaves a checkpoint (all parameters plus the
configs, seed, split and history in its header) and a GMETA1 file holding
the frozen meta-representation.  :func:`fast_predict` answers queries from
those two files alone: it decodes only the QLMM and RFPM parameters and
never runs MFGM.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict

import numpy as np

from . import binio
from .config import ModelConfig, TrainConfig, write_config
from .errors import ConfigError, FormatError
from .grid import DatasetSplit, QueryLocation
from .mfgm import MetaRepresentation
from .model import FAST_PREFIXES, CongestionModel
from .optim import Parameters
from .rfpm import PredictionVector
from .tensor import Tensor

META_MAGIC = b"GMETA1"
CHECKPOINT_FILE = "checkpoint.gckpt"
META_FILE = "meta.gmeta"
CONFIG_FILE = "config.cfg"
SPLIT_FILE = "split.json"


def run_id(params: Parameters) -> str:
    """Identity of a trained run: digest of its parameter payload."""
    return binio.sha256(binio.params_payload(params))


# ------------------------------------------------------------- meta cache

def meta_bytes(meta: MetaRepresentation, config_hash: str, rid: str) -> bytes:
    value = meta.tensor.value
    if value.ndim != 3:
        raise ConfigError(f"meta-representation must be H x W x D, got shape {value.shape}")
    payload = binio.f32_bytes(value)
    H, W, D = value.shape
    header = {"version": 1, "height": H, "width": W, "d_meta": D, "config_hash": config_hash,
              "run_id": rid, "sha256": binio.sha256(payload)}
    return binio.pack(META_MAGIC, header, payload)


def save_meta_cache(path, meta: MetaRepresentation, config_hash: str, rid: str) -> None:
    data = meta_bytes(meta, config_hash, rid)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def decode_meta(data: bytes):
    header, payload, off = binio.unpack(data, META_MAGIC, "meta cache")
    try:
        shape = (int(header["height"]), int(header["width"]), int(header["d_meta"]))
        header["config_hash"], header["run_id"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"meta cache header lacks a valid field: {exc}", offset=len(META_MAGIC) + 4) from None
    need = int(np.prod(shape)) * 4
    if len(payload) != need:
        raise FormatError(f"meta cache payload is {len(payload)} bytes, header implies {need}", offset=off)
    digest = header.get("sha256")
    if digest is not None and binio.sha256(payload) != digest:
        raise FormatError("meta cache payload digest mismatch (file corrupted or tampered)", offset=off)
    value = np.frombuffer(payload, dtype=binio.F32).astype(np.float32).reshape(shape)
    meta = MetaRepresentation(Tensor(value), False, header["config_hash"]).freeze()
    return meta, header


def load_meta_cache(path):
    """Return (frozen MetaRepresentation, header)."""
    with open(path, "rb") as fh:
        return decode_meta(fh.read())


# ------------------------------------------------------------ run folders

def save_run(out_dir, result, cfg: ModelConfig, tcfg: TrainConfig, split: DatasetSplit,
             data_dir: str | None = None, extra: dict | None = None) -> dict:
    """Write checkpoint, meta cache, config and split; return their paths."""
    os.makedirs(out_dir, exist_ok=True)
    params = result.model.params
    rid = run_id(params)
    header = {
        "version": 1,
        "config": cfg.to_dict(),
        "train_config": asdict(tcfg),
        "config_hash": cfg.config_hash(),
        "seed": tcfg.seed,
        "run_id": rid,
        "data_dir": data_dir,
        "split": split.to_dict(),
        "history": result.history,
        "best_epoch": result.best_epoch,
        "steps": result.steps,
    }
    if extra:
        header.update(extra)
    paths = {
        "checkpoint": os.path.join(out_dir, CHECKPOINT_FILE),
        "meta_cache": os.path.join(out_dir, META_FILE),
        "config": os.path.join(out_dir, CONFIG_FILE),
        "split": os.path.join(out_dir, SPLIT_FILE),
    }
    binio.save_checkpoint(paths["checkpoint"], params, header)
    save_meta_cache(paths["meta_cache"], result.meta, cfg.config_hash(), rid)
    write_config(paths["config"], cfg, tcfg)
    with open(paths["split"], "w") as fh:
        json.dump(split.to_dict(), fh, sort_keys=True)
        fh.write("\n")
    return paths


def checkpoint_path(path) -> str:
    """Accept either a run folder or the checkpoint file itself."""
    return os.path.join(path, CHECKPOINT_FILE) if os.path.isdir(path) else path


def config_from_header(header: dict) -> ModelConfig:
    try:
        return ModelConfig(**header["config"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint header has no usable config: {exc}", offset=0) from None


def load_model(path, prefixes=None):
    """Return (CongestionModel, header) from a checkpoint or run folder."""
    params, header = binio.load_checkpoint(checkpoint_path(path), prefixes)
    cfg = config_from_header(header)
    if header.get("config_hash") != cfg.config_hash():
        raise FormatError("checkpoint config does not match its recorded config hash", offset=0)
    return CongestionModel(cfg, params), header


def load_split(header: dict) -> DatasetSplit:
    if "split" not in header:
        raise FormatError("checkpoint header carries no split", offset=0)
    return DatasetSplit.from_dict(header["split"])


# -------------------------------------------------------------- inference

def _check_cache(meta_header: dict, ckpt_header: dict, cfg: ModelConfig) -> None:
    if meta_header["config_hash"] != ckpt_header.get("config_hash"):
        raise ConfigError("meta cache was produced under a different config than the checkpoint; refusing stale cache")
    if meta_header["run_id"] != ckpt_header.get("run_id"):
        raise ConfigError("meta cache belongs to a different training run than the checkpoint; refusing stale cache")
    if (meta_header["height"], meta_header["width"], meta_header["d_meta"]) != (cfg.height, cfg.width, cfg.d_meta):
        raise ConfigError("meta cache dimensions do not match the checkpoint config")


def fast_predict(meta_cache, checkpoint, queries) -> list:
    """Predictions from a cached meta-representation; MFGM is never touched.

    Only ``qlmm.*`` and ``rfpm.*`` parameters are decoded from the
    checkpoint.  Results come back in the order of ``queries``.
    """
    meta, meta_header = load_meta_cache(meta_cache)
    model, header = load_model(checkpoint, FAST_PREFIXES)
    _check_cache(meta_header, header, model.cfg)
    return [model.predict_vector(meta.tensor, q) for q in queries]


def full_predict(checkpoint, layers: dict, queries) -> list:
    """Reference path: MFGM recomputed from the rasters for every query."""
    from .train import normalize_layers

    model, _ = load_model(checkpoint)
    layers = normalize_layers(layers)
    return [model.full_predict(layers, q) for q in queries]


def time_paths(meta_cache, checkpoint, layers: dict, queries) -> dict:
    """Per-query wall-clock of both paths, in milliseconds."""
    t0 = time.perf_counter()
    fast = fast_predict(meta_cache, checkpoint, queries)
    t1 = time.perf_counter()
    full = full_predict(checkpoint, layers, queries)
    t2 = time.perf_counter()
    n = max(len(queries), 1)
    return {"fast_ms_per_query": 1e3 * (t1 - t0) / n, "full_ms_per_query": 1e3 * (t2 - t1) / n,
            "fast": fast, "full": full}


def parse_locations(text: str) -> list:
    """``h,w[,h,w...]`` -> list of 1-based QueryLocation."""
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if len(parts) % 2:
        raise ConfigError(f"--loc needs h,w pairs, got {text!r}")
    try:
        nums = [int(p) for p in parts]
    except ValueError:
        raise ConfigError(f"--loc needs integer coordinates, got {text!r}") from None
    return [QueryLocation(nums[i], nums[i + 1]) for i in range(0, len(nums), 2)]
