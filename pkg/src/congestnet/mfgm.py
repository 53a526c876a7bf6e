"""Multimodal Fusion and Generalisation Module.

Three unimodal conv encoders (one per modality) turn the normalised
feature rasters into equally shaped representations; a fusion conv stack
mixes their channel-wise concatenation into the global meta-representation.
All convs are ``same``-padded so every tensor keeps the map's H x W.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import ConfigError
from .grid import SHORT, FeatureLayer
from .layers import add_conv_stack, conv_stack
from .optim import Parameters
from .tensor import Tensor, concat_channels


@dataclass
class UnimodalRepresentation:
    modality: str
    tensor: Tensor


@dataclass
class MetaRepresentation:
    tensor: Tensor
    frozen: bool = False
    source_config_hash: str = ""

    @property
    def shape(self):
        return self.tensor.shape

    def freeze(self) -> "MetaRepresentation":
        """Detached, read-only copy for caching and the fast path."""
        value = self.tensor.value.copy()
        value.setflags(write=False)
        t = Tensor.__new__(Tensor)
        t.value, t.grad, t.requires_grad, t.parents, t.backward_fn, t.op = value, None, False, (), None, "leaf"
        return MetaRepresentation(t, True, self.source_config_hash)

    def digest(self) -> str:
        return hashlib.sha256(self.tensor.value.tobytes()).hexdigest()


def init_mfgm(params: Parameters, cfg: ModelConfig, rng) -> None:
    if not cfg.use_meta:
        return
    for m in cfg.modalities:
        add_conv_stack(params, f"mfgm.enc_{m}", cfg.enc_kernel,
                       (cfg.input_channels(m), cfg.enc_hidden, cfg.d_ur), rng, relu_last=True)
    widths = (cfg.d_ur * len(cfg.modalities), *cfg.fusion_hidden, cfg.d_meta)
    add_conv_stack(params, "mfgm.fusion", cfg.fusion_kernel, widths, rng, relu_last=False)


def encode_unimodal(layer: FeatureLayer, params: Parameters, cfg: ModelConfig) -> UnimodalRepresentation:
    """U_m = f_m^uni(F_m)."""
    m = {v: k for k, v in SHORT.items()}[layer.modality]
    if not layer.normalized:
        raise ConfigError(f"{layer.modality} layer must be normalised before encoding")
    kernel = params.get(f"mfgm.enc_{m}.0.kernel")
    if kernel is None:
        raise ConfigError(f"no encoder parameters for modality {m!r}")
    if kernel.shape[2] != layer.channels:
        raise ConfigError(f"{layer.modality} encoder expects {kernel.shape[2]} channels, layer has {layer.channels}")
    if layer.data.shape[:2] != (cfg.height, cfg.width):
        raise ConfigError(f"{layer.modality} layer is {layer.data.shape[:2]}, model grid is {(cfg.height, cfg.width)}")
    x = Tensor(layer.data)
    return UnimodalRepresentation(m, conv_stack(params, f"mfgm.enc_{m}", x, 2, relu_last=True))


def fuse_multimodal(reps, params: Parameters, cfg: ModelConfig) -> MetaRepresentation:
    """R^meta = f^multi(concat[U_mt, U_re, U_pi]) in the configured modality order."""
    order = [r.modality for r in reps]
    if tuple(order) != cfg.modalities:
        raise ConfigError(f"unimodal representations must arrive in order {cfg.modalities}, got {tuple(order)}")
    shape = reps[0].tensor.shape
    for r in reps:
        if r.tensor.shape != shape:
            raise ConfigError(f"unimodal shapes differ: {r.tensor.shape} vs {shape}")
    joint = concat_channels([r.tensor for r in reps])
    n = len(cfg.fusion_hidden) + 1
    out = conv_stack(params, "mfgm.fusion", joint, n, relu_last=False)
    return MetaRepresentation(out, False, cfg.config_hash())


def substitute_zero_meta(shape) -> MetaRepresentation:
    """All-zero frozen meta-representation for the zero-meta ablation arm."""
    t = Tensor(np.zeros(tuple(shape), dtype=np.float32))
    return MetaRepresentation(t).freeze()


def run_mfgm(layers: dict, params: Parameters, cfg: ModelConfig) -> MetaRepresentation:
    """Full MFGM forward: encode each configured modality, then fuse."""
    if not cfg.use_meta:
        return substitute_zero_meta((cfg.height, cfg.width, cfg.d_meta))
    reps = [encode_unimodal(layers[SHORT[m]], params, cfg) for m in cfg.modalities]
    return fuse_multimodal(reps, params, cfg)
