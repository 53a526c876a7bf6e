"""Model and training configuration, plus the sectioned ``key = value``
config file format (one section per module)."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError

MODALITY_KEYS = ("mt", "re", "pi")


@dataclass(frozen=True)
class ModelConfig:
    height: int = 48
    width: int = 48
    time_points: int = 216
    # input widths per modality
    d_mt: int = 32
    d_re: int = 1
    d_pi: int = 23
    # MFGM
    enc_kernel: int = 3
    enc_hidden: int = 16
    d_ur: int = 16
    fusion_kernel: int = 3
    fusion_hidden: tuple = (64, 48)
    d_meta: int = 32
    modalities: tuple = MODALITY_KEYS
    use_meta: bool = True
    # QLMM
    mask_kind: str = "gaussian"
    sigma: float = 0.0  # 0 means max(H, W) / 8
    map_kernel: int = 5
    map_hidden: tuple = (8, 16)
    d_loc: int = 16
    # RFPM
    head_kernel: int = 3
    head_stride: int = 2
    head_channels: tuple = (32, 32)
    threshold: float = 0.5

    def __post_init__(self):
        for name in ("height", "width", "time_points", "d_mt", "d_re", "d_pi", "enc_hidden", "d_ur",
                     "d_meta", "d_loc", "enc_kernel", "fusion_kernel", "map_kernel", "head_kernel",
                     "head_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("enc_kernel", "fusion_kernel", "map_kernel", "head_kernel"):
            if getattr(self, name) % 2 == 0:
                raise ConfigError(f"{name} must be odd for 'same' padding, got {getattr(self, name)}")
        object.__setattr__(self, "fusion_hidden", tuple(int(v) for v in self.fusion_hidden))
        object.__setattr__(self, "map_hidden", tuple(int(v) for v in self.map_hidden))
        object.__setattr__(self, "head_channels", tuple(int(v) for v in self.head_channels))
        object.__setattr__(self, "modalities", tuple(self.modalities))
        if not self.head_channels:
            raise ConfigError("head_channels needs at least one conv layer")
        bad = [m for m in self.modalities if m not in MODALITY_KEYS]
        if bad or not self.modalities or len(set(self.modalities)) != len(self.modalities):
            raise ConfigError(f"modalities must be a non-empty subset of {MODALITY_KEYS}, got {self.modalities}")
        # keep the canonical (mt, re, pi) order; concat order is part of the contract
        object.__setattr__(self, "modalities", tuple(m for m in MODALITY_KEYS if m in self.modalities))
        if self.mask_kind not in ("gaussian", "onehot"):
            raise ConfigError(f"mask_kind must be gaussian or onehot, got {self.mask_kind!r}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")

    @property
    def mask_sigma(self) -> float:
        return self.sigma if self.sigma > 0 else max(self.height, self.width) / 8

    def input_channels(self, modality: str) -> int:
        return {"mt": self.d_mt, "re": self.d_re, "pi": self.d_pi}[modality]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    patience: int = 10
    split_mode: str = "iid"
    tune_threshold: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ConfigError("epochs, batch_size and learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.split_mode not in ("iid", "blocks"):
            raise ConfigError(f"split_mode must be iid or blocks, got {self.split_mode!r}")


# config-file section for every field
SECTIONS = {
    "data": ("height", "width", "time_points", "d_mt", "d_re", "d_pi"),
    "mfgm": ("enc_kernel", "enc_hidden", "d_ur", "fusion_kernel", "fusion_hidden", "d_meta",
             "modalities", "use_meta"),
    "qlmm": ("mask_kind", "sigma", "map_kernel", "map_hidden", "d_loc"),
    "rfpm": ("head_kernel", "head_stride", "head_channels", "threshold"),
    "train": tuple(f.name for f in fields(TrainConfig)),
}


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"expected a boolean, got {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(like, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if like and isinstance(like[0], int):
            return tuple(int(t) for t in items)
        return tuple(items)
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def dump_config(model: ModelConfig, train: TrainConfig) -> str:
    cp = configparser.ConfigParser()
    values = {**asdict(model), **asdict(train)}
    for section, keys in SECTIONS.items():
        cp[section] = {k: _fmt(values[k]) for k in keys}
    lines = []
    for section in cp.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in cp[section].items())
        lines.append("")
    return "\n".join(lines)


def write_config(path, model: ModelConfig, train: TrainConfig) -> None:
    with open(path, "w") as fh:
        fh.write(dump_config(model, train))


def parse_config(text: str, model: ModelConfig | None = None, train: TrainConfig | None = None):
    """Overlay a config text on the given (or default) configs."""
    model = model or ModelConfig()
    train = train or TrainConfig()
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    m_over, t_over = {}, {}
    m_defaults, t_defaults = asdict(ModelConfig()), asdict(TrainConfig())
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, text_value in cp[section].items():
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            if section == "train":
                t_over[key] = _parse(text_value, t_defaults[key])
            else:
                m_over[key] = _parse(text_value, m_defaults[key])
    return replace(model, **m_over), replace(train, **t_over)


def read_config(path, model: ModelConfig | None = None, train: TrainConfig | None = None):
    with open(path) as fh:
        return parse_config(fh.read(), model, train)


def default_config_text() -> str:
    return dump_config(ModelConfig(), TrainConfig())
