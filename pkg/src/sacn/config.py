"""Run configuration: every hyperparameter, presets, and the flat ``key = value`` format.

Keys are dotted (``train.lr``, ``model.feature_channels``).  Unknown keys are
rejected before any work starts.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

MODES = ("sacn", "baseline")
OPTIMIZERS = ("adam", "sgd")
PRECISIONS = ("float32", "float64")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "sacn"
    in_channels: int = 1
    height: int = 16
    width: int = 16
    n_classes: int = 2
    feature_channels: int = 64
    feature_kernel: int = 5
    primary_kernel: int = 5
    primary_stride: int = 1
    primary_types: int = 8
    primary_dim: int = 8
    class_dim: int = 16
    routing_iters: int = 1
    decoder_hidden1: int = 512
    decoder_hidden2: int = 1024
    init_variance: float = 0.15
    spectral_iters: int = 1

    @property
    def input_size(self) -> int:
        return self.in_channels * self.height * self.width


@dataclass(frozen=True)
class AttentionConfig:
    softmax_axis: str = "i"


@dataclass(frozen=True)
class LossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5
    xi: float = 0.0005
    recon_selection: str = "longest-vector"


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 30
    max_steps: int = 0
    early_stop_patience: int = 0
    log_every: int = 10
    precision: str = "float32"


@dataclass(frozen=True)
class DataConfig:
    source: str = "patches"
    n_samples: int = 400
    per_region: int = 30
    patch_size: int = 16


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    def __post_init__(self):
        validate(self)

    # flat view ----------------------------------------------------------
    def to_flat(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if dataclasses.is_dataclass(val):
                for sub in fields(val):
                    out[f"{f.name}.{_public(sub.name)}"] = getattr(val, sub.name)
            else:
                out[f.name] = val
        return out

    @classmethod
    def from_flat(cls, flat: dict, base: "RunConfig | None" = None) -> "RunConfig":
        return override(base or cls(), flat)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(self.to_flat().items()))

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        return override(base or cls(), parse_text(text))

    def with_mode(self, mode: str) -> "RunConfig":
        return override(self, {"model.mode": mode})


def _public(name: str) -> str:
    return "lambda" if name == "lam" else name


def _private(name: str) -> str:
    return "lam" if name == "lambda" else name


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(value, typ, key: str):
    if isinstance(value, str):
        try:
            if typ is bool:
                if value.lower() not in ("true", "false"):
                    raise ValueError(value)
                return value.lower() == "true"
            if typ is int:
                return int(value)
            if typ is float:
                return float(value)
        except ValueError:
            raise ConfigError(f"{key}: cannot read {value!r} as {typ.__name__}") from None
        return value
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
        raise ConfigError(f"{key}: expected {typ.__name__}, got {value!r}")
    return value


_TYPES = {"str": str, "int": int, "float": float, "bool": bool}


def override(cfg: RunConfig, updates: dict) -> RunConfig:
    """Return ``cfg`` with dotted-key ``updates`` applied (values may be strings)."""
    groups: dict[str, dict] = {}
    top: dict = {}
    known = cfg.to_flat()
    for key, value in updates.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if "." in key:
            group, name = key.split(".", 1)
            sub = getattr(cfg, group)
            typ = _TYPES[{f.name: f.type for f in fields(sub)}[_private(name)]]
            groups.setdefault(group, {})[_private(name)] = _coerce(value, typ, key)
        else:
            typ = _TYPES[{f.name: f.type for f in fields(cfg)}[key]]
            top[key] = _coerce(value, typ, key)
    changes = {g: replace(getattr(cfg, g), **vals) for g, vals in groups.items()}
    return replace(cfg, **changes, **top)


def validate(cfg: RunConfig) -> None:
    m, t, lc = cfg.model, cfg.train, cfg.loss
    if m.mode not in MODES:
        raise ConfigError(f"model.mode must be one of {MODES}, got {m.mode!r}")
    if cfg.attention.softmax_axis not in ("i", "j"):
        raise ConfigError(f"attention.softmax_axis must be 'i' or 'j', got {cfg.attention.softmax_axis!r}")
    if t.optimizer not in OPTIMIZERS:
        raise ConfigError(f"train.optimizer must be one of {OPTIMIZERS}")
    if t.precision not in PRECISIONS:
        raise ConfigError(f"train.precision must be one of {PRECISIONS}")
    if lc.recon_selection not in ("longest-vector", "highest-coupling"):
        raise ConfigError("loss.recon_selection must be longest-vector or highest-coupling")
    if not 0 < lc.m_minus < lc.m_plus < 1 or lc.lam <= 0 or lc.xi < 0:
        raise ConfigError("loss margins must satisfy 0 < m_minus < m_plus < 1 with lambda > 0")
    if m.init_variance <= 0:
        raise ConfigError("model.init_variance must be > 0")
    if m.routing_iters < 1:
        raise ConfigError("model.routing_iters must be >= 1")
    positive = {
        "model.in_channels": m.in_channels, "model.height": m.height, "model.width": m.width,
        "model.n_classes": m.n_classes, "model.feature_channels": m.feature_channels,
        "model.feature_kernel": m.feature_kernel, "model.primary_kernel": m.primary_kernel,
        "model.primary_stride": m.primary_stride, "model.primary_types": m.primary_types,
        "model.primary_dim": m.primary_dim, "model.class_dim": m.class_dim,
        "model.decoder_hidden1": m.decoder_hidden1, "model.decoder_hidden2": m.decoder_hidden2,
        "model.spectral_iters": m.spectral_iters, "train.batch_size": t.batch_size,
        "train.epochs": t.epochs, "train.log_every": t.log_every,
    }
    for key, val in positive.items():
        if val < 1:
            raise ConfigError(f"{key} must be >= 1, got {val}")
    if t.lr < 0 or t.max_steps < 0 or t.early_stop_patience < 0:
        raise ConfigError("train.lr, train.max_steps and train.early_stop_patience must be >= 0")
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must fit in 64 unsigned bits")


# ---------------------------------------------------------------------------
# presets

_MEDICAL = {}
_NATURAL = {"train.lr": 2e-4, "train.epochs": 60, "train.batch_size": 64,
            "model.init_variance": 0.01, "data.source": "idx"}
_SYNTH = {"model.feature_channels": 32, "model.decoder_hidden1": 128,
          "model.decoder_hidden2": 256, "model.init_variance": 0.01,
          "train.epochs": 30, "data.n_samples": 400}

PRESETS: dict[str, dict] = {
    "medical": _MEDICAL,
    "medical-512": {**_MEDICAL, "model.feature_channels": 512},
    "mnist": {**_NATURAL, "model.height": 28, "model.width": 28, "model.n_classes": 10},
    "cifar": {**_NATURAL, "model.in_channels": 3, "model.height": 32, "model.width": 32,
              "model.n_classes": 10},
    "svhn": {**_NATURAL, "model.in_channels": 3, "model.height": 32, "model.width": 32,
             "model.n_classes": 10, "train.batch_size": 32},
    "synthetic-simple": {**_SYNTH, "data.source": "synthetic-simple"},
    "synthetic-complex": {**_SYNTH, "data.source": "synthetic-complex", "data.n_samples": 3000,
                          "train.max_steps": 800},
    "miniature": {
        "model.height": 8, "model.width": 8, "model.feature_channels": 8,
        "model.primary_kernel": 3, "model.primary_types": 2, "model.primary_dim": 4,
        "model.class_dim": 4, "model.decoder_hidden1": 8, "model.decoder_hidden2": 8,
        "model.init_variance": 0.15, "train.precision": "float64", "train.batch_size": 2,
        "data.source": "synthetic-simple",
    },
}


def preset(name: str, **overrides) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = override(RunConfig(), PRESETS[name])
    if overrides:
        cfg = override(cfg, {k.replace("__", "."): v for k, v in overrides.items()})
    return cfg


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    return RunConfig.from_text(Path(path).read_text(encoding="utf-8"), base)


def parse_overrides(items) -> dict:
    """``["train.lr=0.001", ...]`` -> dict."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out
