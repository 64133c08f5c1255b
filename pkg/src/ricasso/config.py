"""Run configuration: dataclasses, YAML/JSON loading and schema validation.

A config file is a mapping with these sections (required keys marked *)::

    seed: 0                       # int
    output_dir: runs              # where timestamped run directories go
    alpha: 0.2                    # Beta(alpha, alpha) for the mix coefficient
    precision: float32            # float32 | float64
    dataset:
      kind*: synthetic            # synthetic | image-folder
      root: null                  # image-folder: root/train/<class>/*, root/test/<class>/*
      dim: 32                     # synthetic only
      shape: [1, 4, 8]
      radius: 3.0
      noise: 1.0
      data_seed: 0
      test_per_class: 100
      val_ood: [blobs, noise]     # synthetic OOD kinds (or image dirs) for validation
      val_ood_size: 1000
    profile:
      num_classes*: 10
      n_max*: 500
      imbalance_ratio*: 100
    model:
      encoder: mlp                # mlp | cnn
      hidden: 128
      feat_dim: 64
      norm: none                  # none | batch (1-d layers)
      num_local: 2                # K = num_local + 1 experts
      tau: 1.0                    # global-expert prior scale
      center_momentum: 0.1
    loss: {...}                   # any LossConfig field
    optim:
      epochs*: 20
      batch_size: 64
      base_lr: 0.1
      momentum: 0.9
      weight_decay: 5.0e-4
      warmup_epochs: 5
      warmup_scale: 0.1
      decay: cosine               # cosine | step | constant
      step_milestones: []         # epochs; default 80% and 90% of training
    ablation:                     # read by ``ricasso ablate`` only; default 8-row grid
      - [true, true, true, true]  # NOD, RCL, AALA, CBCL
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .losses import LossConfig


class ConfigError(ValueError):
    """Schema violation; ``field`` names the offending key path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    root: str | None = None
    dim: int = 32
    shape: list[int] = field(default_factory=lambda: [1, 4, 8])
    radius: float = 3.0
    noise: float = 1.0
    data_seed: int = 0
    test_per_class: int = 100
    val_ood: list[str] = field(default_factory=lambda: ["blobs", "noise"])
    val_ood_size: int = 1000


@dataclass
class ProfileSpec:
    num_classes: int = 10
    n_max: int = 500
    imbalance_ratio: float = 100.0


@dataclass
class ModelSpec:
    encoder: str = "mlp"
    hidden: int = 128
    feat_dim: int = 64
    norm: str = "none"
    num_local: int = 2
    tau: float = 1.0
    center_momentum: float = 0.1


@dataclass
class OptimSpec:
    epochs: int = 20
    batch_size: int = 64
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 5
    warmup_scale: float = 0.1
    decay: str = "cosine"
    step_milestones: list[int] = field(default_factory=list)


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    profile: ProfileSpec = field(default_factory=ProfileSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimSpec = field(default_factory=OptimSpec)
    seed: int = 0
    output_dir: str = "runs"
    alpha: float = 0.2
    precision: str = "float32"

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **sections) -> "RunConfig":
        """Deep copy with nested overrides, e.g. ``replace(loss={"rcl_enabled": False})``."""
        d = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, dict):
                d[key].update(value)
            else:
                d[key] = value
        return config_from_dict(d, require=False)

    def hash(self) -> str:
        return config_hash(self)


REQUIRED = {
    "dataset": ("kind",),
    "profile": ("num_classes", "n_max", "imbalance_ratio"),
    "optim": ("epochs",),
}

_SECTIONS = {"dataset": DatasetSpec, "profile": ProfileSpec, "model": ModelSpec, "loss": LossConfig, "optim": OptimSpec}
_SCALARS = {"seed": int, "output_dir": str, "alpha": float, "precision": str}


def _coerce(path: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return list(value)
    return value


def _section(name: str, cls, raw, require: bool):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected a mapping")
    if require:
        for key in REQUIRED.get(name, ()):
            if key not in raw:
                raise ConfigError(f"{name}.{key}", "required field is missing")
    defaults = cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field")
        kwargs[key] = _coerce(f"{name}.{key}", value, getattr(defaults, key))
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(name, str(exc)) from exc


def config_from_dict(raw: dict, require: bool = True) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    for key in raw:
        if key not in _SECTIONS and key not in _SCALARS:
            raise ConfigError(key, "unknown field")
    if require:
        for name in REQUIRED:
            if name not in raw:
                raise ConfigError(f"{name}.{REQUIRED[name][0]}", "required field is missing")
    kwargs = {name: _section(name, cls, raw.get(name), require) for name, cls in _SECTIONS.items()}
    for key, typ in _SCALARS.items():
        if key in raw:
            kwargs[key] = _coerce(key, raw[key], typ())
    cfg = RunConfig(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.dataset.kind not in ("synthetic", "image-folder"):
        raise ConfigError("dataset.kind", f"must be 'synthetic' or 'image-folder', got {cfg.dataset.kind!r}")
    if cfg.dataset.kind == "image-folder" and not cfg.dataset.root:
        raise ConfigError("dataset.root", "image-folder datasets need a root directory")
    if cfg.profile.num_classes < 2:
        raise ConfigError("profile.num_classes", "must be >= 2")
    if cfg.profile.imbalance_ratio < 1:
        raise ConfigError("profile.imbalance_ratio", "must be >= 1")
    if cfg.optim.epochs < 1:
        raise ConfigError("optim.epochs", "must be >= 1")
    if cfg.optim.batch_size < 2:
        raise ConfigError("optim.batch_size", "must be >= 2")
    if cfg.optim.decay not in ("cosine", "step", "constant"):
        raise ConfigError("optim.decay", "must be cosine, step or constant")
    if cfg.model.encoder not in ("mlp", "cnn"):
        raise ConfigError("model.encoder", "must be mlp or cnn")
    if cfg.model.norm not in ("none", "batch"):
        raise ConfigError("model.norm", "must be none or batch")
    if cfg.precision not in ("float32", "float64"):
        raise ConfigError("precision", "must be float32 or float64")
    if cfg.alpha <= 0:
        raise ConfigError("alpha", "must be > 0")


def read_raw_config(path) -> dict:
    """The parsed mapping of a YAML or JSON config file, unvalidated."""
    text = Path(path).read_text()
    raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    return raw


def load_config(path) -> RunConfig:
    """Parse a YAML or JSON config file and validate it."""
    return config_from_dict(read_raw_config(path))


def config_hash(cfg) -> str:
    """sha256 of the canonical JSON form, ignoring where outputs are written."""
    d = copy.deepcopy(cfg.to_dict() if is_dataclass(cfg) else cfg)
    d.pop("output_dir", None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
