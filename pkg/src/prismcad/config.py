"""Run configurations as dataclasses, loadable from TOML key/value files."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import tomli


@dataclass
class DataConfig:
    seed: int = 0
    n_base: int = 120  # base programs; each yields one unrounded and four rounded inputs
    res: int = 64
    corpus_counts: dict = field(default_factory=dict)  # empty -> sketch.DEFAULT_COUNTS
    rounded: bool = True


@dataclass
class Train3DConfig:
    seed: int = 0
    scale: float = 0.25
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 30
    patience: int = 5
    val_fraction: float = 0.1
    max_seconds: float = 3600.0
    data: DataConfig = field(default_factory=DataConfig)
    data_dir: str = ""
    out: str = "model3d.ckpt"


@dataclass
class Train2DConfig:
    seed: int = 0
    scale: float = 0.5
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 60
    patience: int = 5
    holdout: int = 20
    augment: int = 4  # extra randomly placed copies of each training variation per epoch
    query_mode: str = "sdf"  # "sdf" or "mask"
    corpus_counts: dict = field(default_factory=dict)
    max_seconds: float = 3600.0
    out: str = "model2d.ckpt"


def _build(cls, data: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        default = known[k].default_factory() if callable(known[k].default_factory) else known[k].default
        if hasattr(default, "__dataclass_fields__") and isinstance(v, dict):
            v = _build(type(default), v)
        kwargs[k] = v
    return cls(**kwargs)


def load_config(path, cls):
    with open(path, "rb") as f:
        return _build(cls, tomli.load(f))


def config_from_dict(cls, data: dict):
    return _build(cls, data)


def config_hash(cfg) -> str:
    text = json.dumps(asdict(cfg), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]
