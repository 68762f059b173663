"""Experiment configuration: every hyperparameter in one JSON-serialisable record."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetSpec
from .errors import ContractError

# JSON key -> attribute name, where they differ
_RENAMED = {"lambda": "lam"}


@dataclass(frozen=True)
class Toggles:
    ip: bool = True
    if_: bool = True
    fp: bool = True

    def to_dict(self) -> dict:
        return {"ip_on": self.ip, "if_on": self.if_, "fp_on": self.fp}

    @classmethod
    def from_dict(cls, d: dict) -> "Toggles":
        # short keys ("ip", "if", "fp") are accepted as well
        def get(name):
            return bool(d.get(f"{name}_on", d.get(name, True)))
        return cls(ip=get("ip"), if_=get("if"), fp=get("fp"))

    @property
    def any_unsupervised(self) -> bool:
        return self.ip or self.if_ or self.fp


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    omega: float = 0.01
    beta: float = 0.01
    ip_weight: float = 1.0
    tau: float = 0.95

    def __post_init__(self):
        for name in ("alpha", "omega", "beta", "ip_weight"):
            if getattr(self, name) < 0:
                raise ContractError(f"loss weight {name} must be >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    lam: float = 0.15
    eta: float = 0.99
    n_r: int = 16
    n_d: int = 256
    alpha: float = 0.1
    omega: float = 0.01
    beta: float = 0.01
    ip_weight: float = 1.0
    tau: float = 0.95
    distance: str = "mse"
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 60
    batch: int = 4
    image_size: int = 64
    feature_channels: int = 32
    hidden_channels: tuple[int, int] = (16, 32)
    num_classes: int = 4
    init_scale: float = 2.0
    toggles: Toggles = field(default_factory=Toggles)
    ckpt_every: int = 0
    seeds: tuple[int, ...] = (0,)
    n_train: int = 400
    n_labeled: int = 40
    n_val: int = 100
    data_seed: int = 0
    dataset: dict = field(default_factory=dict)
    precision: str = "float64"

    def __post_init__(self):
        if self.batch < 1:
            raise ContractError("batch must be >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ContractError("need lr > 0 and momentum in [0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ContractError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.image_size % 4:
            raise ContractError("image_size must be divisible by 4")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.omega, self.beta, self.ip_weight, self.tau)

    def dataset_spec(self) -> DatasetSpec:
        base = dict(
            height=self.image_size, width=self.image_size, num_classes=self.num_classes,
            n_samples=self.n_train, n_val=self.n_val, seed=self.data_seed,
        )
        base.update(self.dataset)
        return DatasetSpec.from_dict(base)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            key = {v: k for k, v in _RENAMED.items()}.get(f.name, f.name)
            val = getattr(self, f.name)
            if isinstance(val, Toggles):
                val = val.to_dict()
            elif isinstance(val, tuple):
                val = list(val)
            out[key] = val
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, val in d.items():
            name = _RENAMED.get(key, key)
            if name not in known:
                raise ContractError(f"unknown config key {key!r}")
            if name == "toggles":
                val = Toggles.from_dict(val)
            elif name in ("seeds", "hidden_channels"):
                val = tuple(int(v) for v in val)
            kwargs[name] = val
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def load_config(path: str | Path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))
