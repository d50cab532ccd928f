"""Experiment configuration: one JSON document with network, train, data, eval and io sections."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

from .network import ConfigError, NetworkConfig
from .phantom import PhantomError, PhantomSpec
from .trainer import TrainConfig

__all__ = ["ExperimentConfig", "DataConfig", "EvalConfig", "IOConfig", "config_hash",
           "network_from_dict"]

SECTIONS = ("network", "train", "data", "eval", "io")


def _strict(name: str, data: dict, allowed) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a JSON object")
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return data


def network_from_dict(data: dict) -> NetworkConfig:
    """``{"preset": "reference" | "reduced", ...overrides}`` or a plain field dict."""
    data = dict(data)
    preset = data.pop("preset", None)
    try:
        if preset is None:
            return NetworkConfig.from_dict(data)
        if preset not in ("reference", "reduced"):
            raise ConfigError(f"unknown network preset {preset!r}")
        known = set(NetworkConfig.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return getattr(NetworkConfig, preset)(**data).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class DataConfig:
    manifest: Optional[str] = None
    phantom: Optional[dict] = None
    n_train: int = 20
    n_val: int = 2
    n_test: int = 4

    def validate(self) -> "DataConfig":
        if (self.manifest is None) == (self.phantom is None):
            raise ConfigError("data needs exactly one of 'manifest' or 'phantom'")
        if self.phantom is not None:
            try:
                PhantomSpec.from_dict(self.phantom)
            except (PhantomError, TypeError) as exc:
                raise ConfigError(f"data.phantom: {exc}") from None
        if min(self.n_train, self.n_val) < 1 or self.n_test < 0:
            raise ConfigError("need n_train >= 1, n_val >= 1 and n_test >= 0")
        return self


@dataclass
class EvalConfig:
    patch_size: Optional[int] = None
    overlap: Optional[int] = None
    sweep: dict = field(default_factory=dict)

    def validate(self) -> "EvalConfig":
        if self.patch_size is not None and (self.patch_size < 8 or self.patch_size % 8):
            raise ConfigError("eval.patch_size must be a positive multiple of 8")
        if self.overlap is not None and self.patch_size is not None and \
                not 0 <= self.overlap < self.patch_size:
            raise ConfigError("eval.overlap must satisfy 0 <= overlap < patch_size")
        _strict("eval.sweep", self.sweep, ("kind", "axis", "angles", "repeats", "fraction",
                                           "angle_range", "seed"))
        if self.sweep.get("kind", "rotation") not in ("rotation", "motion"):
            raise ConfigError("eval.sweep.kind must be 'rotation' or 'motion'")
        return self


@dataclass
class IOConfig:
    out_dir: str = "run"


@dataclass
class ExperimentConfig:
    network: NetworkConfig
    train: TrainConfig
    data: DataConfig
    eval: EvalConfig
    io: IOConfig
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        """Build and validate every section before any work starts."""
        _strict("config", data, SECTIONS)
        network = network_from_dict(data.get("network", {"preset": "reduced"}))
        try:
            train = TrainConfig.from_dict(_strict("train", data.get("train", {}),
                                                  TrainConfig.__dataclass_fields__))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"train: {exc}") from None
        dsec = _strict("data", data.get("data", {"phantom": {}}), DataConfig.__dataclass_fields__)
        esec = _strict("eval", data.get("eval", {}), EvalConfig.__dataclass_fields__)
        iosec = _strict("io", data.get("io", {}), IOConfig.__dataclass_fields__)
        return cls(network, train, DataConfig(**dsec).validate(),
                   EvalConfig(**esec).validate(), IOConfig(**iosec), raw=data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "train": self.train.to_dict(),
            "data": dict(self.data.__dict__),
            "eval": dict(self.eval.__dict__),
            "io": dict(self.io.__dict__),
        }


def config_hash(data: dict) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode("utf-8")).hexdigest()
