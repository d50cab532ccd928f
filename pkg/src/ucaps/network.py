"""The capsule U-shaped segmentation network.

Three stages: a dilated convolutional feature extractor, a six-layer
convolutional capsule encoder with three stride-2 stages, and a convolutional
decoder with skip connections drawn from the capsule grids. A reconstruction
head regularizes training.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .conv import same_padding
from .layers import BatchNorm3d, CapsuleConv3d, Conv3d, ConvTranspose3d, Module
from .tensor import Tensor

__all__ = [
    "NetworkConfig",
    "NetworkOutput",
    "UCapsNet",
    "build",
    "count_parameters",
    "count_depth",
    "ConfigError",
]


class ConfigError(ValueError):
    """A network configuration violates one of its invariants."""


@dataclass
class NetworkConfig:
    in_channels: int = 1
    num_classes: int = 4
    feature_channels: Tuple[int, ...] = (16, 32, 64)
    feature_kernel: int = 5
    feature_dilations: Tuple[int, ...] = (1, 3, 3)
    capsule_types: Tuple[int, ...] = (16, 16, 16, 8, 8, 4)
    capsule_dims: Tuple[int, ...] = (4, 8, 8, 16, 16, 32)
    capsule_kernel: int = 3
    capsule_strides: Tuple[int, ...] = (1, 2, 1, 2, 1, 2)
    routing_iterations: int = 3
    decoder_channels: Tuple[int, ...] = (128, 64, 32)
    use_feature_extractor: bool = True
    use_margin_loss: bool = True
    use_reconstruction: bool = True
    loss_weights: Tuple[float, float, float] = (1.0, 1.0, 0.005)
    margin: Tuple[float, float, float] = (0.9, 0.1, 0.5)
    seed: int = 0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                setattr(self, f.name, tuple(value))

    @classmethod
    def reference(cls, in_channels: int = 1, num_classes: int = 4, **overrides) -> "NetworkConfig":
        """Full-size configuration: types (16, 16, 16, 8, 8, K)."""
        overrides.setdefault("capsule_types", (16, 16, 16, 8, 8, num_classes))
        return cls(in_channels=in_channels, num_classes=num_classes, **overrides)

    @classmethod
    def reduced(cls, in_channels: int = 1, num_classes: int = 4, **overrides) -> "NetworkConfig":
        """Desk-scale configuration: types (4, 4, 4, 2, 2, K); feature, capsule and decoder
        widths halved."""
        params = dict(
            feature_channels=(8, 16, 32),
            capsule_types=(4, 4, 4, 2, 2, num_classes),
            capsule_dims=(2, 4, 4, 8, 8, 16),
            decoder_channels=(64, 32, 16),
        )
        params.update(overrides)
        return cls(in_channels=in_channels, num_classes=num_classes, **params)

    @property
    def downsample_factor(self) -> int:
        return int(np.prod(self.capsule_strides))

    def validate(self) -> "NetworkConfig":
        n = len(self.capsule_types)
        if n != 6 or len(self.capsule_strides) != 6 or len(self.capsule_dims) != 6:
            raise ConfigError("capsule_types, capsule_dims and capsule_strides need 6 entries each")
        if self.capsule_types[-1] != self.num_classes:
            raise ConfigError(
                f"last capsule layer has {self.capsule_types[-1]} types but there are "
                f"{self.num_classes} classes"
            )
        if any(s not in (1, 2) for s in self.capsule_strides) or sum(
                s == 2 for s in self.capsule_strides) != len(self.decoder_channels):
            raise ConfigError("need one stride-2 capsule layer per decoder level")
        if self.capsule_strides[0] != 1:
            raise ConfigError("the first capsule layer must keep full resolution")
        if len(self.feature_channels) != len(self.feature_dilations):
            raise ConfigError("feature_channels and feature_dilations differ in length")
        if self.feature_kernel % 2 == 0 or self.capsule_kernel % 2 == 0:
            raise ConfigError("kernel sizes must be odd for same padding")
        if min(self.capsule_types + self.capsule_dims) < 1 or self.in_channels < 1:
            raise ConfigError("channel, type and dimension counts must be positive")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.routing_iterations < 1:
            raise ConfigError("routing_iterations must be >= 1")
        if len(self.loss_weights) != 3 or min(self.loss_weights) < 0:
            raise ConfigError("loss_weights must be three non-negative numbers")
        return self

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**data).validate()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class NetworkOutput:
    logits: Tensor
    capsule_lengths: Tensor
    reconstruction: Optional[Tensor] = None
    skips: list = field(default_factory=list, repr=False)


class UCapsNet(Module):
    """Capsule encoder / convolutional decoder network built from a :class:`NetworkConfig`."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        cfg = config.validate()
        self.config = cfg
        seed = cfg.seed

        if cfg.use_feature_extractor:
            self.features = []
            cin = cfg.in_channels
            for i, (c, d) in enumerate(zip(cfg.feature_channels, cfg.feature_dilations)):
                self.features.append(Conv3d(
                    cin, c, cfg.feature_kernel, dilation=d,
                    padding=same_padding(cfg.feature_kernel, d), seed=seed, name=f"features.{i}"))
                cin = c
        else:
            # without the extractor a 1^3 conv lifts the input to the capsule width
            self.features = [Conv3d(cfg.in_channels, cfg.feature_channels[-1], 1,
                                    seed=seed, name="features.0")]
        primary_dim = cfg.feature_channels[-1]

        self.capsules = []
        cin, ain = 1, primary_dim
        for i, (c, a, s) in enumerate(zip(cfg.capsule_types, cfg.capsule_dims, cfg.capsule_strides)):
            self.capsules.append(CapsuleConv3d(
                cin, ain, c, a, k=cfg.capsule_kernel, stride=s,
                padding=same_padding(cfg.capsule_kernel), iterations=cfg.routing_iterations,
                gain=1.0 if i == 0 else 2.0, seed=seed, name=f"capsules.{i}"))
            cin, ain = c, a

        # skip sources: the last capsule grid at each resolution above the bottom
        self._skip_layers = []
        for i, s in enumerate(cfg.capsule_strides):
            if i + 1 < len(cfg.capsule_strides) and cfg.capsule_strides[i + 1] == 2:
                self._skip_layers.append(i)
        self._skip_layers.reverse()

        widths = [t * a for t, a in zip(cfg.capsule_types, cfg.capsule_dims)]
        self.up, self.merge, self.norm = [], [], []
        cin = widths[-1]
        for lvl, (dc, skip) in enumerate(zip(cfg.decoder_channels, self._skip_layers)):
            self.up.append(ConvTranspose3d(cin, dc, 2, 2, seed=seed, name=f"up.{lvl}"))
            self.merge.append(Conv3d(dc + widths[skip], dc, 3, padding=1, seed=seed,
                                     name=f"merge.{lvl}"))
            self.norm.append(BatchNorm3d(dc))
            cin = dc
        self.head = Conv3d(cin, cfg.num_classes, 1, seed=seed, name="head")
        if cfg.use_reconstruction:
            self.recon = [Conv3d(cin, cin, 1, seed=seed, name="recon.0"),
                          Conv3d(cin, cfg.in_channels, 1, seed=seed, name="recon.1")]
        else:
            self.recon = []

    def forward(self, x) -> NetworkOutput:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected input [N, {self.config.in_channels}, H, W, D], got {x.shape}")
        f = self.config.downsample_factor
        if any(s % f for s in x.shape[2:]):
            raise ValueError(f"spatial dims {x.shape[2:]} must be multiples of {f}")

        h = x
        for conv in self.features:
            h = T.relu(conv(h))
        n, c = h.shape[:2]
        # [N, C, H, W, D] -> capsule grid [N, H, W, D, 1, C]
        grid = T.reshape(T.transpose(h, (0, 2, 3, 4, 1)), (n, *h.shape[2:], 1, c))

        grids = []
        for caps in self.capsules:
            grid = caps(grid)
            grids.append(grid)

        y = _to_channels(grids[-1])
        for up, merge, norm, skip in zip(self.up, self.merge, self.norm, self._skip_layers):
            y = up(y)
            y = T.concat([y, _to_channels(grids[skip])], axis=1)
            y = T.relu(norm(merge(y)))
        logits = self.head(y)

        recon = None
        if self.recon:
            recon = T.sigmoid(self.recon[1](T.relu(self.recon[0](y))))
        lengths = T.norm_along(grids[-1], axis=-1)
        return NetworkOutput(logits, lengths, recon, grids)


def _to_channels(grid: Tensor) -> Tensor:
    """Capsule grid ``[N, H, W, D, C, A]`` -> feature map ``[N, C*A, H, W, D]``."""
    n, hh, ww, dd, c, a = grid.shape
    flat = T.reshape(grid, (n, hh, ww, dd, c * a))
    return T.transpose(flat, (0, 4, 1, 2, 3))


def build(config: NetworkConfig) -> UCapsNet:
    return UCapsNet(config)


def count_parameters(net: Module) -> int:
    """Total number of trainable scalars."""
    return int(sum(p.size for p in net.parameters().values()))


def count_depth(net: Module) -> int:
    """Number of weight-bearing convolution, capsule and deconvolution layers."""
    return sum(1 for m in net.modules() if m.weight_bearing)
