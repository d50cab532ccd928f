"""Parameter containers for the network layers."""
from __future__ import annotations

import zlib
from typing import Dict, Iterator, Tuple

import numpy as np

from .capsules import capsule_conv3d
from .conv import BatchNormState, batchnorm, conv3d, conv_transpose3d
from .tensor import Tensor

__all__ = [
    "Module",
    "Conv3d",
    "ConvTranspose3d",
    "BatchNorm3d",
    "CapsuleConv3d",
    "param_rng",
]


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed on (seed, parameter name).

    Initial values of a parameter then depend only on its own name, so adding
    or removing an unrelated branch never shifts another layer's weights.
    """
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class Module:
    """Minimal container: parameters, buffers and child modules by attribute name."""

    weight_bearing = False

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, BatchNormState):
                yield prefix + name + ".running_mean", value.mean
                yield prefix + name + ".running_var", value.var
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.parameters()
        buffers = dict(self.named_buffers())
        expected = set(own) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, arr in state.items():
            target = own[name].data if name in own else buffers[name]
            if target.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {target.shape}")
            target[...] = arr

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for m in self.modules():
            for name, value in list(vars(m).items()):
                if isinstance(value, Tensor):
                    value.data = value.data.astype(dtype)
                elif isinstance(value, BatchNormState):
                    value.mean = value.mean.astype(dtype)
                    value.var = value.var.astype(dtype)
        return self


class Conv3d(Module):
    weight_bearing = True

    def __init__(self, cin, cout, k, stride=1, dilation=1, padding=0, bias=True,
                 seed=0, name="conv"):
        super().__init__()
        fan_in = cin * k ** 3
        rng = param_rng(seed, name + ".weight")
        self.weight = Tensor(rng.normal(0, np.sqrt(2.0 / fan_in), (cout, cin, k, k, k)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.stride, self.dilation, self.padding = stride, dilation, padding

    def forward(self, x):
        return conv3d(x, self.weight, self.bias, self.stride, self.dilation, self.padding)


class ConvTranspose3d(Module):
    weight_bearing = True

    def __init__(self, cin, cout, k=2, stride=2, bias=True, seed=0, name="deconv"):
        super().__init__()
        rng = param_rng(seed, name + ".weight")
        fan_in = cin * (k // stride) ** 3
        self.weight = Tensor(rng.normal(0, np.sqrt(2.0 / fan_in), (cin, cout, k, k, k)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.stride = stride

    def forward(self, x):
        return conv_transpose3d(x, self.weight, self.bias, self.stride)


class BatchNorm3d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.stats = BatchNormState(channels)
        self.eps, self.momentum = eps, momentum

    def forward(self, x):
        return batchnorm(x, self.gamma, self.beta, self.stats, self.training,
                         self.eps, self.momentum)


class CapsuleConv3d(Module):
    """Convolutional capsule layer with per-site dynamic routing.

    Holds the vote transforms ``[Cin, k, k, k, Cout, Aout, Ain]``.
    """

    weight_bearing = True

    def __init__(self, cin, ain, cout, aout, k=3, stride=1, padding=1, iterations=3,
                 gain=2.0, seed=0, name="caps"):
        super().__init__()
        rng = param_rng(seed, name + ".weight")
        # routed sums of cin*k^3 votes, each weighted ~1/cout, should land near
        # |s| ~ 1 for unit-ish inputs so squash neither saturates nor vanishes
        std = gain * cout / np.sqrt(cin * k ** 3 * aout)
        self.weight = Tensor(rng.normal(0, std, (cin, k, k, k, cout, aout, ain)),
                             requires_grad=True)
        self.cin, self.ain, self.cout, self.aout = cin, ain, cout, aout
        self.k, self.stride, self.padding, self.iterations = k, stride, padding, iterations

    def forward(self, x):
        return capsule_conv3d(x, self.weight, self.stride, self.padding, self.iterations)
