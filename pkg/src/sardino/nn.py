"""Minimal module system on top of the autograd tensor.

Modules discover their parameters, buffers, and submodules by scanning
instance attributes, so model code just assigns them in __init__. Lists
of modules work too (blocks of a transformer, stages of a U-Net).
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError


class Parameter(Tensor):
    """Trainable tensor; requires_grad defaults to True."""

    def __init__(self, data, requires_grad: bool = True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)


class Buffer:
    """Non-trainable module state saved in checkpoints (running statistics,
    centering vectors)."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        self.data = np.asarray(data, dtype=dtype or ag.default_dtype())


class Module:
    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    # discovery -------------------------------------------------------------
    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + name, val
        for cname, child in self._children():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> Iterator[Parameter]:
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Buffer]]:
        for name, val in vars(self).items():
            if isinstance(val, Buffer):
                yield prefix + name, val
        for cname, child in self._children():
            yield from child.named_buffers(prefix + cname + ".")

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.parameters()
                   if p.requires_grad or not trainable_only)

    # state -----------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            out[name] = b.data.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        slots: dict[str, object] = dict(self.named_parameters())
        slots.update(self.named_buffers())
        missing = sorted(set(slots) - set(state))
        unexpected = sorted(set(state) - set(slots))
        if missing or unexpected:
            raise ConfigError(f"state dict mismatch: missing={missing}, "
                              f"unexpected={unexpected}")
        for name, slot in slots.items():
            value = np.asarray(state[name])
            if value.shape != slot.data.shape:
                raise ShapeError(f"state entry {name}: shape {value.shape} "
                                 f"does not match {slot.data.shape}")
            slot.data = value.astype(slot.data.dtype, copy=True)

    # mode switches -----------------------------------------------------------
    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


# ---------------------------------------------------------------------------
# initializers

def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                   dtype=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype or ag.default_dtype())


def scaled_normal(rng: np.random.Generator, shape, std: float = 0.02,
                  dtype=None) -> np.ndarray:
    return (std * rng.standard_normal(shape)).astype(dtype or ag.default_dtype())


# ---------------------------------------------------------------------------
# layers

class Linear(Module):
    """y = x @ W + b with W stored [in_features, out_features]."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(
            xavier_uniform(rng, (in_features, out_features), in_features, out_features))
        self.bias = Parameter(np.zeros(out_features, dtype=ag.default_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Linear expects last dim {self.in_features}, "
                             f"got input shape {x.shape}")
        y = ag.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        k = kernel_size
        fan_in = in_channels * k * k
        fan_out = out_channels * k * k
        self.weight = Parameter(
            xavier_uniform(rng, (out_channels, in_channels, k, k), fan_in, fan_out))
        if bias:
            self.bias = Parameter(np.zeros(out_channels, dtype=ag.default_dtype()))
        else:
            self.bias = Tensor(np.zeros(out_channels, dtype=ag.default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gain = Parameter(np.ones(dim, dtype=ag.default_dtype()))
        self.shift = Parameter(np.zeros(dim, dtype=ag.default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.shift, self.eps)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gain = Parameter(np.ones(channels, dtype=ag.default_dtype()))
        self.shift = Parameter(np.zeros(channels, dtype=ag.default_dtype()))
        self.running_mean = Buffer(np.zeros(channels))
        self.running_var = Buffer(np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ag.batch_norm2d(x, self.gain, self.shift,
                               self.running_mean.data, self.running_var.data,
                               training=self.training,
                               momentum=self.momentum, eps=self.eps)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return ag.relu(x)


class GELU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return ag.gelu(x)


class Sequential(Module):
    def __init__(self, *modules: Module):
        super().__init__()
        self.items = list(modules)

    def forward(self, x: Tensor) -> Tensor:
        for m in self.items:
            x = m(x)
        return x

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)
