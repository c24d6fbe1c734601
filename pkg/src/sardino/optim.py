"""Optimizers.

Both optimizers consume gradients attached by `autograd.backward` and
clear them after the update, so a missing backward pass shows up as a
no-op step rather than a stale-gradient update.
"""

from __future__ import annotations

from typing import Iterable, Union

import numpy as np

from .errors import ConfigError, NumericError
from .nn import Module, Parameter


def _named_params(params) -> list[tuple[str, Parameter]]:
    if isinstance(params, Module):
        return list(params.named_parameters())
    return list(params)


class Adam:
    """Adam with bias correction and decoupled weight decay (off by default).

    The tiny default learning rate matches the pre-training recipe; callers
    doing anything else should set lr explicitly.
    """

    def __init__(self, params: Union[Module, Iterable[tuple[str, Parameter]]],
                 lr: float = 1e-6, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = _named_params(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        for name, p in self.params:
            g = p.grad
            if g is None or not p.requires_grad:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name}")
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            else:
                v = self._v[name]
            t = self._t.get(name, 0) + 1
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
            self._m[name] = m
            self._v[name] = v
            self._t[name] = t
            p.grad = None


class SGD:
    def __init__(self, params: Union[Module, Iterable[tuple[str, Parameter]]],
                 lr: float = 0.01, momentum: float = 0.0):
        self.params = _named_params(params)
        self.lr = lr
        self.momentum = momentum
        self._vel: dict[str, np.ndarray] = {}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        for name, p in self.params:
            g = p.grad
            if g is None or not p.requires_grad:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name}")
            if self.momentum:
                vel = self._vel.get(name)
                vel = g if vel is None else self.momentum * vel + g
                self._vel[name] = vel
                g = vel
            p.data -= (self.lr * g).astype(p.data.dtype)
            p.grad = None


def make_optimizer(kind: str, params, lr: float, **kwargs):
    if kind == "adam":
        return Adam(params, lr=lr, **kwargs)
    if kind == "sgd":
        return SGD(params, lr=lr, **kwargs)
    raise ConfigError(f"unknown optimizer kind {kind!r}")
