"""SGD (coupled weight decay, heavy-ball momentum) and AdamW."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .tensor import GRAD_DTYPE, Parameter


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or inf; the step was not applied."""


def _check_finite(params: Sequence[Parameter]) -> None:
    bad = [p.name for p in params if p.grad is not None and not np.all(np.isfinite(p.grad))]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient in {len(bad)} parameter(s): {', '.join(bad[:5])}")


def sgd_step(params: Iterable[Parameter], lr: float, weight_decay: float = 0.0, momentum: float = 0.0,
             buffers: dict[int, np.ndarray] | None = None) -> None:
    """One classic SGD update.

    ``d = g + weight_decay * theta``; with momentum, ``buf = momentum * buf + d``
    (the first step initializes ``buf = d``) and ``theta -= lr * buf``.
    ``buffers`` maps parameter uid to its momentum buffer and is updated in
    place; it is required whenever ``momentum > 0``.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if weight_decay < 0 or momentum < 0:
        raise ValueError("weight_decay and momentum must be nonnegative")
    params = list(params)
    _check_finite(params)
    for p in params:
        d = p.grad.astype(GRAD_DTYPE, copy=True)
        if weight_decay:
            d += weight_decay * p.data
        if momentum:
            if buffers is None:
                raise ValueError("momentum > 0 requires a buffers dict")
            buf = buffers.get(p.uid)
            if buf is None:
                buf = buffers[p.uid] = d
            else:
                buf *= momentum
                buf += d
            d = buf
        p.data -= (lr * d).astype(p.dtype)


class SGD:
    def __init__(self, params: Iterable[Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[int, np.ndarray] = {}

    def step(self) -> None:
        sgd_step(self.params, self.lr, self.weight_decay, self.momentum, self.buffers)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0.0


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Iterable[Parameter], lr: float, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 5e-4):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.uid: np.zeros(p.shape, GRAD_DTYPE) for p in self.params}
        self.v = {p.uid: np.zeros(p.shape, GRAD_DTYPE) for p in self.params}

    def step(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        _check_finite(self.params)
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p in self.params:
            m, v, g = self.m[p.uid], self.v[p.uid], p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                upd = upd + self.lr * self.weight_decay * p.data
            p.data -= upd.astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0.0


def make_optimizer(kind: str, params, lr: float, weight_decay: float = 5e-4, momentum: float = 0.9):
    if kind == "sgd":
        return SGD(params, lr, momentum=momentum, weight_decay=weight_decay)
    if kind == "adamw":
        return AdamW(params, lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")
