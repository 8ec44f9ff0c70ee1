"""Adam / AdamW and the warmup-then-cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .errors import NumericError, UsageError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def adam_update(param, grad, m, v, t, lr, weight_decay=0.0, decoupled=False):
    """One bias-corrected Adam(W) update. Returns ``(param, m, v)``; ``t`` is 1-based."""
    if decoupled:
        param = param - lr * weight_decay * param
    elif weight_decay:
        grad = grad + weight_decay * param
    m = BETA1 * m + (1 - BETA1) * grad
    v = BETA2 * v + (1 - BETA2) * grad * grad
    m_hat = m / (1 - BETA1**t)
    v_hat = v / (1 - BETA2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + EPS), m, v


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


class Adam:
    """Adam over a named parameter dict. ``decoupled=True`` gives AdamW."""

    def __init__(self, params: Mapping[str, Tensor], weight_decay: float = 0.0,
                 decoupled: bool = False, frozen=()):
        self.params = dict(params)
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.frozen = set(frozen)
        self.state = AdamState()

    def step(self, grads: Mapping[Tensor, np.ndarray], lr: float) -> None:
        for name, p in self.params.items():
            g = grads.get(p)
            if g is not None and not np.isfinite(g).all():
                bad = int(np.flatnonzero(~np.isfinite(g))[0])
                raise NumericError(f"non-finite gradient for {name} at flat index {bad}; step aborted")
        self.state.t += 1
        t = self.state.t
        for name, p in self.params.items():
            if name in self.frozen:
                continue
            g = grads.get(p)
            if g is None:
                continue
            m = self.state.m.get(name)
            if m is None:
                m = np.zeros(p.shape)
                self.state.v[name] = np.zeros(p.shape)
            new, m, v = adam_update(p.data, g, m, self.state.v[name], t, lr,
                                    self.weight_decay, self.decoupled)
            self.state.m[name], self.state.v[name] = m, v
            new.setflags(write=False)
            p.data = new


def make_optimizer(kind: str, params, weight_decay: float, frozen=()) -> Adam:
    kind = kind.lower()
    if kind == "adam":
        return Adam(params, 0.0, decoupled=False, frozen=frozen)
    if kind == "adamw":
        return Adam(params, weight_decay, decoupled=True, frozen=frozen)
    raise UsageError(f"unknown optimizer {kind!r}")


def warmup_cosine(epoch: float, peak: float, warmup: float, total: float) -> float:
    if not 0 <= epoch <= total:
        raise UsageError(f"epoch {epoch} outside [0, {total}]")
    if warmup > 0 and epoch <= warmup:
        return peak * epoch / warmup
    return peak * 0.5 * (1.0 + math.cos(math.pi * (epoch - warmup) / (total - warmup)))


def lr_at(epoch: float, cfg) -> float:
    """Learning rate at a (possibly fractional) epoch for ``cfg``."""
    return warmup_cosine(epoch, cfg.peak_lr, cfg.warmup_epochs, cfg.total_epochs)
