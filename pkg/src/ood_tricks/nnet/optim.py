"""AdamW with decoupled weight decay, cosine annealing and the cyclic scale schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from .model import ModelParams


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-3


def init_optimizer(params: ModelParams, weight_decay=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> OptimizerState:
    zeros = lambda: {k: np.zeros_like(v) for k, v in params.arrays.items()}  # noqa: E731
    return OptimizerState(zeros(), zeros(), 0, beta1, beta2, eps, weight_decay)


def adamw_step(state: OptimizerState, params: ModelParams, grads: dict, lr: float):
    """One AdamW update. Returns new ``(state, params)``; inputs are not modified.

    ``theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta``
    """
    if lr < 0:
        raise ConfigError("learning rate must be >= 0")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    bc1, bc2 = 1.0 - b1**t, 1.0 - b2**t
    new_m, new_v, new_p = {}, {}, {}
    for name, theta in params.arrays.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ConfigError(f"gradient shape mismatch for {name}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        update = lr * m_hat / (np.sqrt(v_hat) + state.eps) + lr * state.weight_decay * theta
        new_p[name] = (theta - update).astype(theta.dtype, copy=False)
        new_m[name] = m.astype(theta.dtype, copy=False)
        new_v[name] = v.astype(theta.dtype, copy=False)
    new_state = OptimizerState(new_m, new_v, t, b1, b2, state.eps, state.weight_decay)
    return new_state, ModelParams(params.arch, new_p)


def cosine_lr(t: float, total: float, lr_max: float = 1e-3, lr_min: float = 0.0) -> float:
    """``lr_min + (lr_max - lr_min) * (1 + cos(pi * t / total)) / 2``."""
    if total <= 0:
        raise ConfigError("total must be > 0")
    if not 0 <= t <= total:
        raise ConfigError(f"t={t} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


@dataclass
class ScaleCycle:
    scales: list = field(default_factory=lambda: [32, 24, 16])
    period_epochs: int = 5

    def __post_init__(self):
        self.scales = [int(s) for s in self.scales]
        if not self.scales or min(self.scales) < 8:
            raise ConfigError("scales must be non-empty and >= 8")
        if self.period_epochs < 1:
            raise ConfigError("period_epochs must be >= 1")

    @property
    def cycle_length(self) -> int:
        return len(self.scales) * self.period_epochs


def cyclic_scale(epoch: int, cycle: ScaleCycle) -> int:
    """Input size for ``epoch``: switches every ``period_epochs`` and wraps around."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    return cycle.scales[(epoch // cycle.period_epochs) % len(cycle.scales)]
