"""Adam with decoupled weight decay and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import UsageError
from .autodiff import Tensor


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            t=0,
        )


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0,
              decoupled: bool = True) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    With ``decoupled`` the decay is applied to the parameters directly
    (p -= lr * weight_decay * p); otherwise it is folded into the gradient.
    """
    if lr < 0:
        raise UsageError(f"learning rate must be >= 0, got {lr}")
    if not state.m:
        state.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        state.v = {k: np.zeros_like(p.data) for k, p in params.items()}
    if set(grads) != set(params) or set(state.m) != set(params):
        raise UsageError("params, grads and optimizer state must share the same names")

    t = state.t + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise UsageError(f"shape mismatch for {name}: param {p.shape}, grad {g.shape}")
        dt = p.data.dtype
        if weight_decay and not decoupled:
            g = g + weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        update = lr * mhat / (np.sqrt(vhat) + eps)
        if weight_decay and decoupled:
            update = update + lr * weight_decay * p.data
        p.data = (p.data - update).astype(dt, copy=False)
    state.t = t
    return state


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    total_steps: int
    min_lr: float = 0.0
    warmup_steps: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise UsageError("base_lr must be positive")
        if not 0 <= self.min_lr <= self.base_lr:
            raise UsageError("min_lr must lie in [0, base_lr]")
        if self.total_steps < 1:
            raise UsageError("total_steps must be >= 1")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise UsageError("warmup_steps must lie in [0, total_steps)")


def cosine_lr(step: int, schedule: LrSchedule) -> float:
    """min + (base - min) * (1 + cos(pi * step / total)) / 2, optional linear warmup."""
    if not 0 <= step <= schedule.total_steps:
        raise UsageError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.base_lr * (step + 1) / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    frac = (step - schedule.warmup_steps) / span
    return schedule.min_lr + 0.5 * (schedule.base_lr - schedule.min_lr) * (1.0 + math.cos(math.pi * frac))
