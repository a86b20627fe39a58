"""AdamW with decoupled weight decay, and a cosine learning-rate curve."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError(f"betas must lie in (0, 1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("eps must be positive and weight_decay non-negative")


def adamw_step(params: list[Tensor], state: AdamWState, lr: float) -> None:
    """One in-place AdamW update of ``params`` from their ``.grad``.

    The decay ``lr * weight_decay * p`` is applied to the parameter directly and
    never enters the moment estimates.  Moment buffers are keyed by parameter
    identity, so a step may update any subset of the tracked parameters.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {p.name or i} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in params:
        g = p.grad
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def cosine_lr(t: int, total: int, base: float, floor: float = 0.0) -> float:
    """Cosine annealing from ``base`` at t=0 to ``floor`` at t=total."""
    if t < 0 or t > total:
        raise ValueError(f"iteration {t} outside [0, {total}]")
    if floor > base:
        raise ValueError("floor must not exceed base")
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * t / total))
