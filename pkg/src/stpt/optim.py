"""Adam with bias correction and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class MissingGradientError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    horizon: int | None = None  # cosine decay length in steps; None keeps lr fixed
    min_lr: float = 0.0
    weight_decay: float = 0.0  # decoupled (AdamW) when nonzero
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        """Learning rate applied by the next step."""
        if not self.horizon:
            return self.lr
        frac = min(self.step, self.horizon) / self.horizon
        return self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + math.cos(math.pi * frac))


def adam_step(state: AdamState, params: list[Tensor], allow_missing: bool = False) -> None:
    """In-place Adam update of ``params`` from their accumulated ``grad``."""
    lr = state.current_lr()
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            if allow_missing:
                continue
            raise MissingGradientError(f"parameter {i} {p.shape} has no gradient")
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data = p.data * (1.0 - lr * state.weight_decay)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
