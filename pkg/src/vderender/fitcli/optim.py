"""Adam and the step-halving learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    skipped: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              lr_scale: dict[str, float] | None = None) -> bool:
    """In-place Adam update with bias correction.

    ``lr_scale`` optionally multiplies the step size per parameter name.

    A step with any non-finite gradient is skipped (returns False) and
    counted in ``state.skipped``.
    """
    for k, g in grads.items():
        if params[k].shape != g.shape:
            raise ValueError(f"{k}: gradient shape {g.shape} != {params[k].shape}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        return False
    state.step += 1
    b1c = 1.0 - beta1 ** state.step
    b2c = 1.0 - beta2 ** state.step
    for k, g in grads.items():
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = lr * (lr_scale.get(k, 1.0) if lr_scale else 1.0)
        params[k] -= step * (m / b1c) / (np.sqrt(v / b2c) + eps)
    return True


def halving_lr(base: float, it: int, total: int, points=(0.5, 0.75, 0.9)) -> float:
    """``base`` halved once for every fraction in ``points`` already passed."""
    passed = sum(1 for p in points if it >= int(p * total))
    return base * 0.5 ** passed
