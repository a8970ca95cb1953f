"""Adam, inverse-square-root warmup schedule and global-norm clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update over ``params``, then clear their grads.

    Parameters that received no gradient this step are left untouched.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None


class Adam:
    def __init__(self, params: Mapping[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, lr: float) -> None:
        adam_step(self.params, self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float | None) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping. ``max_norm=None`` only measures.
    """
    sq = sum(float((p.grad * p.grad).sum()) for p in params.values() if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm is not None and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * s
    return norm


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup then inverse-square-root decay.

    ``rate(step) = base_scale * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)``
    """

    d_model: int
    warmup_steps: int
    base_scale: float = 1.0

    def __post_init__(self):
        if self.d_model < 1 or self.warmup_steps < 1:
            raise ValueError("d_model and warmup_steps must be positive")

    @classmethod
    def with_peak(cls, d_model: int, warmup_steps: int, peak_lr: float) -> LrSchedule:
        """Schedule whose maximum (reached at ``warmup_steps``) equals ``peak_lr``."""
        return cls(d_model, warmup_steps, peak_lr * math.sqrt(d_model * warmup_steps))

    def rate(self, step: int) -> float:
        return lr_at_step(self, step)


def lr_at_step(sched: LrSchedule, step: int) -> float:
    if step < 1:
        raise ValueError(f"schedule steps start at 1, got {step}")
    return (sched.base_scale * sched.d_model ** -0.5
            * min(step ** -0.5, step * sched.warmup_steps ** -1.5))
