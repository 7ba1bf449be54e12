#!/usr/bin/env python3
"""
AdamW with decoupled weight decay and the linear-warmup cosine schedule.

Shared by backbone pretraining and router training.
"""

import math
from typing import Dict, Iterable, Optional

import numpy as np

from numerics import Tensor


def lr_schedule(step: int, lr_max: float, warmup_steps: int, total_steps: int) -> float:
    """
    Learning rate at a given optimizer step.

    Linear ramp 0 -> lr_max over the warmup, then a half cosine down to 0
    at `total_steps`.

    Example:
        >>> lr_schedule(500, 1e-3, 500, 1500)
        0.001
    """
    if total_steps <= 0:
        return 0.0
    warmup_steps = min(warmup_steps, total_steps)
    if step < warmup_steps:
        return lr_max * step / warmup_steps
    if total_steps == warmup_steps:
        return lr_max if step < total_steps else 0.0
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


def effective_warmup(warmup_steps: int, total_steps: int) -> int:
    """Warmup clamped below the step count so the cosine phase is never empty."""
    if total_steps <= 1:
        return 0
    return min(warmup_steps, total_steps - 1)


class AdamW:
    """
    Adam with decoupled weight decay over a dict of named parameters.

    Parameters whose name ends in one of `no_decay_suffixes` are not decayed.
    Iteration follows the insertion order of the dict, so updates are
    reproducible.
    """

    def __init__(self, params: Dict[str, Tensor], weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 no_decay_suffixes: Iterable[str] = ("bias", "beta", "gamma")):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.no_decay = tuple(no_decay_suffixes)
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def decays(self, name: str) -> bool:
        return not name.endswith(self.no_decay)

    def step(self, lr: float, grad_scale: Optional[float] = None):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.gradient()
            if grad_scale is not None:
                g = g * grad_scale
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            if self.weight_decay and self.decays(name):
                p.data = p.data * (1.0 - lr * self.weight_decay)
            p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype, copy=False)
