"""AdamW with decoupled weight decay and global-norm gradient clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from ..errors import ConfigError
from .tensor import Parameter


@dataclass
class OptimConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    clip_norm: Optional[float] = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 < self.beta1 < self.beta2 < 1:
            raise ConfigError(f"need 0 < beta1 < beta2 < 1, got {self.beta1}, {self.beta2}")
        if not self.eps_opt > 0:
            raise ConfigError("eps_opt must be > 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be > 0 or None")


def global_grad_norm(params: Iterable[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.astype(np.float64, copy=False)
            total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)


def clip_global_norm(params: Iterable[Parameter], clip_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``clip_norm``.

    Returns the norm measured before clipping.
    """
    params = list(params)
    norm = global_grad_norm(params)
    if norm > clip_norm:
        scale = clip_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.dtype)
    return norm


def adamw_step(params: Iterable[Parameter], cfg: OptimConfig) -> None:
    """One bias-corrected AdamW update. Gradients are left for the caller to zero."""
    lr, wd = cfg.learning_rate, cfg.weight_decay
    b1, b2 = cfg.beta1, cfg.beta2
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.step_count += 1
        t = p.step_count
        p.adam_m = b1 * p.adam_m + (1.0 - b1) * g
        p.adam_v = b2 * p.adam_v + (1.0 - b2) * (g * g)
        m_hat = p.adam_m / (1.0 - b1**t)
        v_hat = p.adam_v / (1.0 - b2**t)
        if wd:
            p.data *= 1.0 - lr * wd
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + cfg.eps_opt)).astype(p.dtype)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None
