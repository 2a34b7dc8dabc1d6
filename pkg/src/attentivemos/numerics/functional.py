"""Fused differentiable ops used by the network.

Each op computes its forward in one numpy pass and supplies a closed-form
backward, which keeps the tape short and the gradients exact.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from ..errors import ConfigError, DegenerateRowError, ShapeError
from .tensor import Tensor, _unbroadcast, as_tensor, record_branch

LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def softmax_masked(logits: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` is True where attention is allowed.

    Blocked positions get a ``-inf`` logit, so their probability is exactly 0.
    """
    logits = as_tensor(logits)
    z = logits.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            allowed = np.broadcast_to(mask, z.shape)
        except ValueError:
            raise ShapeError(f"mask {mask.shape} does not broadcast to {z.shape}") from None
        if not allowed.any(axis=-1).all():
            raise DegenerateRowError("softmax row has every entry masked")
        z = np.where(allowed, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._make(p, (logits,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise each token over its last axis, then apply ``gain * xhat + bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.shape[-1] != gain.shape[-1] or gain.shape != bias.shape:
        raise ShapeError(f"layer_norm: features {x.shape[-1]} vs gain {gain.shape}, bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = g * gain.data
        dx = inv * (
            gx
            - gx.mean(axis=-1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return Tensor._make(out, (x, gain, bias), bw, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written via erf."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return Tensor._make(xd * cdf, (x,), bw, "gelu")


def _windows(x: Tensor, kernel: int) -> np.ndarray:
    if kernel < 1:
        raise ConfigError(f"pool kernel must be positive, got {kernel}")
    if x.ndim < 2:
        raise ShapeError("pooling expects (..., frames, features)")
    frames, feats = x.shape[-2], x.shape[-1]
    if frames % kernel:
        raise ConfigError(f"{frames} frames are not divisible by pool kernel {kernel}")
    return x.data.reshape(x.shape[:-2] + (frames // kernel, kernel, feats))


def max_pool_1d(x: Tensor, kernel: int) -> Tensor:
    """Channel-wise max over disjoint windows of ``kernel`` frames (axis -2).

    The gradient goes to the first argmax of each window.
    """
    x = as_tensor(x)
    win = _windows(x, kernel)
    idx = np.expand_dims(win.argmax(axis=-2), -2)
    record_branch(idx)
    out = np.take_along_axis(win, idx, axis=-2).squeeze(-2)
    src = x.shape

    def bw(g):
        full = np.zeros_like(win)
        np.put_along_axis(full, idx, np.expand_dims(g, -2), axis=-2)
        return (full.reshape(src),)

    return Tensor._make(out, (x,), bw, "max_pool_1d")


def avg_pool_1d(x: Tensor, kernel: int) -> Tensor:
    x = as_tensor(x)
    win = _windows(x, kernel)
    src = x.shape

    def bw(g):
        g = np.repeat(np.expand_dims(g / kernel, -2), kernel, axis=-2)
        return (g.reshape(src),)

    return Tensor._make(win.mean(axis=-2), (x,), bw, "avg_pool_1d")
