"""The attention-only MOS network.

Waveform frames are embedded, refined by a cascade of local modeling blocks
(optional frame merge followed by a shifted-context transformer pair), then a
learnable [MOS] token is prepended and a stack of global transformer layers
attends over all remaining tokens. A small MLP maps the [MOS] row to a score.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import config as cfgio
from .audio import frame_geometry, frame_samples
from .errors import ConfigError, ShapeError
from .numerics import (
    Parameter,
    Tensor,
    as_tensor,
    avg_pool_1d,
    broadcast_to,
    concat,
    gelu,
    layer_norm,
    max_pool_1d,
    no_grad,
    roll,
    softmax_masked,
)

MERGE_MODES = ("max_pool", "avg_pool", "linear")
PE_MODES = ("none", "sinusoidal")


@dataclass
class ModelConfig:
    embed_dim: int = 16
    context_sizes: tuple[int, ...] = (10, 4, 4, 4, 4, 2, 2)
    pool_kernels: tuple[int, ...] = (5, 2, 2, 2, 2, 2)
    global_layers: int = 12
    heads: int = 4
    mlp_ratio: int = 4
    merge_mode: str = "max_pool"
    positional_encoding: str = "none"
    head_hidden: int = 0
    duration_s: float = 20.48
    sample_rate: int = 16000
    frame_ms: float = 2.0
    hop_ms: float = 1.0

    def __post_init__(self):
        self.context_sizes = tuple(int(c) for c in self.context_sizes)
        self.pool_kernels = tuple(int(k) for k in self.pool_kernels)
        if self.head_hidden == 0:
            self.head_hidden = self.embed_dim
        self.validate()

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """1.28 s input, three local blocks, two global layers, D=8."""
        base = dict(embed_dim=8, context_sizes=(10, 4, 4), pool_kernels=(5, 2),
                    global_layers=2, heads=2, duration_s=1.28)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """40 frames; small enough for exhaustive gradient checks."""
        base = dict(embed_dim=8, context_sizes=(4, 2), pool_kernels=(2,),
                    global_layers=1, heads=2, duration_s=0.04)
        base.update(overrides)
        return cls(**base)

    @property
    def frame_samples(self) -> int:
        return frame_geometry(self.frame_ms, self.hop_ms, self.sample_rate)[0]

    @property
    def hop_samples(self) -> int:
        return frame_geometry(self.frame_ms, self.hop_ms, self.sample_rate)[1]

    @property
    def num_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate))

    @property
    def num_frames(self) -> int:
        return self.num_samples // self.hop_samples

    def token_ladder(self) -> list:
        """Token counts entering each local block, then the final count."""
        ladder = [self.num_frames]
        for k in self.pool_kernels:
            ladder.append(ladder[-1] // k)
        return ladder

    def validate(self) -> None:
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")
        if len(self.context_sizes) != len(self.pool_kernels) + 1:
            raise ConfigError(
                f"need len(context_sizes) == len(pool_kernels) + 1, got "
                f"{len(self.context_sizes)} and {len(self.pool_kernels)}"
            )
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"heads={self.heads} must divide embed_dim={self.embed_dim}")
        if self.global_layers < 0 or self.mlp_ratio < 1 or self.head_hidden < 1:
            raise ConfigError("global_layers, mlp_ratio and head_hidden must be positive")
        if self.merge_mode not in MERGE_MODES:
            raise ConfigError(f"merge_mode must be one of {MERGE_MODES}, got {self.merge_mode!r}")
        if self.positional_encoding not in PE_MODES:
            raise ConfigError(f"positional_encoding must be one of {PE_MODES}")
        if self.positional_encoding == "sinusoidal" and self.embed_dim % 2:
            raise ConfigError("sinusoidal encodings need an even embed_dim")
        s, hop = frame_geometry(self.frame_ms, self.hop_ms, self.sample_rate)
        if self.num_samples % hop:
            raise ConfigError(f"{self.num_samples} samples are not divisible by hop {hop}")
        frames = self.num_samples // hop
        for i, c in enumerate(self.context_sizes):
            if i > 0:
                k = self.pool_kernels[i - 1]
                if k < 1 or frames % k:
                    raise ConfigError(f"block {i}: {frames} tokens not divisible by pool kernel {k}")
                frames //= k
            if c < 2 or c % 2:
                raise ConfigError(f"block {i}: context size {c} must be even and >= 2")
            if frames % c:
                raise ConfigError(f"block {i}: {frames} tokens not divisible by context {c}")

    def to_flat(self) -> dict:
        return cfgio.to_flat(self, "model.")

    @classmethod
    def from_flat(cls, flat) -> "ModelConfig":
        return cfgio.from_flat(cls, flat, "model.")

    def canonical(self) -> str:
        return cfgio.dumps(self.to_flat())

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


# -- shape helpers ---------------------------------------------------------

def context_partition(x: Tensor, c: int) -> Tensor:
    """(..., F, D) -> (..., F/c, c, D): disjoint groups of consecutive tokens."""
    f, d = x.shape[-2], x.shape[-1]
    if c < 1 or f % c:
        raise ConfigError(f"{f} tokens are not divisible by context size {c}")
    return x.reshape(x.shape[:-2] + (f // c, c, d))


def context_merge(x: Tensor) -> Tensor:
    """Inverse of :func:`context_partition`."""
    g, c, d = x.shape[-3:]
    return x.reshape(x.shape[:-3] + (g * c, d))


def circular_shift(x: Tensor, s: int) -> Tensor:
    """Left circular shift along the token axis: ``out[j] = x[(j + s) % F]``."""
    f = x.shape[-2]
    if not 0 <= s < f:
        raise ConfigError(f"shift {s} outside [0, {f})")
    return roll(as_tensor(x), -s, axis=-2) if s else as_tensor(x)


def build_shift_mask(c: int) -> np.ndarray:
    """Attention mask (True = allowed) for the context that wraps after a c/2 shift.

    Its first half holds tokens from the end of the sequence and its second
    half tokens from the start; the two halves may not attend to each other.
    """
    if c < 2 or c % 2:
        raise ConfigError(f"context size {c} must be even")
    group = np.arange(c) >= c // 2
    return group[:, None] == group[None, :]


def shifted_context_masks(n_contexts: int, c: int) -> np.ndarray:
    """(G, 1, c, c) mask: everything allowed except across the wrapped halves."""
    masks = np.ones((n_contexts, 1, c, c), dtype=bool)
    masks[-1, 0] = build_shift_mask(c)
    return masks


def sinusoidal_encoding(n_positions: int, dim: int) -> np.ndarray:
    pos = np.arange(n_positions)[:, None]
    freq = 1.0 / 10000.0 ** (np.arange(0, dim, 2) / dim)
    pe = np.zeros((n_positions, dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


def add_sinusoidal_pe(x: Tensor, enabled: bool = True) -> Tensor:
    if not enabled:
        return x
    f, d = x.shape[-2], x.shape[-1]
    if d % 2:
        raise ConfigError("sinusoidal encodings need an even feature size")
    return x + sinusoidal_encoding(f, d).astype(x.dtype)


# -- modules ---------------------------------------------------------------

class Module:
    """Minimal container that discovers parameters through its attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32):
        bound = 1.0 / np.sqrt(fan_in)
        self.w = Parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), dtype=dtype)
        self.b = Parameter(np.zeros(fan_out), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.gain = Parameter(np.ones(dim), dtype=dtype)
        self.bias = Parameter(np.zeros(dim), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class MLP(Module):
    def __init__(self, dim: int, ratio: int, rng, dtype=np.float32):
        self.fc1 = Linear(dim, ratio * dim, rng, dtype)
        self.fc2 = Linear(ratio * dim, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class ContextAttention(Module):
    """Multi-head self-attention applied independently inside each context."""

    def __init__(self, dim: int, heads: int, rng, dtype=np.float32):
        bound = 1.0 / np.sqrt(dim)
        for key in ("q", "k", "v", "o"):
            setattr(self, "w" + key, Parameter(rng.uniform(-bound, bound, (dim, dim)), dtype=dtype))
            setattr(self, "b" + key, Parameter(np.zeros(dim), dtype=dtype))
        self.heads = heads

    def __call__(self, contexts: Tensor, mask=None, recorder=None, tag: str = "") -> Tensor:
        return context_mhsa(contexts, self, self.heads, mask, recorder, tag)


def context_mhsa(contexts: Tensor, attn: ContextAttention, heads: int, mask=None,
                 recorder: Optional[list] = None, tag: str = "") -> Tensor:
    """Scaled dot-product attention within each context of a (..., G, c, D) tensor.

    ``mask`` broadcasts against the (..., G, heads, c, c) attention logits.
    """
    *lead, c, d = contexts.shape
    if d % heads:
        raise ConfigError(f"heads={heads} must divide feature size {d}")
    dh = d // heads

    def split(t):
        return t.reshape(tuple(lead) + (c, heads, dh)).swapaxes(-3, -2)

    q = split(contexts @ attn.wq + attn.bq)
    k = split(contexts @ attn.wk + attn.bk)
    v = split(contexts @ attn.wv + attn.bv)
    logits = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    probs = softmax_masked(logits, mask)
    if recorder is not None:
        recorder.append({"layer": tag, "probs": probs.data.copy(),
                         "mask": None if mask is None else np.asarray(mask)})
    out = (probs @ v).swapaxes(-3, -2).reshape(tuple(lead) + (c, d))
    return out @ attn.wo + attn.bo


class TransformerLayer(Module):
    """Pre-norm layer: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng, dtype=np.float32):
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = ContextAttention(dim, heads, rng, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, mlp_ratio, rng, dtype)

    def __call__(self, x: Tensor, context: int, mask=None, recorder=None, tag="") -> Tensor:
        h = context_partition(self.ln1(x), context)
        h = context_merge(self.attn(h, mask, recorder, tag))
        x = x + h
        return x + self.mlp(self.ln2(x))


class SwinBlock(Module):
    """Two transformer layers: plain contexts, then contexts shifted by c/2."""

    def __init__(self, dim: int, context: int, heads: int, mlp_ratio: int, rng, dtype=np.float32):
        if context % 2:
            raise ConfigError(f"context size {context} must be even")
        self.l1 = TransformerLayer(dim, heads, mlp_ratio, rng, dtype)
        self.l2 = TransformerLayer(dim, heads, mlp_ratio, rng, dtype)
        self.context = context

    def __call__(self, x: Tensor, recorder=None, tag="") -> Tensor:
        c = self.context
        f = x.shape[-2]
        if f % c:
            raise ConfigError(f"{f} tokens are not divisible by context size {c}")
        x = self.l1(x, c, None, recorder, tag + ".l1")
        s = c // 2
        shifted = circular_shift(x, s)
        shifted = self.l2(shifted, c, shifted_context_masks(f // c, c), recorder, tag + ".l2")
        return roll(shifted, s, axis=-2)


class LinearMerge(Module):
    """Concatenate each window of ``kernel`` tokens and project back to D."""

    def __init__(self, dim: int, kernel: int, rng, dtype=np.float32):
        self.proj = Linear(kernel * dim, dim, rng, dtype)
        self.kernel = kernel

    def __call__(self, x: Tensor) -> Tensor:
        f, d = x.shape[-2], x.shape[-1]
        if f % self.kernel:
            raise ConfigError(f"{f} tokens are not divisible by merge kernel {self.kernel}")
        return self.proj(x.reshape(x.shape[:-2] + (f // self.kernel, self.kernel * d)))


def merge_frames(x: Tensor, kernel: int, mode: str = "max_pool", merger: LinearMerge | None = None) -> Tensor:
    if mode == "max_pool":
        return max_pool_1d(x, kernel)
    if mode == "avg_pool":
        return avg_pool_1d(x, kernel)
    if mode == "linear":
        if merger is None:
            raise ConfigError("linear merge needs a LinearMerge module")
        return merger(x)
    raise ConfigError(f"unknown merge mode {mode!r}")


class LocalBlock(Module):
    def __init__(self, index: int, cfg: ModelConfig, rng, dtype=np.float32):
        self.kernel = cfg.pool_kernels[index - 1] if index > 0 else None
        if self.kernel is not None and cfg.merge_mode == "linear":
            self.merge = LinearMerge(cfg.embed_dim, self.kernel, rng, dtype)
        self.swin = SwinBlock(cfg.embed_dim, cfg.context_sizes[index], cfg.heads,
                              cfg.mlp_ratio, rng, dtype)
        self.mode = cfg.merge_mode

    def __call__(self, x: Tensor, recorder=None, tag="") -> Tensor:
        if self.kernel is not None:
            x = merge_frames(x, self.kernel, self.mode, getattr(self, "merge", None))
        return self.swin(x, recorder, tag + ".swin")


class MOSHead(Module):
    def __init__(self, dim: int, hidden: int, rng, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, hidden, rng, dtype)
        self.out = Linear(hidden, 1, rng, dtype)

    def __call__(self, e: Tensor) -> Tensor:
        return self.out(gelu(self.fc2(gelu(self.fc1(e)))))


def mos_head(e: Tensor, head: MOSHead) -> Tensor:
    return head(e)


class AttentiveMOS(Module):
    """The full network. Call :meth:`forward` on (batch, frames, samples) input."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        cfg = config if config is not None else ModelConfig()
        cfg.validate()
        rng = np.random.default_rng(seed)
        d = cfg.embed_dim
        self.embed = Linear(cfg.frame_samples, d, rng, dtype)
        self.local = [LocalBlock(i, cfg, rng, dtype) for i in range(len(cfg.context_sizes))]
        self.mos_token = Parameter(rng.normal(0.0, 0.02, size=(1, d)), dtype=dtype)
        self.glob = [TransformerLayer(d, cfg.heads, cfg.mlp_ratio, rng, dtype)
                     for _ in range(cfg.global_layers)]
        self.head = MOSHead(d, cfg.head_hidden, rng, dtype)
        self._config = cfg
        self._dtype = np.dtype(dtype)
        self.recorder: Optional[list] = None
        self.token_ladder: list = []
        for name, p in self.named_parameters():
            p.name = name

    @property
    def config(self) -> ModelConfig:
        return self._config

    @property
    def dtype(self):
        return self._dtype

    def named_parameters(self, prefix: str = ""):
        items = list(Module.named_parameters(self, prefix))
        return [(n.replace("glob.", "global.", 1) if n.startswith("glob.") else n, p) for n, p in items]

    def state(self) -> dict:
        return {n: p for n, p in self.named_parameters()}

    def astype(self, dtype) -> "AttentiveMOS":
        for p in self.parameters():
            p.astype(dtype)
        self._dtype = np.dtype(dtype)
        return self

    def param_count(self) -> int:
        return param_count(self)

    # -- forward pieces --------------------------------------------------
    def frames_from_waveforms(self, waveforms) -> np.ndarray:
        x = np.asarray(waveforms, dtype=np.float64)
        if x.ndim == 1:
            x = x[None]
        if x.shape[-1] != self._config.num_samples:
            raise ShapeError(
                f"model expects {self._config.num_samples} samples "
                f"({self._config.duration_s} s at {self._config.sample_rate} Hz), got {x.shape[-1]}"
            )
        return frame_samples(x, self._config.frame_samples, self._config.hop_samples)

    def embed_frames(self, frames) -> Tensor:
        frames = np.asarray(frames, dtype=self._dtype)
        if frames.ndim == 2:
            frames = frames[None]
        if frames.shape[-1] != self._config.frame_samples:
            raise ConfigError(
                f"frames carry {frames.shape[-1]} samples, config expects {self._config.frame_samples}"
            )
        x = self.embed(Tensor(frames))
        return add_sinusoidal_pe(x, self._config.positional_encoding == "sinusoidal")

    def local_features(self, frames) -> Tensor:
        """Frames (B, F, S) -> tokens (B, N, D) after all local blocks."""
        x = self.embed_frames(frames)
        if x.shape[-2] != self._config.num_frames:
            raise ConfigError(f"got {x.shape[-2]} frames, config expects {self._config.num_frames}")
        ladder = []
        for i, block in enumerate(self.local):
            x = block(x, self.recorder, f"local.{i}")
            ladder.append(x.shape[-2])
        self.token_ladder = ladder
        return x

    def global_forward(self, tokens: Tensor) -> Tensor:
        """Tokens (B, N, D) -> predictions (B,)."""
        tokens = as_tensor(tokens)
        b, n, d = tokens.shape
        mos = broadcast_to(self.mos_token.reshape(1, 1, d), (b, 1, d))
        x = concat([mos, tokens], axis=1)
        for i, layer in enumerate(self.glob):
            x = layer(x, n + 1, None, self.recorder, f"global.{i}")
        return self.head(x[:, 0, :]).reshape(b)

    def forward(self, frames) -> Tensor:
        return self.global_forward(self.local_features(frames))

    __call__ = forward

    def predict_waveforms(self, waveforms, batch_size: int = 8) -> np.ndarray:
        """Predictions for a stack of waveforms, computed without a tape."""
        x = np.asarray(waveforms, dtype=np.float64)
        if x.ndim == 1:
            x = x[None]
        out = []
        with no_grad():
            for start in range(0, len(x), batch_size):
                frames = self.frames_from_waveforms(x[start:start + batch_size])
                out.append(self.forward(frames).data.astype(np.float64))
        return np.concatenate(out) if out else np.zeros(0)


def param_count(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def layer_param_count(dim: int, mlp_ratio: int) -> int:
    """Closed-form size of one pre-norm transformer layer."""
    attn = 4 * dim * dim + 4 * dim
    norms = 2 * 2 * dim
    mlp = 2 * mlp_ratio * dim * dim + mlp_ratio * dim + dim
    return attn + norms + mlp
