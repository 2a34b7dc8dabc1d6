"""Binary checkpoint format.

Layout (all integers 4-byte little-endian unsigned)::

    b"AMOS" | version | len | canonical model config (UTF-8)
    then per parameter, sorted by name:
    len | name (UTF-8) | rank | dims... | float32 LE values
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import config as cfgio
from .errors import CheckpointError
from .model import AttentiveMOS, ModelConfig

MAGIC = b"AMOS"
VERSION = 1


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _lp(text: str) -> bytes:
    raw = text.encode("utf-8")
    return _u32(len(raw)) + raw


def dumps(model: AttentiveMOS) -> bytes:
    parts = [MAGIC, _u32(VERSION), _lp(model.config.canonical())]
    for name, p in sorted(model.named_parameters()):
        parts.append(_lp(name))
        parts.append(_u32(p.ndim))
        parts.extend(_u32(d) for d in p.shape)
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save(model: AttentiveMOS, path) -> None:
    Path(path).write_bytes(dumps(model))


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob, self.pos, self.source = blob, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.source}: truncated at byte {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{self.source}: bad UTF-8 ({exc})") from None

    @property
    def done(self) -> bool:
        return self.pos == len(self.blob)


def loads(blob: bytes, expected: ModelConfig | None = None, source: str = "<checkpoint>") -> AttentiveMOS:
    """Rebuild a model. ``expected`` (if given) must equal the stored config."""
    r = _Reader(blob, source)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{source}: bad magic, not an AMOS checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    text = r.text()
    try:
        stored = ModelConfig.from_flat(cfgio.loads(text))
    except Exception as exc:
        raise CheckpointError(f"{source}: invalid embedded config ({exc})") from None
    if stored.canonical() != text:
        raise CheckpointError(f"{source}: embedded config is not in canonical form")
    if expected is not None and expected.canonical() != text:
        raise CheckpointError(f"{source}: checkpoint config does not match the requested model config")

    model = AttentiveMOS(stored)
    state = model.state()
    seen = set()
    while not r.done:
        name = r.text()
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        if name not in state:
            raise CheckpointError(f"{source}: unknown parameter {name!r}")
        if shape != state[name].shape:
            raise CheckpointError(f"{source}: {name} has shape {shape}, model expects {state[name].shape}")
        state[name].assign(values)
        seen.add(name)
    missing = sorted(set(state) - seen)
    if missing:
        raise CheckpointError(f"{source}: missing parameters {missing[:3]}{'...' if len(missing) > 3 else ''}")
    return model


def load(path, expected: ModelConfig | None = None) -> AttentiveMOS:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return loads(blob, expected, str(path))
