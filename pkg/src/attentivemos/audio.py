"""Waveform I/O, duration normalisation and wave framing."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, WavError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return self.n / self.sample_rate


@dataclass
class FrameMatrix:
    frames: np.ndarray
    frame_ms: float
    hop_ms: float
    sample_rate: int = SAMPLE_RATE

    @property
    def num_frames(self) -> int:
        return self.frames.shape[-2]

    @property
    def samples_per_frame(self) -> int:
        return self.frames.shape[-1]


def _chunks(blob: bytes, path):
    pos = 12
    while pos + 8 <= len(blob):
        cid, size = struct.unpack_from("<4sI", blob, pos)
        body = blob[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavError(f"{path}: chunk {cid!r} truncated ({len(body)} of {size} bytes)")
        yield cid, body
        pos += 8 + size + (size & 1)


def read_wav(path, expected_rate: int | None = SAMPLE_RATE) -> Waveform:
    """Read a mono PCM16 or float32 RIFF/WAVE file.

    PCM16 samples are scaled by 1/32768. ``expected_rate=None`` accepts any
    sample rate.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise WavError(f"{path}: {exc.strerror or exc}") from exc
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise WavError(f"{path}: not a RIFF/WAVE file")

    fmt = data = None
    for cid, body in _chunks(blob, path):
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavError(f"{path}: fmt chunk too short")
            fmt = body
        elif cid == b"data":
            data = body
    if fmt is None:
        raise WavError(f"{path}: missing fmt chunk")
    if data is None:
        raise WavError(f"{path}: missing data chunk")

    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt)
    if tag == _EXTENSIBLE:
        if len(fmt) < 26:
            raise WavError(f"{path}: extensible fmt chunk too short")
        (tag,) = struct.unpack_from("<H", fmt, 24)
    if channels != 1:
        raise WavError(f"{path}: expected mono audio, found {channels} channels")
    if expected_rate is not None and rate != expected_rate:
        raise WavError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")

    if tag == _PCM and bits == 16:
        if len(data) % 2:
            raise WavError(f"{path}: data chunk is not a whole number of PCM16 samples")
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _IEEE_FLOAT and bits == 32:
        if len(data) % 4:
            raise WavError(f"{path}: data chunk is not a whole number of float32 samples")
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise WavError(f"{path}: unsupported codec (format tag {tag}, {bits} bits)")
    return Waveform(samples, rate)


def write_wav(path, wave: Waveform, subtype: str = "PCM16") -> None:
    """Write ``wave`` as mono PCM16 (default) or FLOAT (IEEE float32)."""
    x = np.asarray(wave.samples, dtype=np.float64)
    if subtype == "PCM16":
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, bits = _PCM, 16
    elif subtype == "FLOAT":
        payload = x.astype("<f4").tobytes()
        tag, bits = _IEEE_FLOAT, 32
    else:
        raise ValueError(f"unknown subtype {subtype!r}")
    align = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, wave.sample_rate, wave.sample_rate * align, align, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def target_length(target_seconds: float, sample_rate: int) -> int:
    return int(round(target_seconds * sample_rate))


def normalize_duration(wave: Waveform, target_seconds: float) -> Waveform:
    """Pad with trailing zeros, or cut the tail, to exactly ``target_seconds``."""
    if not target_seconds > 0:
        raise ConfigError(f"target_seconds must be > 0, got {target_seconds}")
    n = target_length(target_seconds, wave.sample_rate)
    x = wave.samples
    if x.shape[0] > n:
        logger.warning("truncating %.3f s waveform to %.3f s", wave.duration, target_seconds)
        x = x[:n]
    elif x.shape[0] < n:
        x = np.concatenate([x, np.zeros(n - x.shape[0])])
    return Waveform(x.copy(), wave.sample_rate)


def frame_geometry(frame_ms: float, hop_ms: float, sample_rate: int = SAMPLE_RATE) -> tuple:
    """Return (samples per frame, samples per hop)."""
    s = frame_ms * sample_rate / 1000.0
    hop = hop_ms * sample_rate / 1000.0
    if s != int(s) or hop != int(hop) or hop <= 0 or s <= 0:
        raise ConfigError(f"{frame_ms} ms frames / {hop_ms} ms hops are not whole sample counts")
    return int(s), int(hop)


def frame_samples(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """Frame the last axis of ``x`` into ``n / hop`` rows of ``frame_len`` samples.

    Frames that run past the end are zero-padded.
    """
    x = np.asarray(x)
    n = x.shape[-1]
    if n % hop:
        raise ConfigError(f"{n} samples are not divisible by hop {hop}")
    n_frames = n // hop
    pad = (n_frames - 1) * hop + frame_len - n
    if pad > 0:
        widths = [(0, 0)] * (x.ndim - 1) + [(0, pad)]
        x = np.pad(x, widths)
    win = np.lib.stride_tricks.sliding_window_view(x, frame_len, axis=-1)[..., ::hop, :]
    return np.ascontiguousarray(win[..., :n_frames, :])


def frame_waveform(wave: Waveform, frame_ms: float = 2.0, hop_ms: float = 1.0) -> FrameMatrix:
    s, hop = frame_geometry(frame_ms, hop_ms, wave.sample_rate)
    return FrameMatrix(frame_samples(wave.samples, s, hop), frame_ms, hop_ms, wave.sample_rate)
