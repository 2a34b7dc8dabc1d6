"""Rated-utterance manifests and a seeded synthetic MOS corpus."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .audio import SAMPLE_RATE, Waveform, normalize_duration, read_wav, write_wav
from .errors import ManifestError

MOS_MIN, MOS_MAX = 1.0, 5.0
_CONSISTENCY_TOL = 1e-3


@dataclass
class RatedUtterance:
    audio_path: str
    mu: float
    sigma: Optional[float] = None
    ratings: Optional[list] = None

    def __post_init__(self):
        if not MOS_MIN <= self.mu <= MOS_MAX:
            raise ValueError(f"mos {self.mu} outside [{MOS_MIN}, {MOS_MAX}]")
        if self.sigma is not None and self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")


@dataclass
class Manifest:
    entries: list
    root_dir: Path = field(default_factory=lambda: Path("."))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, entry: RatedUtterance) -> Path:
        p = Path(entry.audio_path)
        return p if p.is_absolute() else Path(self.root_dir) / p

    @property
    def mu(self) -> np.ndarray:
        return np.array([e.mu for e in self.entries], dtype=np.float64)

    @property
    def sigma(self) -> Optional[np.ndarray]:
        if any(e.sigma is None for e in self.entries):
            return None
        return np.array([e.sigma for e in self.entries], dtype=np.float64)

    @property
    def has_sigma(self) -> bool:
        return self.sigma is not None

    def load_waveforms(self, duration_s: float, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
        """Read every entry and normalise it to ``duration_s``; returns (n, samples)."""
        rows = [normalize_duration(read_wav(self.resolve(e), sample_rate), duration_s).samples
                for e in self.entries]
        if not rows:
            return np.zeros((0, int(round(duration_s * sample_rate))))
        return np.stack(rows)


def rating_stats(ratings) -> tuple:
    """Mean and population standard deviation of listener ratings."""
    r = np.asarray(ratings, dtype=np.float64)
    return float(r.mean()), float(r.std())


def _cell(row: dict, key: str) -> str:
    value = row.get(key)
    return "" if value is None else value.strip()


def parse_manifest(path, root_dir=None) -> Manifest:
    """Parse a ``path,mos[,sigma][,ratings]`` CSV (ratings are ``;``-separated)."""
    path = Path(path)
    root = Path(root_dir) if root_dir is not None else path.parent
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    return parse_manifest_text(text, root, source=str(path))


def parse_manifest_text(text: str, root_dir=".", source: str = "<manifest>") -> Manifest:
    reader = csv.DictReader(io.StringIO(text))
    header = [h.strip() for h in (reader.fieldnames or [])]
    if "path" not in header or "mos" not in header:
        raise ManifestError(f"{source}: header must contain 'path' and 'mos', got {header}")
    reader.fieldnames = header
    entries, seen = [], set()
    for rowno, row in enumerate(reader, start=2):
        where = f"{source} row {rowno}"
        audio = _cell(row, "path")
        if not audio:
            raise ManifestError(f"{where}: empty path")
        if audio in seen:
            raise ManifestError(f"{where}: duplicate path {audio!r}")
        seen.add(audio)
        try:
            mos_txt, sigma_txt, ratings_txt = _cell(row, "mos"), _cell(row, "sigma"), _cell(row, "ratings")
            mos = float(mos_txt) if mos_txt else None
            sigma = float(sigma_txt) if sigma_txt else None
            ratings = [float(r) for r in ratings_txt.split(";") if r.strip()] if ratings_txt else None
        except ValueError as exc:
            raise ManifestError(f"{where}: {exc}") from None
        if ratings:
            if any(not MOS_MIN <= r <= MOS_MAX for r in ratings):
                raise ManifestError(f"{where}: rating outside [{MOS_MIN:g}, {MOS_MAX:g}]")
            r_mu, r_sigma = rating_stats(ratings)
            if mos is not None and abs(mos - r_mu) > _CONSISTENCY_TOL:
                raise ManifestError(f"{where}: mos {mos} disagrees with rating mean {r_mu:.6f}")
            if sigma is not None and len(ratings) >= 2 and abs(sigma - r_sigma) > _CONSISTENCY_TOL:
                raise ManifestError(f"{where}: sigma {sigma} disagrees with rating std {r_sigma:.6f}")
            mos = r_mu
            if len(ratings) >= 2 or sigma is None:
                sigma = r_sigma
        if mos is None:
            raise ManifestError(f"{where}: missing mos")
        if not math.isfinite(mos) or not MOS_MIN <= mos <= MOS_MAX:
            raise ManifestError(f"{where}: mos {mos} outside [{MOS_MIN:g}, {MOS_MAX:g}]")
        if sigma is not None and (not math.isfinite(sigma) or sigma < 0):
            raise ManifestError(f"{where}: sigma must be a non-negative number, got {sigma}")
        entries.append(RatedUtterance(audio, mos, sigma, ratings))
    return Manifest(entries, Path(root_dir))


def format_manifest(manifest: Manifest, extra: Optional[dict] = None) -> str:
    """Serialise to CSV; ``extra`` maps column name -> per-entry values."""
    extra = extra or {}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["path", "mos", "sigma", "ratings", *extra])
    for i, e in enumerate(manifest.entries):
        ratings = ";".join(repr(float(r)) for r in e.ratings) if e.ratings else ""
        sigma = "" if e.sigma is None else repr(float(e.sigma))
        writer.writerow([e.audio_path, repr(float(e.mu)), sigma, ratings,
                         *(repr(v[i]) if isinstance(v[i], float) else v[i] for v in extra.values())])
    return buf.getvalue()


def write_manifest(path, manifest: Manifest, extra: Optional[dict] = None) -> None:
    Path(path).write_text(format_manifest(manifest, extra), encoding="utf-8")


# -- synthetic corpus -------------------------------------------------------

@dataclass
class SynthConfig:
    n_samples: int = 200
    duration_s: float = 1.28
    snr_db_lo: float = -5.0
    snr_db_hi: float = 25.0
    listeners: int = 8
    rating_noise: float = 0.5
    seed: int = 0
    mos_midpoint_db: float = 10.0
    mos_slope_db: float = 5.0
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if not self.snr_db_lo < self.snr_db_hi:
            raise ValueError("snr range must satisfy lo < hi")
        if self.listeners < 1:
            raise ValueError("need at least one listener")
        if self.n_samples < 0 or self.duration_s <= 0:
            raise ValueError("n_samples must be >= 0 and duration_s > 0")


def mos_map(snr_db, midpoint_db: float = 10.0, slope_db: float = 5.0):
    """Logistic SNR -> MOS map saturating at 1 and 5."""
    return 1.0 + 4.0 / (1.0 + np.exp(-(np.asarray(snr_db, dtype=np.float64) - midpoint_db) / slope_db))


def synth_utterance(cfg: SynthConfig, index: int) -> tuple:
    """Return (samples, snr_db, ratings) for sample ``index``; depends only on (seed, index)."""
    rng = np.random.default_rng([cfg.seed, index])
    n = int(round(cfg.duration_s * cfg.sample_rate))
    t = np.arange(n) / cfg.sample_rate
    freqs = rng.uniform(200.0, 3000.0, size=3)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    clean = np.sin(2.0 * np.pi * freqs[:, None] * t[None, :] + phases[:, None]).sum(axis=0)
    snr = float(rng.uniform(cfg.snr_db_lo, cfg.snr_db_hi))
    noise = rng.standard_normal(n)
    p_clean, p_noise = np.mean(clean**2), np.mean(noise**2)
    noise *= np.sqrt(p_clean / (p_noise * 10.0 ** (snr / 10.0)))
    mix = clean + noise
    mix *= 0.9 / np.max(np.abs(mix))
    mu_true = float(mos_map(snr, cfg.mos_midpoint_db, cfg.mos_slope_db))
    ratings = np.clip(mu_true + rng.normal(0.0, cfg.rating_noise, size=cfg.listeners), MOS_MIN, MOS_MAX)
    return mix, snr, np.round(ratings, 4)


def synth_generate(cfg: SynthConfig, out_dir, prefix: str = "synth",
                   manifest_name: str = "manifest.csv") -> Manifest:
    """Write ``cfg.n_samples`` PCM16 WAVs plus a manifest (with an ``snr_db`` column)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries, snrs = [], []
    for i in range(cfg.n_samples):
        samples, snr, ratings = synth_utterance(cfg, i)
        name = f"{prefix}_{i:05d}.wav"
        write_wav(out_dir / name, Waveform(samples, cfg.sample_rate))
        mu, sigma = rating_stats(ratings)
        entries.append(RatedUtterance(name, mu, sigma, [float(r) for r in ratings]))
        snrs.append(snr)
    manifest = Manifest(entries, out_dir)
    write_manifest(out_dir / manifest_name, manifest, {"snr_db": snrs})
    return manifest
