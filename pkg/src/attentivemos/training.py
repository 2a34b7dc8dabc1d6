"""Losses, the mini-batch training loop and sequential self-teaching."""
from __future__ import annotations

import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Manifest
from .errors import ConfigError, LabelQualityError, ScheduleError, TrainingError
from .metrics import EvalReport
from .model import AttentiveMOS, ModelConfig
from .numerics import OptimConfig, Tensor, adamw_step, as_tensor, clip_global_norm, no_grad, zero_grad

logger = logging.getLogger(__name__)

LOSS_KINDS = ("ours", "mse", "mae")
DEFAULT_SCHEDULE = ((0.4, 0.6), (0.3, 0.3, 0.4), (0.225, 0.225, 0.25, 0.3))
_WEIGHT_SUM_TOL = 1e-9


@dataclass
class LossConfig:
    kind: str = "ours"
    epsilon: float = 0.01

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 250
    seed: int = 0
    shuffle: bool = True
    keep_best: bool = False
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")


def validate_weights(alpha: Sequence[float]) -> None:
    alpha = list(alpha)
    if not alpha:
        raise ScheduleError("empty weight list")
    if any((not math.isfinite(a)) or a < 0 for a in alpha):
        raise ScheduleError(f"weights must be finite and non-negative: {alpha}")
    total = math.fsum(alpha)
    if abs(total - 1.0) > _WEIGHT_SUM_TOL:
        raise ScheduleError(f"weights must sum to 1, got {total!r} for {alpha}")


@dataclass
class SustainSchedule:
    """Convex label weights per self-teaching stage.

    Stage ``m`` carries ``m + 1`` weights ``[a0, ..., am]``: ``a0`` scales the
    dataset label and ``ai`` the prediction of the stage ``i - 1`` model. A
    leading ``[1.0]`` entry spells out the base stage explicitly and may be
    omitted.
    """

    stages: tuple[tuple[float, ...], ...] = DEFAULT_SCHEDULE

    def __post_init__(self):
        self.stages = tuple(tuple(float(a) for a in s) for s in self.stages)
        if not self.stages:
            raise ScheduleError("schedule needs at least one stage")
        offset = len(self.stages[0]) - 1
        if offset not in (0, 1):
            raise ScheduleError("first stage must have one weight (base) or two (stage 1)")
        for j, alpha in enumerate(self.stages):
            if len(alpha) != j + 1 + offset:
                raise ScheduleError(f"stage entry {j} needs {j + 1 + offset} weights, got {len(alpha)}")
            validate_weights(alpha)

    def student_weights(self) -> list:
        """Weight lists for stages m >= 1, in order."""
        return [list(a) for a in self.stages if len(a) > 1]

    @property
    def n_students(self) -> int:
        return len(self.student_weights())


# -- losses ----------------------------------------------------------------

def loss_ours(y, mu, sigma, epsilon: float = 0.01) -> Tensor:
    """Per-sample ``ln(1 + |y - mu| / (sigma + epsilon))``."""
    if sigma is None:
        raise LabelQualityError("variance-weighted loss needs per-utterance rating std")
    if not epsilon > 0:
        raise ConfigError("epsilon must be > 0")
    y = as_tensor(y)
    mu = np.asarray(mu, dtype=y.dtype)
    sigma = np.asarray(sigma, dtype=y.dtype)
    if np.any(sigma < 0):
        raise LabelQualityError("sigma must be non-negative")
    return ((y - mu).abs() / (sigma + epsilon) + 1.0).log()


def loss_mse(y, mu) -> Tensor:
    y = as_tensor(y)
    d = y - np.asarray(mu, dtype=y.dtype)
    return d * d


def loss_mae(y, mu) -> Tensor:
    y = as_tensor(y)
    return (y - np.asarray(mu, dtype=y.dtype)).abs()


def per_sample_loss(loss: LossConfig, y, mu, sigma=None) -> Tensor:
    if loss.kind == "ours":
        return loss_ours(y, mu, sigma, loss.epsilon)
    if loss.kind == "mse":
        return loss_mse(y, mu)
    return loss_mae(y, mu)


def batch_loss(loss: LossConfig, y, mu, sigma=None) -> Tensor:
    """Arithmetic mean of the per-sample losses."""
    return per_sample_loss(loss, y, mu, sigma).mean()


# -- data in memory -------------------------------------------------------

@dataclass
class Dataset:
    """Duration-normalised waveforms with their labels, ready for batching."""

    waveforms: np.ndarray
    mu: np.ndarray
    sigma: Optional[np.ndarray] = None
    paths: Optional[list] = None

    def __post_init__(self):
        self.waveforms = np.asarray(self.waveforms, dtype=np.float64)
        if self.waveforms.ndim != 2:
            raise ConfigError("waveforms must be (n_utterances, n_samples)")
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        if self.sigma is not None:
            self.sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if len(self.mu) != len(self.waveforms) or (self.sigma is not None and len(self.sigma) != len(self.mu)):
            raise ConfigError("waveforms, mu and sigma must have the same length")
        self._frames = {}

    def __len__(self) -> int:
        return len(self.mu)

    @classmethod
    def from_manifest(cls, manifest: Manifest, config: ModelConfig) -> "Dataset":
        x = manifest.load_waveforms(config.duration_s, config.sample_rate)
        return cls(x, manifest.mu, manifest.sigma, [e.audio_path for e in manifest.entries])

    def frames_for(self, model: AttentiveMOS) -> np.ndarray:
        key = (model.config.num_samples, model.config.frame_samples, model.config.hop_samples, str(model.dtype))
        if key not in self._frames:
            self._frames[key] = model.frames_from_waveforms(self.waveforms).astype(model.dtype)
        return self._frames[key]


def predict_frames(model: AttentiveMOS, frames: np.ndarray, batch_size: int = 8) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(frames), batch_size):
            out.append(model.forward(frames[start:start + batch_size]).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def predict_dataset(model: AttentiveMOS, data: Dataset, batch_size: int = 8) -> np.ndarray:
    return predict_frames(model, data.frames_for(model), batch_size)


def evaluate(model: AttentiveMOS, data: Dataset, batch_size: int = 8) -> EvalReport:
    return EvalReport.compute(predict_dataset(model, data, batch_size), data.mu)


# -- training -------------------------------------------------------------

@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    dev_mse: Optional[float] = None
    dev_pcc: Optional[float] = None
    dev_srcc: Optional[float] = None


@dataclass
class TrainResult:
    model: AttentiveMOS
    history: list
    steps: int = 0

    def history_csv(self) -> str:
        return history_csv(self.history)


def history_csv(history: Sequence[HistoryRow]) -> str:
    def f(v):
        return "" if v is None else repr(float(v))

    buf = io.StringIO()
    buf.write("epoch,train_loss,dev_mse,dev_pcc,dev_srcc\n")
    for r in history:
        buf.write(f"{r.epoch},{f(r.train_loss)},{f(r.dev_mse)},{f(r.dev_pcc)},{f(r.dev_srcc)}\n")
    return buf.getvalue()


def train(model: AttentiveMOS, dataset: Dataset, loss: LossConfig, cfg: TrainConfig,
          labels=None, dev: Optional[Dataset] = None, step_callback=None) -> TrainResult:
    """Seeded mini-batch AdamW training with global-norm clipping.

    ``labels`` overrides ``dataset.mu`` as regression targets (used by the
    self-teaching stages). ``step_callback(step, loss)`` is called after
    every optimiser step.
    """
    targets = dataset.mu if labels is None else np.asarray(labels, dtype=np.float64).reshape(-1)
    if len(targets) != len(dataset):
        raise ConfigError(f"{len(targets)} labels for {len(dataset)} utterances")
    if loss.kind == "ours" and dataset.sigma is None:
        raise LabelQualityError("loss 'ours' needs sigma for every utterance; use mse or mae instead")

    params = model.parameters()
    frames = dataset.frames_for(model)
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    history, step = [], 0
    best = (math.inf, None)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for batch_no, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            y = model.forward(frames[idx])
            sigma = None if dataset.sigma is None else dataset.sigma[idx]
            per = per_sample_loss(loss, y, targets[idx], sigma)
            bad = ~np.isfinite(per.data)
            if bad.any():
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {batch_no}, "
                    f"sample {int(idx[np.argmax(bad)])}"
                )
            batch = per.mean()
            batch.backward()
            if cfg.optim.clip_norm is not None:
                clip_global_norm(params, cfg.optim.clip_norm)
            adamw_step(params, cfg.optim)
            zero_grad(params)
            step += 1
            total += float(per.data.astype(np.float64).sum())
            if step_callback is not None:
                step_callback(step, float(batch.data))
        row = HistoryRow(epoch, total / max(n, 1))
        if dev is not None and len(dev):
            rep = evaluate(model, dev, cfg.batch_size)
            row.dev_mse, row.dev_pcc, row.dev_srcc = rep.mse, rep.pcc, rep.srcc
            if cfg.keep_best and rep.mse < best[0]:
                best = (rep.mse, {p.name: p.data.copy() for p in params})
        history.append(row)
        logger.info("epoch %d loss %.6f dev_mse %s", epoch, row.train_loss, row.dev_mse)
    if cfg.keep_best and best[1] is not None:
        for p in params:
            p.data[...] = best[1][p.name]
    return TrainResult(model, history, step)


# -- self-teaching --------------------------------------------------------

def sustain_labels(mu, teacher_preds: Sequence, alpha: Sequence[float]):
    """Stage-m target ``a0 * mu + sum_i ai * y_{i-1}`` (works on scalars or arrays)."""
    teacher_preds = list(teacher_preds)
    alpha = list(alpha)
    if len(alpha) != len(teacher_preds) + 1:
        raise ScheduleError(f"{len(alpha)} weights for {len(teacher_preds)} teachers; need one more")
    validate_weights(alpha)
    out = alpha[0] * np.asarray(mu, dtype=np.float64)
    for a, y in zip(alpha[1:], teacher_preds):
        out = out + a * np.asarray(y, dtype=np.float64)
    return float(out) if out.ndim == 0 else out


def parameter_checksum(model: AttentiveMOS) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


@dataclass
class SustainResult:
    stages: list
    labels: list
    teacher_predictions: list
    checksums: list = field(default_factory=list)

    @property
    def models(self) -> list:
        return [s.model for s in self.stages]


def sustain_run(dataset: Dataset, base_loss: LossConfig, schedule: SustainSchedule, cfg: TrainConfig,
                model_config: ModelConfig, dev: Optional[Dataset] = None, init_seed: Optional[int] = None,
                dtype=np.float32) -> SustainResult:
    """Train the base model, then one fresh student per schedule stage.

    Teachers are frozen; each model's training-set predictions are computed
    once, right after it finishes training, and reused by later stages. Each
    finished model is checksummed and re-verified after every later stage.
    """
    seed = cfg.seed if init_seed is None else init_seed
    base = train(AttentiveMOS(model_config, seed=seed, dtype=dtype), dataset, base_loss, cfg, dev=dev)
    stages, labels = [base], [dataset.mu.copy()]
    preds = [predict_dataset(base.model, dataset, cfg.batch_size)]
    sums = [parameter_checksum(base.model)]
    mse = LossConfig("mse")
    for m, alpha in enumerate(schedule.student_weights(), start=1):
        target = sustain_labels(dataset.mu, preds[:m], alpha)
        logger.info("self-teaching stage %d with weights %s", m, alpha)
        result = train(AttentiveMOS(model_config, seed=seed, dtype=dtype), dataset, mse, cfg,
                       labels=target, dev=dev)
        stages.append(result)
        labels.append(target)
        preds.append(predict_dataset(result.model, dataset, cfg.batch_size))
        for k, (stage, digest) in enumerate(zip(stages, sums)):
            if parameter_checksum(stage.model) != digest:
                raise TrainingError(f"stage {k} parameters changed while training stage {m}")
        sums.append(parameter_checksum(result.model))
    return SustainResult(stages, labels, preds, sums)
