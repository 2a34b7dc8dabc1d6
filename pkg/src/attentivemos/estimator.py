"""scikit-learn compatible wrappers.

``X`` is a 2-d array of waveforms (one utterance per row, sampled at
``sample_rate``); rows are padded or cut to ``duration_s`` before use.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import checkpoint
from .audio import Waveform, frame_geometry, frame_samples, normalize_duration
from .metrics import EvalReport
from .model import AttentiveMOS, ModelConfig
from .numerics import OptimConfig
from .training import (
    DEFAULT_SCHEDULE,
    Dataset,
    LossConfig,
    SustainSchedule,
    TrainConfig,
    sustain_run,
    train,
)


def _fit_length(X: np.ndarray, duration_s: float, sample_rate: int) -> np.ndarray:
    n = int(round(duration_s * sample_rate))
    if X.shape[1] == n:
        return X
    return np.stack([normalize_duration(Waveform(row, sample_rate), duration_s).samples for row in X])


class WaveFramer(TransformerMixin, BaseEstimator):
    """Turn waveform rows into overlapping frames, shape (n, frames, samples)."""

    def __init__(self, frame_ms=2.0, hop_ms=1.0, sample_rate=16000, duration_s=None):
        self.frame_ms = frame_ms
        self.hop_ms = hop_ms
        self.sample_rate = sample_rate
        self.duration_s = duration_s

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        frame_geometry(self.frame_ms, self.hop_ms, self.sample_rate)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=np.float64)
        if self.duration_s is not None:
            X = _fit_length(X, self.duration_s, self.sample_rate)
        s, hop = frame_geometry(self.frame_ms, self.hop_ms, self.sample_rate)
        return frame_samples(X, s, hop)


class AttentiveMOSRegressor(RegressorMixin, BaseEstimator):
    """Waveform -> MOS regressor.

    Parameters mirror :class:`ModelConfig`, :class:`LossConfig` and
    :class:`TrainConfig`; defaults follow the published setup (D=16,
    12 global layers, AdamW at 1e-4, batch 8, 250 epochs).

    Pass ``sigma`` (per-utterance rating std) to :meth:`fit` when
    ``loss="ours"``.
    """

    def __init__(
        self,
        embed_dim=16,
        context_sizes=(10, 4, 4, 4, 4, 2, 2),
        pool_kernels=(5, 2, 2, 2, 2, 2),
        global_layers=12,
        heads=4,
        mlp_ratio=4,
        merge_mode="max_pool",
        positional_encoding="none",
        duration_s=20.48,
        sample_rate=16000,
        loss="ours",
        epsilon=0.01,
        batch_size=8,
        epochs=250,
        learning_rate=1e-4,
        weight_decay=0.01,
        clip_norm=1.0,
        shuffle=True,
        random_state=0,
    ):
        self.embed_dim = embed_dim
        self.context_sizes = context_sizes
        self.pool_kernels = pool_kernels
        self.global_layers = global_layers
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.merge_mode = merge_mode
        self.positional_encoding = positional_encoding
        self.duration_s = duration_s
        self.sample_rate = sample_rate
        self.loss = loss
        self.epsilon = epsilon
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.shuffle = shuffle
        self.random_state = random_state

    @classmethod
    def from_configs(cls, model: ModelConfig, loss: LossConfig, train_cfg: TrainConfig, **overrides):
        params = dict(
            embed_dim=model.embed_dim, context_sizes=model.context_sizes, pool_kernels=model.pool_kernels,
            global_layers=model.global_layers, heads=model.heads, mlp_ratio=model.mlp_ratio,
            merge_mode=model.merge_mode, positional_encoding=model.positional_encoding,
            duration_s=model.duration_s, sample_rate=model.sample_rate, loss=loss.kind,
            epsilon=loss.epsilon, batch_size=train_cfg.batch_size, epochs=train_cfg.epochs,
            learning_rate=train_cfg.optim.learning_rate, weight_decay=train_cfg.optim.weight_decay,
            clip_norm=train_cfg.optim.clip_norm, shuffle=train_cfg.shuffle, random_state=train_cfg.seed,
        )
        params.update(overrides)
        return cls(**params)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            embed_dim=self.embed_dim, context_sizes=tuple(self.context_sizes),
            pool_kernels=tuple(self.pool_kernels), global_layers=self.global_layers, heads=self.heads,
            mlp_ratio=self.mlp_ratio, merge_mode=self.merge_mode,
            positional_encoding=self.positional_encoding, duration_s=self.duration_s,
            sample_rate=self.sample_rate,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(self.loss, self.epsilon)

    def train_config(self) -> TrainConfig:
        optim = OptimConfig(learning_rate=self.learning_rate, weight_decay=self.weight_decay,
                            clip_norm=self.clip_norm)
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs, seed=self.random_state,
                           shuffle=self.shuffle, optim=optim)

    def _dataset(self, X, y, sigma=None) -> Dataset:
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        X = _fit_length(X, self.duration_s, self.sample_rate)
        if sigma is not None:
            sigma = check_array(np.asarray(sigma, dtype=np.float64).reshape(-1, 1)).ravel()
        return Dataset(X, y, sigma)

    def fit(self, X, y, sigma=None, eval_set=None):
        """Train from scratch. ``eval_set=(X_dev, y_dev)`` logs dev metrics per epoch."""
        data = self._dataset(X, y, sigma)
        dev = self._dataset(*eval_set) if eval_set is not None else None
        model = AttentiveMOS(self.model_config(), seed=self.random_state)
        result = train(model, data, self.loss_config(), self.train_config(), dev=dev)
        self.model_ = result.model
        self.history_ = result.history
        self.n_features_in_ = np.asarray(X).shape[1]
        return self

    def _set_fitted(self, model: AttentiveMOS, history=None, n_features=None):
        self.model_ = model
        self.history_ = history or []
        self.n_features_in_ = n_features if n_features is not None else model.config.num_samples
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        X = _fit_length(X, self.duration_s, self.sample_rate)
        return self.model_.predict_waveforms(X, self.batch_size)

    def evaluate(self, X, y) -> EvalReport:
        return EvalReport.compute(self.predict(X), y)

    @property
    def n_parameters_(self) -> int:
        check_is_fitted(self, "model_")
        return self.model_.param_count()

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        checkpoint.save(self.model_, path)

    @classmethod
    def load(cls, path, **params) -> "AttentiveMOSRegressor":
        model = checkpoint.load(path)
        est = cls.from_configs(model.config, LossConfig(), TrainConfig(), **params)
        return est._set_fitted(model)


class SelfTeachingMOSRegressor(RegressorMixin, BaseEstimator):
    """Sequential self-teaching around an :class:`AttentiveMOSRegressor`.

    Stage 0 trains on the dataset labels with the base estimator's loss; each
    later stage trains a fresh copy with MSE on a convex mix of the labels and
    the frozen earlier-stage predictions. :meth:`predict` uses the last stage.
    """

    def __init__(self, estimator=None, schedule=DEFAULT_SCHEDULE):
        self.estimator = estimator
        self.schedule = schedule

    def fit(self, X, y, sigma=None, eval_set=None):
        base = clone(self.estimator) if self.estimator is not None else AttentiveMOSRegressor()
        schedule = SustainSchedule(self.schedule)
        data = base._dataset(X, y, sigma)
        dev = base._dataset(*eval_set) if eval_set is not None else None
        result = sustain_run(data, base.loss_config(), schedule, base.train_config(),
                             base.model_config(), dev=dev)
        n_features = np.asarray(X).shape[1]
        self.stages_ = []
        for m, stage in enumerate(result.stages):
            est = clone(base) if m == 0 else clone(base).set_params(loss="mse")
            self.stages_.append(est._set_fitted(stage.model, stage.history, n_features))
        self.stage_labels_ = result.labels
        self.n_features_in_ = n_features
        return self

    def predict(self, X, stage: int = -1):
        check_is_fitted(self, "stages_")
        return self.stages_[stage].predict(X)
