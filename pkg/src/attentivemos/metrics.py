"""Utterance-level evaluation metrics: MSE, Pearson and Spearman correlation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .errors import ShapeError

UNDEFINED = "undefined"


def _pair(y, mu) -> tuple:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    if y.shape != mu.shape:
        raise ShapeError(f"length mismatch: {y.shape[0]} predictions vs {mu.shape[0]} labels")
    if y.size == 0:
        raise ShapeError("metrics need at least one pair")
    return y, mu


def mse_metric(y, mu) -> float:
    y, mu = _pair(y, mu)
    d = y - mu
    return float(np.mean(d * d))


def pcc(y, mu) -> Optional[float]:
    """Pearson correlation, or ``None`` when either side has zero variance or n < 2."""
    y, mu = _pair(y, mu)
    if y.size < 2:
        return None
    yc, mc = y - y.mean(), mu - mu.mean()
    denom = np.sqrt(np.dot(yc, yc) * np.dot(mc, mc))
    if denom == 0.0:
        return None
    return float(np.clip(np.dot(yc, mc) / denom, -1.0, 1.0))


def ranks(x) -> np.ndarray:
    """1-based ranks; ties share their average rank."""
    return rankdata(np.asarray(x, dtype=np.float64), method="average")


def srcc(y, mu) -> Optional[float]:
    y, mu = _pair(y, mu)
    if y.size < 2:
        return None
    return pcc(ranks(y), ranks(mu))


@dataclass
class EvalReport:
    mse: float
    pcc: Optional[float]
    srcc: Optional[float]
    n: int

    @classmethod
    def compute(cls, y, mu) -> "EvalReport":
        y, mu = _pair(y, mu)
        return cls(mse_metric(y, mu), pcc(y, mu), srcc(y, mu), int(y.size))

    @staticmethod
    def _fmt(v) -> str:
        return UNDEFINED if v is None else repr(float(v))

    def to_csv(self, header: bool = False) -> str:
        line = f"{self._fmt(self.mse)},{self._fmt(self.pcc)},{self._fmt(self.srcc)},{self.n}"
        return ("mse,pcc,srcc,n\n" + line) if header else line

    def __str__(self) -> str:
        def f(v):
            return UNDEFINED if v is None else f"{v:.4f}"
        return f"MSE={f(self.mse)} PCC={f(self.pcc)} SRCC={f(self.srcc)} n={self.n}"
