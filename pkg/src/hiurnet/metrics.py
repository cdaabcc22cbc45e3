"""Regression metrics: RMSE, MAE, Pearson correlation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MetricsReport:
    rmse: float
    mae: float
    pcc: float
    n: int
    degenerate_pcc: bool = False

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "rmse": self.rmse,
            "mae": self.mae,
            "pcc": self.pcc,
            "degenerate_pcc": self.degenerate_pcc,
        }


def _pair(pred, truth, min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size < min_len:
        raise ValueError(f"need at least {min_len} values, got {p.size}")
    return p, t


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def pcc_with_flag(pred, truth) -> tuple[float, bool]:
    """Sample Pearson correlation; ``(0.0, True)`` when either side is constant."""
    p, t = _pair(pred, truth, min_len=2)
    dp = p - p.mean()
    dt = t - t.mean()
    sp = np.sqrt(np.dot(dp, dp))
    st = np.sqrt(np.dot(dt, dt))
    if sp == 0.0 or st == 0.0:
        return 0.0, True
    r = float(np.dot(dp, dt) / (sp * st))
    return min(1.0, max(-1.0, r)), False


def pcc(pred, truth) -> float:
    return pcc_with_flag(pred, truth)[0]


def report(pred, truth) -> MetricsReport:
    p, t = _pair(pred, truth)
    if p.size >= 2:
        r, degenerate = pcc_with_flag(p, t)
    else:
        r, degenerate = 0.0, True
    return MetricsReport(rmse(p, t), mae(p, t), r, int(p.size), degenerate)
