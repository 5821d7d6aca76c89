"""Linear and rank correlation statistics for the correlation study."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CorrelationReport:
    pearson_r: float  # nan when undefined
    spearman_rho: float
    n: int
    pearson_defined: bool = True
    spearman_defined: bool = True


def _validate_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d vectors of equal length")
    if len(x) < 2:
        raise ValueError("need at least 2 observations")
    return x, y


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Product-moment correlation; nan when either variance is zero."""
    x, y = _validate_pair(x, y)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        return math.nan
    r = float(xc @ yc) / denom
    return min(1.0, max(-1.0, r))


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties receiving the average of their positions."""
    x = np.asarray(x)
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    avg = ends - (counts - 1) / 2.0
    return avg[inverse]


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation of average ranks; nan when a vector is all ties."""
    x, y = _validate_pair(x, y)
    return pearson(average_ranks(x), average_ranks(y))


def correlation_report(x: np.ndarray, y: np.ndarray) -> CorrelationReport:
    r = pearson(x, y)
    rho = spearman(x, y)
    return CorrelationReport(
        pearson_r=r,
        spearman_rho=rho,
        n=len(np.asarray(x)),
        pearson_defined=not math.isnan(r),
        spearman_defined=not math.isnan(rho),
    )
