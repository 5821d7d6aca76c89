"""Selective prediction: risk-coverage curves, AURC, NAURC.

Rows are accepted in ascending difficulty-score order; the curve records
the mean loss of every accepted prefix. All quantities depend only on
the ordering of the scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RiskCoverageCurve:
    coverage: np.ndarray  # strictly increasing, last element 1
    risk: np.ndarray      # mean loss over each accepted prefix
    score_kind: str = ""
    risk_kind: str = ""

    def __post_init__(self):
        if len(self.coverage) != len(self.risk) or len(self.coverage) == 0:
            raise ValueError("coverage and risk must be equal-length and non-empty")


def risk_coverage(
    scores: np.ndarray,
    losses: np.ndarray,
    score_kind: str = "",
    risk_kind: str = "",
) -> RiskCoverageCurve:
    """Curve of prefix mean losses, accepting rows by ascending score.

    Ties break by row index (stable sort), so the accepted set at
    coverage k/n realizes the threshold rule for thresholds between
    consecutive distinct scores.
    """
    scores = np.asarray(scores, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    if scores.shape != losses.shape or scores.ndim != 1:
        raise ValueError("scores and losses must be 1-d vectors of equal length")
    n = len(scores)
    if n == 0:
        raise ValueError("empty input")
    order = np.argsort(scores, kind="stable")
    prefix_mean = np.cumsum(losses[order]) / np.arange(1, n + 1)
    coverage = np.arange(1, n + 1) / n
    return RiskCoverageCurve(coverage, prefix_mean, score_kind, risk_kind)


def aurc(curve: RiskCoverageCurve) -> float:
    """Trapezoidal area of risk over coverage in [1/n, 1], extended to
    coverage 0 at the first point's risk."""
    c, r = curve.coverage, curve.risk
    area = float(r[0]) * float(c[0])
    if len(c) > 1:
        area += float(np.sum((r[1:] + r[:-1]) / 2.0 * np.diff(c)))
    return area


def naurc(curve: RiskCoverageCurve) -> float:
    """AURC normalized by the risk at full coverage."""
    full_risk = float(curve.risk[-1])
    if full_risk == 0.0:
        raise ValueError("full-coverage risk is zero; NAURC undefined")
    return aurc(curve) / full_risk


def decile_points(curve: RiskCoverageCurve) -> list[tuple[float, float]]:
    """(coverage, risk) at each coverage decile, for compact reporting."""
    n = len(curve.coverage)
    out = []
    for k in range(1, 11):
        idx = max(0, int(np.ceil(k / 10 * n)) - 1)
        out.append((float(curve.coverage[idx]), float(curve.risk[idx])))
    return out
