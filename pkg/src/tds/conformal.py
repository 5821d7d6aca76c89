"""Split conformal prediction, optionally stratified by difficulty bins.

Vanilla mode calibrates one finite-sample quantile of the nonconformity
scores; tds_mondrian stratifies calibration into TDS quantile bins and
calibrates each bin separately, targeting conditional coverage. A
`mondrian` baseline conditions on predicted-value bins instead.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import difficulty, gbm
from .dataset import BINARY_CLASSIFICATION, REGRESSION

log = logging.getLogger(__name__)

VANILLA = "vanilla"
TDS_MONDRIAN = "tds_mondrian"
MONDRIAN = "mondrian"  # predicted-value bins, the non-TDS stratified baseline

_MODES = (VANILLA, TDS_MONDRIAN, MONDRIAN)


@dataclass(frozen=True)
class PredictionRegion:
    """Regression interval [lo, hi] or a classification label subset.

    For regression, membership is decided by |y - center| <= radius so
    that diagnostics and the region agree bit-exactly.
    """

    lo: float = math.nan
    hi: float = math.nan
    center: float = math.nan
    radius: float = math.nan
    labels: frozenset[int] | None = None

    def contains(self, y: float) -> bool:
        if self.labels is not None:
            return int(y) in self.labels
        return abs(y - self.center) <= self.radius

    @property
    def width(self) -> float:
        if self.labels is not None:
            return float(len(self.labels))
        return self.hi - self.lo


@dataclass
class CpModel:
    mode: str
    alpha: float
    task: str
    bin_edges: np.ndarray        # K-1 interior edges over the conditioning score
    quantiles: np.ndarray        # per-bin q_k
    bin_counts: np.ndarray       # per-bin calibration sizes
    bin_scores: list[np.ndarray]  # per-bin sorted nonconformities
    ensemble_fingerprint: str

    @property
    def n_bins(self) -> int:
        return len(self.quantiles)


def _nonconformity(ensemble: gbm.Ensemble, X, y) -> np.ndarray:
    if ensemble.task == REGRESSION:
        return np.abs(y - gbm.predict_margin(ensemble, X))
    p = gbm.predict_proba(ensemble, X)
    p_true = np.where(y == 1.0, p, 1.0 - p)
    return 1.0 - p_true


def _conditioning_values(
    mode: str,
    ensemble: gbm.Ensemble,
    model: difficulty.DifficultyModel | None,
    X: np.ndarray,
) -> np.ndarray:
    if mode == VANILLA:
        return np.zeros(len(X))
    if mode == TDS_MONDRIAN:
        if model is None:
            raise ValueError("tds_mondrian mode requires a difficulty model")
        return difficulty.score_batch(model, ensemble, X).value
    if mode == MONDRIAN:
        if ensemble.task == REGRESSION:
            return gbm.predict_margin(ensemble, X)
        return gbm.predict_proba(ensemble, X)
    raise ValueError(f"unknown conformal mode {mode!r}")


def _assign_bins(edges: np.ndarray, values: np.ndarray) -> np.ndarray:
    # boundary values fall to the lower bin; values above the top edge to the top bin
    return np.searchsorted(edges, values, side="left")


def finite_sample_quantile(scores: np.ndarray, alpha: float) -> float:
    """The ceil((1-alpha)(n+1))-th smallest score, clamped to the maximum."""
    ordered = np.sort(scores)
    n = len(ordered)
    idx = math.ceil((1.0 - alpha) * (n + 1))
    return float(ordered[min(idx, n) - 1])


def fit_cp(
    ensemble: gbm.Ensemble,
    model: difficulty.DifficultyModel | None,
    X_cal: np.ndarray,
    y_cal: np.ndarray,
    alpha: float,
    mode: str = VANILLA,
    n_bins: int = 10,
) -> CpModel:
    """Calibrate per-bin finite-sample quantiles of the nonconformity.

    Bin edges are conditioning-score quantiles of the calibration set;
    K is reduced (with a warning) until every bin is non-empty.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    if mode not in _MODES:
        raise ValueError(f"unknown conformal mode {mode!r}")
    X_cal = np.asarray(X_cal, dtype=np.float64)
    y_cal = np.asarray(y_cal, dtype=np.float64)
    if mode == VANILLA:
        n_bins = 1
    if len(X_cal) < 2 * n_bins:
        raise ValueError(f"calibration set too small for {n_bins} bins")
    if model is not None and gbm.fingerprint(ensemble) != model.ensemble_fingerprint:
        raise ValueError("difficulty model was fitted against a different ensemble")

    scores = _nonconformity(ensemble, X_cal, y_cal)
    cond = _conditioning_values(mode, ensemble, model, X_cal)

    K = n_bins
    while True:
        if K == 1:
            edges = np.empty(0)
            bins = np.zeros(len(X_cal), dtype=np.intp)
        else:
            edges = np.quantile(cond, np.arange(1, K) / K)
            bins = _assign_bins(edges, cond)
        counts = np.bincount(bins, minlength=K)
        if np.all(counts > 0):
            break
        K -= 1
        log.warning("empty conditioning bin; reducing bin count to %d", K)

    bin_scores = [np.sort(scores[bins == k]) for k in range(K)]
    quantiles = np.array([finite_sample_quantile(s, alpha) for s in bin_scores])
    return CpModel(
        mode=mode,
        alpha=alpha,
        task=ensemble.task,
        bin_edges=edges,
        quantiles=quantiles,
        bin_counts=counts,
        bin_scores=bin_scores,
        ensemble_fingerprint=gbm.fingerprint(ensemble),
    )


def _regions_batch(
    cp: CpModel,
    ensemble: gbm.Ensemble,
    model: difficulty.DifficultyModel | None,
    X: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """(predictions, per-row quantile) after bin lookup."""
    if gbm.fingerprint(ensemble) != cp.ensemble_fingerprint:
        raise ValueError("conformal model was fitted against a different ensemble")
    cond = _conditioning_values(cp.mode, ensemble, model, X)
    bins = _assign_bins(cp.bin_edges, cond)
    q = cp.quantiles[bins]
    if cp.task == REGRESSION:
        center = gbm.predict_margin(ensemble, X)
    else:
        center = gbm.predict_proba(ensemble, X)
    return center, q


def predict_region(
    cp: CpModel,
    ensemble: gbm.Ensemble,
    model: difficulty.DifficultyModel | None,
    x: np.ndarray,
) -> PredictionRegion:
    """Prediction region for one row: interval (regression) or label set."""
    center, q = _regions_batch(cp, ensemble, model, np.asarray(x, dtype=np.float64)[None, :])
    c, qk = float(center[0]), float(q[0])
    if cp.task == REGRESSION:
        return PredictionRegion(lo=c - qk, hi=c + qk, center=c, radius=qk)
    labels = frozenset(
        lab for lab, p in ((1, c), (0, 1.0 - c)) if p >= 1.0 - qk
    )
    return PredictionRegion(labels=labels)


@dataclass
class CpReport:
    coverage: float
    mean_width: float
    mace: float
    maxce: float
    trend_slope: float
    per_decile: list[dict]
    alpha: float
    mode: str


def coverage_error_stats(decile_coverages: np.ndarray, alpha: float) -> tuple[float, float, float]:
    """(MACE, MaxCE, least-squares trend slope) of per-decile coverage."""
    target = 1.0 - alpha
    err = np.abs(decile_coverages - target)
    d = np.arange(1, len(decile_coverages) + 1, dtype=np.float64)
    dc = d - d.mean()
    slope = float(dc @ (decile_coverages - decile_coverages.mean()) / (dc @ dc))
    return float(err.mean()), float(err.max()), slope


def cp_diagnostics(
    cp: CpModel,
    ensemble: gbm.Ensemble,
    model: difficulty.DifficultyModel | None,
    X_test: np.ndarray,
    y_test: np.ndarray,
    tds_scores: np.ndarray,
) -> CpReport:
    """Coverage and width overall and across TDS deciles of the test set.

    Deciles are quantile bins of the supplied difficulty scores (1 =
    easiest). Regression coverage uses |y - center| <= q, the same
    comparison PredictionRegion.contains applies.
    """
    X_test = np.asarray(X_test, dtype=np.float64)
    y_test = np.asarray(y_test, dtype=np.float64)
    tds_scores = np.asarray(tds_scores, dtype=np.float64)
    n = len(X_test)
    if n == 0:
        raise ValueError("empty test set")
    if n < 100:
        log.warning("fewer than 10 test rows per decile; coverage errors will be noisy")

    center, q = _regions_batch(cp, ensemble, model, X_test)
    if cp.task == REGRESSION:
        covered = np.abs(y_test - center) <= q
        widths = 2.0 * q
    else:
        p1 = center
        p_true = np.where(y_test == 1.0, p1, 1.0 - p1)
        covered = p_true >= 1.0 - q
        widths = (p1 >= 1.0 - q).astype(float) + ((1.0 - p1) >= 1.0 - q).astype(float)

    edges = np.quantile(tds_scores, np.arange(1, 10) / 10)
    deciles = _assign_bins(edges, tds_scores)
    per_decile = []
    decile_cov = []
    for d in range(10):
        mask = deciles == d
        count = int(mask.sum())
        cov = float(covered[mask].mean()) if count else math.nan
        per_decile.append({"decile": d + 1, "n": count, "coverage": cov})
        if count:
            decile_cov.append(cov)
    mace, maxce, slope = coverage_error_stats(np.array(decile_cov), cp.alpha)
    return CpReport(
        coverage=float(covered.mean()),
        mean_width=float(widths.mean()),
        mace=mace,
        maxce=maxce,
        trend_slope=slope,
        per_decile=per_decile,
        alpha=cp.alpha,
        mode=cp.mode,
    )
