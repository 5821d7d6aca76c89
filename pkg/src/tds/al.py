"""Pool-based active learning driven by difficulty scores.

Each round trains an ensemble on the labeled set, refits the difficulty
model on the calibration split, scores the pool, and moves the acquired
batch into the labeled set. The learning curve records validation and
test metrics for every trained model (rounds + 1 points).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import difficulty, explain, gbm, trajectory
from .dataset import BINARY_CLASSIFICATION, REGRESSION, Dataset, SplitSets
from .trajectory import TrajectoryConfig

log = logging.getLogger(__name__)

ACQUISITIONS = (
    "tds",
    "tds_segment",
    "random",
    "uncertainty_entropy",
    "uncertainty_margin",
    "uncertainty_least_confident",
    "uncertainty_residual",
)

_UNCERTAINTY_VARIANTS = ("entropy", "margin", "least_confident", "residual")


@dataclass(frozen=True)
class SegmentAcquisitionConfig:
    top_fraction: float = 0.1  # hard subset = top fraction of the pool by TDS
    n_clusters: int = 4
    n_features_per_segment: int = 5
    coverage_target: float = 80.0
    pca_components: int = 5


@dataclass(frozen=True)
class AlConfig:
    batch_size: int
    rounds: int = 30
    acquisition: str = "tds"
    mix_ratio: float = 0.5
    mix_rounds: int | None = None  # None: 3 for regression, all rounds for classification
    seed: int = 0
    gbm: gbm.GbmConfig = field(default_factory=gbm.GbmConfig)
    trajectory: TrajectoryConfig | None = None  # None: residual stream off for regression
    segment: SegmentAcquisitionConfig = field(default_factory=SegmentAcquisitionConfig)

    def __post_init__(self):
        if self.acquisition not in ACQUISITIONS:
            raise ValueError(f"unknown acquisition {self.acquisition!r}")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must be in [0, 1]")
        if self.batch_size < 1 or self.rounds < 1:
            raise ValueError("batch_size and rounds must be >= 1")


@dataclass
class LearningCurve:
    rounds: np.ndarray
    labeled_counts: np.ndarray
    val_metric: np.ndarray
    test_metric: np.ndarray
    metric_kind: str  # "rmse" or "log_loss"


@dataclass
class AlResult:
    curve: LearningCurve
    selection_seconds: list[float]
    acquisition: str
    seed: int


def default_trajectory_config(task: str) -> TrajectoryConfig:
    """Residual (loss-trend) stream on for classification, off for regression."""
    return TrajectoryConfig(use_residual_trajectory=(task == BINARY_CLASSIFICATION))


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores; ties broken by lower index."""
    return np.argsort(-scores, kind="stable")[:k]


def select_tds(
    scores: np.ndarray,
    batch_size: int,
    mix_ratio: float,
    round_index: int,
    mix_rounds: int,
    seed: int,
) -> np.ndarray:
    """Top-score batch, blended with uniform draws during mixing rounds.

    While round_index < mix_rounds, ceil(mix_ratio * b) slots go to the
    highest scores and the rest are drawn uniformly from the remaining
    pool; afterwards the batch is the plain top-b.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if batch_size > n:
        raise ValueError("batch_size exceeds pool size")
    if round_index >= mix_rounds:
        return _top_k(scores, batch_size)
    n_top = math.ceil(mix_ratio * batch_size)
    top = _top_k(scores, n_top)
    n_rand = batch_size - n_top
    if n_rand == 0:
        return top
    rest = np.setdiff1d(np.arange(n), top)
    rng = np.random.default_rng([seed, round_index])
    drawn = rng.choice(rest, size=n_rand, replace=False)
    return np.concatenate([top, drawn])


def select_tds_segment(
    pool_rows: np.ndarray,
    segment_set: explain.SegmentSet,
    scores: np.ndarray,
    batch_size: int,
) -> np.ndarray:
    """Top-score batch within segment-matching pool rows.

    Falls back to global top scores for any unfilled slots when fewer
    than batch_size rows match the selected segments.
    """
    matches = explain.segment_filter(pool_rows, segment_set)
    if len(matches) >= batch_size:
        within = _top_k(scores[matches], batch_size)
        return matches[within]
    log.info(
        "segment filter matched %d rows < batch %d; filling from global ranking",
        len(matches),
        batch_size,
    )
    chosen = list(matches)
    taken = np.zeros(len(scores), dtype=bool)
    taken[matches] = True
    for i in _top_k(scores, len(scores)):
        if len(chosen) == batch_size:
            break
        if not taken[i]:
            chosen.append(int(i))
    return np.array(chosen, dtype=np.intp)


def select_uncertainty(
    ensemble: gbm.Ensemble,
    pool_rows: np.ndarray,
    variant: str,
    batch_size: int,
) -> np.ndarray:
    """Top-batch by a classic uncertainty score.

    entropy/margin/least_confident need probabilities (classification
    only); residual is the task-free proxy |F_{T/2} - F_T|, the
    disagreement between the half and full ensemble.
    """
    if variant not in _UNCERTAINTY_VARIANTS:
        raise ValueError(f"unknown uncertainty variant {variant!r}")
    if variant == "residual":
        traj = gbm.trajectory_batch(ensemble, pool_rows)
        half = traj[:, traj.shape[1] // 2 - 1] if traj.shape[1] >= 2 else traj[:, 0]
        s = np.abs(half - traj[:, -1])
    else:
        if ensemble.task != BINARY_CLASSIFICATION:
            raise ValueError(f"uncertainty variant {variant!r} requires classification")
        p = gbm.predict_proba(ensemble, pool_rows)
        if variant == "entropy":
            eps = 1e-15
            pc = np.clip(p, eps, 1.0 - eps)
            s = -(pc * np.log(pc) + (1.0 - pc) * np.log(1.0 - pc))
        elif variant == "margin":
            s = -np.abs(2.0 * p - 1.0)
        else:  # least_confident
            s = 1.0 - np.maximum(p, 1.0 - p)
    return _top_k(s, batch_size)


def _metric(ensemble: gbm.Ensemble, X: np.ndarray, y: np.ndarray) -> float:
    if ensemble.task == REGRESSION:
        resid = gbm.predict_margin(ensemble, X) - y
        return float(np.sqrt(np.mean(resid**2)))
    z = gbm.predict_margin(ensemble, X) / ensemble.temperature
    loss = y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)
    return float(loss.mean())


def run_al(dataset: Dataset, splits: SplitSets, config: AlConfig) -> AlResult:
    """Execute one seeded active-learning run and return its curve."""
    if splits.al_initial is None or splits.al_pool is None:
        raise ValueError("active-learning splits required (al_initial/al_pool)")
    if config.batch_size * config.rounds > len(splits.al_pool):
        raise ValueError("batch_size * rounds exceeds the pool size")

    X, y = dataset.features, dataset.targets
    task = dataset.task
    tc = config.trajectory if config.trajectory is not None else default_trajectory_config(task)
    mix_rounds = config.mix_rounds
    if mix_rounds is None:
        mix_rounds = 3 if task == REGRESSION else config.rounds

    calib = splits.calibration
    test = splits.test
    labeled = np.array(splits.al_initial, dtype=np.intp)
    pool = np.array(splits.al_pool, dtype=np.intp)

    records = []
    times: list[float] = []
    r = 0
    while r <= config.rounds:
        if task == BINARY_CLASSIFICATION and np.unique(y[labeled]).size < 2:
            if r == config.rounds or len(pool) < config.batch_size:
                raise ValueError("single-class labeled set and no room to redraw")
            log.warning("round %d: single-class labeled set; redrawing a random batch", r)
            rng = np.random.default_rng([config.seed, r, 1])
            picked = rng.choice(len(pool), size=config.batch_size, replace=False)
            labeled = np.concatenate([labeled, pool[picked]])
            pool = np.delete(pool, picked)
            r += 1
            continue

        ensemble = gbm.fit(X[labeled], y[labeled], task, config.gbm)
        if task == BINARY_CLASSIFICATION:
            if np.unique(y[calib]).size < 2:
                log.warning("single-class calibration split; skipping temperature scaling")
            else:
                ensemble = gbm.temperature_scale(ensemble, X[calib], y[calib])

        records.append(
            (r, len(labeled), _metric(ensemble, X[calib], y[calib]), _metric(ensemble, X[test], y[test]))
        )
        if r == config.rounds:
            break

        start = time.perf_counter()
        picked = _acquire(
            config, task, tc, ensemble, X, y, calib, pool, r, mix_rounds, dataset
        )
        times.append(time.perf_counter() - start)

        labeled = np.concatenate([labeled, pool[picked]])
        pool = np.delete(pool, picked)
        r += 1

    rounds_arr, counts, vals, tests = map(np.array, zip(*records))
    curve = LearningCurve(
        rounds=rounds_arr,
        labeled_counts=counts,
        val_metric=vals,
        test_metric=tests,
        metric_kind="rmse" if task == REGRESSION else "log_loss",
    )
    return AlResult(curve, times, config.acquisition, config.seed)


def _acquire(config, task, tc, ensemble, X, y, calib, pool, round_index, mix_rounds, dataset):
    b = config.batch_size
    if config.acquisition == "random":
        rng = np.random.default_rng([config.seed, round_index])
        return rng.choice(len(pool), size=b, replace=False)
    if config.acquisition.startswith("uncertainty_"):
        variant = config.acquisition.removeprefix("uncertainty_")
        return select_uncertainty(ensemble, X[pool], variant, b)

    model = difficulty.fit_tds(ensemble, X[calib], y[calib], tc, seed=config.seed)
    pool_targets = y[pool] if tc.use_residual_trajectory else None
    scores = difficulty.score_batch(model, ensemble, X[pool], pool_targets).value

    if config.acquisition == "tds":
        return select_tds(scores, b, config.mix_ratio, round_index, mix_rounds, config.seed)

    # tds_segment
    sc = config.segment
    n_hard = max(sc.n_clusters, math.ceil(sc.top_fraction * len(pool)))
    hard = _top_k(scores, n_hard)
    shap = explain.shap_matrix(ensemble, X[pool][hard])
    calib_scores = difficulty.score_batch(
        model, ensemble, X[calib], y[calib] if tc.use_residual_trajectory else None
    ).value
    segments = explain.build_segments(
        X[pool][hard],
        scores[hard],
        shap,
        dataset,
        X[calib],
        calib_scores,
        n_clusters=sc.n_clusters,
        n_features_per_segment=sc.n_features_per_segment,
        coverage_target=sc.coverage_target,
        pca_components=sc.pca_components,
        seed=config.seed,
    )
    return select_tds_segment(X[pool], segments, scores, b)


def aulc(curve: LearningCurve, segment: tuple[float, float] | None = None) -> float:
    """Area under metric vs labeled count, normalized by the count span.

    `segment` restricts to a fraction range of the round axis, e.g.
    (0.75, 1.0) for the late part of the run.
    """
    rounds = curve.rounds
    x = curve.labeled_counts.astype(np.float64)
    m = curve.test_metric
    if segment is not None:
        f0, f1 = segment
        last = rounds[-1]
        mask = (rounds >= f0 * last - 1e-9) & (rounds <= f1 * last + 1e-9)
        x, m = x[mask], m[mask]
    if len(x) < 2:
        raise ValueError("need at least 2 curve points in the segment")
    area = float(np.sum((m[1:] + m[:-1]) / 2.0 * np.diff(x)))
    return area / float(x[-1] - x[0])
