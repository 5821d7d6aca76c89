"""Calibrated trajectory-based difficulty scores (TDS).

A small boosted regressor learns to predict the base ensemble's held-out
loss from trajectory descriptors; an empirical CDF over the fitting
scores calibrates its output into [0, 1], where higher means harder.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import gbm, trajectory
from .dataset import REGRESSION
from .trajectory import TrajectoryConfig

log = logging.getLogger(__name__)


def default_regressor_config(seed: int = 0) -> gbm.GbmConfig:
    """Lightweight difficulty-regressor settings: 50 trees, depth 3."""
    return gbm.GbmConfig(
        n_estimators=50,
        max_depth=3,
        learning_rate=0.1,
        subsample=1.0,
        colsample_bytree=1.0,
        seed=seed,
    )


@dataclass(frozen=True)
class TdsScore:
    value: float  # ECDF-calibrated, in [0, 1]
    raw: float    # unnormalized regressor output


@dataclass(frozen=True)
class TdsScores:
    """Vector of scores; indexable to the scalar type."""

    value: np.ndarray
    raw: np.ndarray

    def __len__(self) -> int:
        return len(self.value)

    def __getitem__(self, i: int) -> TdsScore:
        return TdsScore(float(self.value[i]), float(self.raw[i]))


@dataclass
class DifficultyModel:
    regressor: gbm.Ensemble
    ecdf_support: np.ndarray  # sorted ascending
    config: TrajectoryConfig
    ensemble_fingerprint: str
    feature_names: tuple[str, ...]
    degenerate: bool = False  # all fitting losses identical

    def __post_init__(self):
        self.ecdf_support = np.asarray(self.ecdf_support, dtype=np.float64)
        if np.any(np.diff(self.ecdf_support) < 0):
            raise ValueError("ecdf_support must be sorted ascending")


def fit_tds(
    ensemble: gbm.Ensemble,
    X_eval: np.ndarray,
    y_eval: np.ndarray,
    config: TrajectoryConfig,
    regressor_config: gbm.GbmConfig | None = None,
    seed: int = 0,
) -> DifficultyModel:
    """Fit the difficulty regressor and its ECDF on an evaluation set.

    The regressor maps each row's trajectory descriptors to its final
    prediction loss; the sorted fitted scores become the ECDF support.
    A constant-loss evaluation set still yields a valid model, flagged
    `degenerate`.
    """
    X_eval = np.asarray(X_eval, dtype=np.float64)
    y_eval = np.asarray(y_eval, dtype=np.float64)
    if len(X_eval) < 20:
        raise ValueError("evaluation set must have at least 20 rows")
    features, losses, names = trajectory.build_feature_matrix(
        ensemble, X_eval, y_eval, config
    )
    degenerate = bool(losses.max() == losses.min())
    if degenerate:
        log.warning("degenerate evaluation set: all losses identical")
    # seed feeds the default regressor; an explicit config keeps its own seed
    rc = regressor_config if regressor_config is not None else default_regressor_config(seed)
    regressor = gbm.fit(features, losses, REGRESSION, rc)
    raw_scores = gbm.predict_margin(regressor, features)
    return DifficultyModel(
        regressor=regressor,
        ecdf_support=np.sort(raw_scores),
        config=config,
        ensemble_fingerprint=gbm.fingerprint(ensemble),
        feature_names=names,
        degenerate=degenerate,
    )


def ecdf_eval(model: DifficultyModel, raw: float) -> float:
    """Fraction of fitting scores <= raw, via binary search."""
    n = len(model.ecdf_support)
    return float(np.searchsorted(model.ecdf_support, raw, side="right")) / n


def _check_fingerprint(model: DifficultyModel, ensemble: gbm.Ensemble) -> None:
    if gbm.fingerprint(ensemble) != model.ensemble_fingerprint:
        raise ValueError(
            "ensemble fingerprint mismatch: difficulty model was fitted "
            "against a different base ensemble"
        )


def score_batch(
    model: DifficultyModel,
    ensemble: gbm.Ensemble,
    X: np.ndarray,
    targets: np.ndarray | None = None,
) -> TdsScores:
    """TDS for each row of X; element-wise equal to score().

    `targets` is only needed (and then required) when the model was
    fitted with the residual trajectory stream enabled.
    """
    _check_fingerprint(model, ensemble)
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        return TdsScores(np.empty(0), np.empty(0))
    features, _, names = trajectory.build_feature_matrix(
        ensemble, X, targets, model.config
    )
    if names != model.feature_names:
        raise ValueError("feature layout mismatch between fit and score")
    raw = gbm.predict_margin(model.regressor, features)
    n = len(model.ecdf_support)
    value = np.searchsorted(model.ecdf_support, raw, side="right") / n
    return TdsScores(value=value, raw=raw)


def score(
    model: DifficultyModel,
    ensemble: gbm.Ensemble,
    x: np.ndarray,
    y: float | None = None,
) -> TdsScore:
    """TDS for a single feature row."""
    targets = None if y is None else np.array([y])
    return score_batch(model, ensemble, np.asarray(x)[None, :], targets)[0]


_FORMAT_VERSION = 1


def to_json(model: DifficultyModel) -> str:
    doc = {
        "format_version": _FORMAT_VERSION,
        "regressor": json.loads(gbm.to_json(model.regressor)),
        "ecdf_support": model.ecdf_support.tolist(),
        "config": {
            "delta": model.config.delta,
            "head_size": model.config.head_size,
            "tail_size": model.config.tail_size,
            "use_residual_trajectory": model.config.use_residual_trajectory,
            "compress_head": model.config.compress_head,
            "compress_target_len": model.config.compress_target_len,
            "ablation": model.config.ablation,
            "peak_median": model.config.peak_median,
        },
        "ensemble_fingerprint": model.ensemble_fingerprint,
        "feature_names": list(model.feature_names),
        "degenerate": model.degenerate,
    }
    return json.dumps(doc, sort_keys=True)


def from_json(text: str) -> DifficultyModel:
    doc = json.loads(text)
    if doc.get("format_version") != _FORMAT_VERSION:
        raise ValueError(f"unsupported difficulty model version {doc.get('format_version')!r}")
    return DifficultyModel(
        regressor=gbm.from_json(json.dumps(doc["regressor"])),
        ecdf_support=np.array(doc["ecdf_support"]),
        config=TrajectoryConfig(**doc["config"]),
        ensemble_fingerprint=doc["ensemble_fingerprint"],
        feature_names=tuple(doc["feature_names"]),
        degenerate=doc["degenerate"],
    )
