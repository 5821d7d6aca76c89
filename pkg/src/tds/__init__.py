"""Trajectory-based difficulty scoring for gradient-boosted tree ensembles.

Per-tree cumulative prediction trajectories are summarized into
interpretable descriptors; a small regressor trained to predict held-out
loss, calibrated through an empirical CDF, yields a difficulty score in
[0, 1] that drives active learning, selective prediction, stratified
conformal prediction, and SHAP-based failure-mode segments.
"""

from . import al, conformal, dataset, difficulty, explain, gbm, metrics, selective, trajectory

__all__ = [
    "al",
    "conformal",
    "dataset",
    "difficulty",
    "explain",
    "gbm",
    "metrics",
    "selective",
    "trajectory",
]

__version__ = "0.1.0"
