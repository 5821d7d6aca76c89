"""Trajectory descriptors: fixed-length feature vectors from cumulative outputs.

A trajectory is the length-T sequence of cumulative ensemble outputs for
one sample. Each configured stream (the raw output path, and optionally
the per-step loss path) contributes one block of named statistics; all
extraction is vectorized over (n, T) matrices and bit-identical to the
row-at-a-time path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gbm
from .dataset import BINARY_CLASSIFICATION, REGRESSION

_RATIO_EPS = 1e-12

_BASE_FEATURES = (
    "std",
    "mad",
    "peak_magnitude",
    "auc_abs",
    "area_above_delta",
    "longest_monotonic_len",
    "sign_switches",
    "value_flips",
    "head_slope",
    "tail_slope",
    "head_auc",
    "tail_auc",
    "head_std",
    "tail_std",
    "early_late_std_ratio",
    "early_late_auc_ratio",
)

# head/tail windows, their ratios, and the delta-thresholded area
_ABLATED_OUT = frozenset(
    {
        "area_above_delta",
        "head_slope",
        "tail_slope",
        "head_auc",
        "tail_auc",
        "head_std",
        "tail_std",
        "early_late_std_ratio",
        "early_late_auc_ratio",
    }
)


@dataclass(frozen=True)
class TrajectoryConfig:
    delta: float = 0.1
    head_size: float = 0.3
    tail_size: float = 0.2
    use_residual_trajectory: bool = True
    compress_head: int | None = None
    compress_target_len: int | None = None
    ablation: bool = False
    peak_median: bool = False  # median (not max) deviation from the start value

    def __post_init__(self):
        if not 0.0 < self.head_size < 1.0 or not 0.0 < self.tail_size < 1.0:
            raise ValueError("head_size and tail_size must be in (0, 1)")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if (self.compress_head is None) != (self.compress_target_len is None):
            raise ValueError("compression requires both compress_head and compress_target_len")
        if self.compress_head is not None:
            if self.compress_target_len > self.compress_head:
                raise ValueError("compress_target_len must be <= compress_head")
            if self.compress_target_len < 1:
                raise ValueError("compress_target_len must be >= 1")


@dataclass(frozen=True)
class FeatureVector:
    """Named trajectory descriptors for one sample."""

    names: tuple[str, ...]
    values: np.ndarray

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def __len__(self) -> int:
        return len(self.names)


def stream_feature_names(config: TrajectoryConfig) -> tuple[str, ...]:
    if config.ablation:
        return tuple(f for f in _BASE_FEATURES if f not in _ABLATED_OUT)
    return _BASE_FEATURES


def feature_names(config: TrajectoryConfig) -> tuple[str, ...]:
    """Column names of the full feature vector, stream-prefixed."""
    per_stream = stream_feature_names(config)
    names = [f"raw_{f}" for f in per_stream]
    if config.use_residual_trajectory:
        names += [f"res_{f}" for f in per_stream]
    return tuple(names)


def _trapezoid(V: np.ndarray) -> np.ndarray:
    """Trapezoidal area under each row at unit step spacing."""
    return 0.5 * (V[:, 1:] + V[:, :-1]).sum(axis=1)


def _longest_true_run(mask: np.ndarray) -> np.ndarray:
    """Longest consecutive run of True per row, in steps (0 if none)."""
    idx = np.arange(mask.shape[1])
    last_false = np.maximum.accumulate(np.where(~mask, idx[None, :], -1), axis=1)
    return (idx[None, :] - last_false).max(axis=1)


def _slope(W: np.ndarray) -> np.ndarray:
    """Least-squares slope of each row against 0..w-1."""
    w = W.shape[1]
    xc = np.arange(w) - (w - 1) / 2.0
    return (W - W.mean(axis=1, keepdims=True)) @ xc / float(xc @ xc)


def _window_sizes(T: int, config: TrajectoryConfig) -> tuple[int, int]:
    head = min(T, max(2, math.ceil(config.head_size * T)))
    tail = min(T, max(2, math.ceil(config.tail_size * T)))
    return head, tail


def extract_stream_features(V: np.ndarray, config: TrajectoryConfig) -> np.ndarray:
    """(n, F) descriptor block for one trajectory stream.

    Sign-adjusted so larger means harder: the longest monotonic segment
    length (in points; a constant trajectory scores T) is negated, all
    other statistics already increase with instability.
    """
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2:
        raise ValueError("expected an (n, T) trajectory matrix")
    n, T = V.shape
    if T < 2:
        raise ValueError("trajectories must have length >= 2")
    if not np.all(np.isfinite(V)):
        raise ValueError("non-finite trajectory values")

    absV = np.abs(V)
    diffs = np.diff(V, axis=1)
    head, tail = _window_sizes(T, config)
    H = V[:, :head]
    L = V[:, T - tail :]

    cols = {}
    cols["std"] = V.std(axis=1)
    cols["mad"] = np.median(np.abs(V - np.median(V, axis=1, keepdims=True)), axis=1)
    dev = np.abs(V - V[:, :1])
    cols["peak_magnitude"] = np.median(dev, axis=1) if config.peak_median else dev.max(axis=1)
    cols["auc_abs"] = _trapezoid(absV)
    cols["area_above_delta"] = _trapezoid(np.maximum(absV - config.delta, 0.0))
    run_points = np.maximum(_longest_true_run(diffs >= 0), _longest_true_run(diffs <= 0)) + 1
    cols["longest_monotonic_len"] = -run_points.astype(float)
    if T >= 3:
        cols["sign_switches"] = (diffs[:, :-1] * diffs[:, 1:] < 0).sum(axis=1).astype(float)
    else:
        cols["sign_switches"] = np.zeros(n)
    cols["value_flips"] = (V[:, :-1] * V[:, 1:] < 0).sum(axis=1).astype(float)
    cols["head_slope"] = _slope(H)
    cols["tail_slope"] = _slope(L)
    head_auc = _trapezoid(np.abs(H))
    tail_auc = _trapezoid(np.abs(L))
    cols["head_auc"] = head_auc
    cols["tail_auc"] = tail_auc
    head_std = H.std(axis=1)
    tail_std = L.std(axis=1)
    cols["head_std"] = head_std
    cols["tail_std"] = tail_std
    cols["early_late_std_ratio"] = tail_std / (head_std + _RATIO_EPS)
    cols["early_late_auc_ratio"] = tail_auc / (head_auc + _RATIO_EPS)

    return np.column_stack([cols[f] for f in stream_feature_names(config)])


def extract_features(
    raw: np.ndarray,
    residual: np.ndarray | None,
    config: TrajectoryConfig,
) -> FeatureVector:
    """Descriptor vector for a single sample's trajectory stream(s)."""
    blocks = [extract_stream_features(np.asarray(raw)[None, :], config)]
    if config.use_residual_trajectory:
        if residual is None:
            raise ValueError("config enables the residual stream but none was given")
        blocks.append(extract_stream_features(np.asarray(residual)[None, :], config))
    return FeatureVector(feature_names(config), np.hstack(blocks)[0])


def residual_trajectory_matrix(V: np.ndarray, y: np.ndarray, task: str) -> np.ndarray:
    """Per-step loss of each partial prediction: (n, T) like the input."""
    y = np.asarray(y, dtype=np.float64)[:, None]
    if task == REGRESSION:
        return (V - y) ** 2
    if task == BINARY_CLASSIFICATION:
        # log-loss of sigmoid(F_t) vs y, stable via logaddexp
        return y * np.logaddexp(0.0, -V) + (1.0 - y) * np.logaddexp(0.0, V)
    raise ValueError(f"unknown task {task!r}")


def residual_trajectory(traj: np.ndarray, y: float, task: str) -> np.ndarray:
    """Loss sequence for one sample's trajectory."""
    return residual_trajectory_matrix(np.asarray(traj, dtype=np.float64)[None, :], np.array([y]), task)[0]


def _block_offsets(head: int, target_len: int) -> tuple[np.ndarray, np.ndarray]:
    base, rem = divmod(head, target_len)
    sizes = np.full(target_len, base)
    sizes[:rem] += 1
    offsets = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    return offsets, sizes


def compress_matrix(V: np.ndarray, head: int, target_len: int) -> np.ndarray:
    """Block means of the first `head` columns, partitioned into
    target_len contiguous blocks whose sizes differ by at most one."""
    V = np.asarray(V, dtype=np.float64)
    T = V.shape[1]
    if head > T:
        raise ValueError(f"head={head} exceeds trajectory length {T}")
    if target_len > head:
        raise ValueError(f"target_len={target_len} exceeds head={head}")
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    offsets, sizes = _block_offsets(head, target_len)
    return np.add.reduceat(V[:, :head], offsets, axis=1) / sizes


def compress(traj: np.ndarray, head: int, target_len: int) -> np.ndarray:
    """Compressed trajectory for a single sample."""
    return compress_matrix(np.asarray(traj, dtype=np.float64)[None, :], head, target_len)[0]


def final_losses(ensemble: gbm.Ensemble, margins: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-row loss of the final prediction F_T (squared error / log-loss)."""
    y = np.asarray(y, dtype=np.float64)
    if ensemble.task == REGRESSION:
        return (margins - y) ** 2
    return y * np.logaddexp(0.0, -margins) + (1.0 - y) * np.logaddexp(0.0, margins)


def build_feature_matrix(
    ensemble: gbm.Ensemble,
    X: np.ndarray,
    targets: np.ndarray | None,
    config: TrajectoryConfig,
    include_base: bool = True,
) -> tuple[np.ndarray, np.ndarray | None, tuple[str, ...]]:
    """Row-wise descriptor matrix plus final-prediction losses.

    Compression (when configured) is applied to both streams before
    extraction; the residual stream is derived from the full-length
    trajectory so per-step losses keep their meaning, then block-averaged
    with the same partition. Returns (features, losses-or-None, names).
    """
    raw_full = gbm.trajectory_batch(ensemble, X, include_base=include_base)
    T = raw_full.shape[1]

    compressing = config.compress_head is not None
    if compressing:
        raw_stream = compress_matrix(raw_full, config.compress_head, config.compress_target_len)
    else:
        raw_stream = raw_full

    blocks = [extract_stream_features(raw_stream, config)]
    if config.use_residual_trajectory:
        if targets is None:
            raise ValueError("residual stream enabled but targets are missing")
        base_adjust = 0.0 if include_base else ensemble.base_score
        res_full = residual_trajectory_matrix(raw_full + base_adjust, targets, ensemble.task)
        if compressing:
            res_stream = compress_matrix(res_full, config.compress_head, config.compress_target_len)
        else:
            res_stream = res_full
        blocks.append(extract_stream_features(res_stream, config))

    features = np.hstack(blocks)
    losses = None
    if targets is not None:
        margins = raw_full[:, T - 1] + (0.0 if include_base else ensemble.base_score)
        losses = final_losses(ensemble, margins, targets)
    return features, losses, feature_names(config)
