"""Gradient-boosted decision trees with per-tree cumulative outputs.

Second-order (Newton) boosting with exact greedy splits over sorted
feature values, squared loss for regression and logistic loss for binary
classification. The trainer is deliberately deterministic: fixed seeds
reproduce identical trees, and split ties resolve to the lowest feature
index and lowest threshold.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import BINARY_CLASSIFICATION, REGRESSION

_FORMAT_VERSION = 1

#: guards against splitting on floating-point noise around zero gain
_MIN_GAIN = 1e-12


@dataclass(frozen=True)
class GbmConfig:
    n_estimators: int = 100
    max_depth: int = 6
    learning_rate: float = 0.1
    subsample: float = 0.8
    colsample_bytree: float = 0.8
    l2_leaf_regularization: float = 1.0
    min_child_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        for name in ("subsample", "colsample_bytree"):
            frac = getattr(self, name)
            if not 0.0 < frac <= 1.0:
                raise ValueError(f"{name} must be in (0, 1]")
        if self.l2_leaf_regularization < 0 or self.min_child_weight < 0:
            raise ValueError("regularization parameters must be non-negative")


@dataclass
class Tree:
    """One regression tree in flat-array form; node 0 is the root.

    `feature[i] == -1` marks a leaf. Rows with x[feature] < threshold go
    left, the rest go right. `cover` is the hessian sum of the training
    rows routed through each node (all nodes, not just leaves), and
    `default_left` records the branch reserved for missing values
    (always left; imputation upstream means it is never exercised).
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray
    default_left: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Unshrunk leaf values for each row of X."""
        idx = np.zeros(len(X), dtype=np.int32)
        while True:
            at_internal = self.feature[idx] >= 0
            if not at_internal.any():
                break
            sub = idx[at_internal]
            rows = np.nonzero(at_internal)[0]
            goes_left = X[rows, self.feature[sub]] < self.threshold[sub]
            idx[rows] = np.where(goes_left, self.left[sub], self.right[sub])
        return self.value[idx]

    def predict_row(self, x: np.ndarray) -> float:
        i = 0
        while self.feature[i] >= 0:
            i = self.left[i] if x[self.feature[i]] < self.threshold[i] else self.right[i]
        return float(self.value[i])


@dataclass
class Ensemble:
    trees: list[Tree]
    base_score: float
    learning_rate: float
    task: str
    config: GbmConfig
    temperature: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not math.isfinite(self.base_score):
            raise ValueError("base_score must be finite")

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def n_features(self) -> int:
        return self._n_features

    _n_features: int = field(default=0, repr=False)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


class _TreeBuilder:
    """Grows one tree on (gradient, hessian) pairs via exact greedy search.

    Candidate columns are sorted once at the root; splits partition the
    per-column sorted row lists stably, so no re-sorting happens below
    the root and tie order stays fixed (lowest feature index, lowest
    threshold, lowest row id).
    """

    def __init__(self, X, grad, hess, cols, config: GbmConfig):
        self.X = X
        self.grad = grad
        self.hess = hess
        self.cols = cols
        self.lam = config.l2_leaf_regularization
        self.mcw = config.min_child_weight
        self.max_depth = config.max_depth
        self._left_marker = np.zeros(len(X), dtype=bool)
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []
        self.cover: list[float] = []

    def _new_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        self.cover.append(0.0)
        return len(self.feature) - 1

    def build(self, rows: np.ndarray) -> Tree:
        order = np.argsort(self.X[np.ix_(rows, self.cols)], axis=0, kind="stable")
        self._grow(rows, rows[order], depth=0)
        n = len(self.feature)
        return Tree(
            feature=np.array(self.feature, dtype=np.int32),
            threshold=np.array(self.threshold),
            left=np.array(self.left, dtype=np.int32),
            right=np.array(self.right, dtype=np.int32),
            value=np.array(self.value),
            cover=np.array(self.cover),
            default_left=np.ones(n, dtype=bool),
        )

    def _grow(self, rows: np.ndarray, sorted_ids: np.ndarray, depth: int) -> int:
        node = self._new_node()
        G = float(self.grad[rows].sum())
        H = float(self.hess[rows].sum())
        self.cover[node] = H
        self.value[node] = -G / (H + self.lam)

        if depth >= self.max_depth or len(rows) < 2:
            return node
        best = self._best_split(sorted_ids, G, H)
        if best is None:
            return node
        _, f, thr = best

        goes_left = self.X[rows, f] < thr
        left_rows = rows[goes_left]
        right_rows = rows[~goes_left]
        marker = self._left_marker
        marker[left_rows] = True
        mask = marker[sorted_ids.T]  # (k, m): per-column membership, order kept
        k, m = mask.shape
        left_sorted = sorted_ids.T[mask].reshape(k, len(left_rows)).T
        right_sorted = sorted_ids.T[~mask].reshape(k, m - len(left_rows)).T
        marker[left_rows] = False

        self.feature[node] = f
        self.threshold[node] = thr
        self.left[node] = self._grow(left_rows, left_sorted, depth + 1)
        self.right[node] = self._grow(right_rows, right_sorted, depth + 1)
        return node

    def _best_split(self, sorted_ids, G, H):
        parent = G * G / (H + self.lam)
        Vs = self.X[sorted_ids, self.cols]
        GL = np.cumsum(self.grad[sorted_ids], axis=0)[:-1]
        HL = np.cumsum(self.hess[sorted_ids], axis=0)[:-1]
        GR = G - GL
        HR = H - HL
        valid = (Vs[1:] != Vs[:-1]) & (HL >= self.mcw) & (HR >= self.mcw)
        if not valid.any():
            return None
        gains = np.where(
            valid,
            GL * GL / (HL + self.lam) + GR * GR / (HR + self.lam) - parent,
            -np.inf,
        )
        # first max per column -> lowest threshold; first max across the
        # ascending column list -> lowest feature index
        best_row = gains.argmax(axis=0)
        col_gains = gains[best_row, np.arange(gains.shape[1])]
        j = int(np.argmax(col_gains))
        if col_gains[j] <= _MIN_GAIN:
            return None
        i = int(best_row[j])
        thr = float((Vs[i, j] + Vs[i + 1, j]) / 2.0)
        return (float(col_gains[j]), int(self.cols[j]), thr)


def fit(X: np.ndarray, y: np.ndarray, task: str, config: GbmConfig) -> Ensemble:
    """Train a boosted ensemble of exactly config.n_estimators trees.

    Each round fits one tree to the current negative gradient with
    XGBoost-style second-order leaf weights -G/(H+lambda); row and
    per-tree column subsampling are driven by config.seed.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be (n, d) with matching y")
    if len(X) < 2:
        raise ValueError("need at least 2 training rows")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite feature values")
    if task == BINARY_CLASSIFICATION:
        classes = np.unique(y)
        if not np.all(np.isin(classes, (0.0, 1.0))):
            raise ValueError("classification targets must be in {0, 1}")
        if classes.size < 2:
            raise ValueError("degenerate training set: single class present")
        rate = float(y.mean())
        base = math.log(rate / (1.0 - rate))
    elif task == REGRESSION:
        base = float(y.mean())
    else:
        raise ValueError(f"unknown task {task!r}")

    n, d = X.shape
    rng = np.random.default_rng(config.seed)
    margins = np.full(n, base)
    trees: list[Tree] = []

    n_rows_sample = max(1, int(round(config.subsample * n)))
    n_cols_sample = max(1, int(round(config.colsample_bytree * d)))

    for _ in range(config.n_estimators):
        if task == REGRESSION:
            grad = margins - y
            hess = np.ones(n)
        else:
            p = _sigmoid(margins)
            grad = p - y
            hess = p * (1.0 - p)

        if n_rows_sample < n:
            rows = np.sort(rng.choice(n, size=n_rows_sample, replace=False))
        else:
            rows = np.arange(n)
        if n_cols_sample < d:
            cols = np.sort(rng.choice(d, size=n_cols_sample, replace=False))
        else:
            cols = np.arange(d)

        tree = _TreeBuilder(X, grad, hess, cols, config).build(rows)
        trees.append(tree)
        margins += config.learning_rate * tree.predict(X)

    ens = Ensemble(
        trees=trees,
        base_score=base,
        learning_rate=config.learning_rate,
        task=task,
        config=config,
    )
    ens._n_features = d
    return ens


def predict_margin(ensemble: Ensemble, X: np.ndarray) -> np.ndarray:
    """Final cumulative output F_T for each row (base + shrunk tree sum)."""
    X = _check_rows(ensemble, X)
    out = np.full(len(X), ensemble.base_score)
    for tree in ensemble.trees:
        out += ensemble.learning_rate * tree.predict(X)
    return out


def raw_output(ensemble: Ensemble, x: np.ndarray) -> float:
    """F_T for a single feature row."""
    return float(predict_margin(ensemble, np.asarray(x)[None, :])[0])


def predict_proba(ensemble: Ensemble, X: np.ndarray) -> np.ndarray:
    """Positive-class probability sigmoid(F_T / temperature)."""
    if ensemble.task != BINARY_CLASSIFICATION:
        raise ValueError("predict_proba requires a classification ensemble")
    return _sigmoid(predict_margin(ensemble, X) / ensemble.temperature)


def trajectory_batch(
    ensemble: Ensemble, X: np.ndarray, include_base: bool = True
) -> np.ndarray:
    """(n, T) matrix of cumulative outputs [F_1 .. F_T] per row.

    F_t includes base_score by default so the last column equals
    predict_margin; include_base=False records the pure tree sum.
    """
    X = _check_rows(ensemble, X)
    n = len(X)
    T = ensemble.n_trees
    out = np.empty((n, T))
    acc = np.full(n, ensemble.base_score if include_base else 0.0)
    for t, tree in enumerate(ensemble.trees):
        acc = acc + ensemble.learning_rate * tree.predict(X)
        out[:, t] = acc
    return out


def trajectory(ensemble: Ensemble, x: np.ndarray, include_base: bool = True) -> np.ndarray:
    """Cumulative output sequence for a single row."""
    return trajectory_batch(ensemble, np.asarray(x)[None, :], include_base)[0]


def _check_rows(ensemble: Ensemble, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("expected a 2-d row matrix")
    if ensemble._n_features and X.shape[1] != ensemble._n_features:
        raise ValueError(
            f"feature dimension mismatch: got {X.shape[1]}, expected {ensemble._n_features}"
        )
    return X


def _nll(margins: np.ndarray, y: np.ndarray, tau: float) -> float:
    z = margins / tau
    # y*softplus(-z) + (1-y)*softplus(z), stable via logaddexp
    return float(np.mean(y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)))


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def fit_temperature(margins: np.ndarray, y: np.ndarray) -> float:
    """Golden-section minimizer of NLL(sigmoid(margin/tau)) over [0.05, 20].

    Search stops once the bracketing interval is below 1e-4.
    """
    y = np.asarray(y, dtype=np.float64)
    if np.unique(y).size < 2:
        raise ValueError("calibration set must contain both classes")
    margins = np.asarray(margins, dtype=np.float64)

    lo, hi = 0.05, 20.0
    a = hi - _GOLDEN * (hi - lo)
    b = lo + _GOLDEN * (hi - lo)
    fa, fb = _nll(margins, y, a), _nll(margins, y, b)
    while hi - lo >= 1e-4:
        if fa <= fb:
            hi, b, fb = b, a, fa
            a = hi - _GOLDEN * (hi - lo)
            fa = _nll(margins, y, a)
        else:
            lo, a, fa = a, b, fb
            b = lo + _GOLDEN * (hi - lo)
            fb = _nll(margins, y, b)
    return (lo + hi) / 2.0


def temperature_scale(
    ensemble: Ensemble, X_cal: np.ndarray, y_cal: np.ndarray
) -> Ensemble:
    """Return a copy with temperature minimizing calibration NLL.

    Trajectories are unaffected; only probability outputs scale.
    """
    if ensemble.task != BINARY_CLASSIFICATION:
        raise ValueError("temperature scaling requires a classification ensemble")
    tau = fit_temperature(predict_margin(ensemble, X_cal), y_cal)
    return replace(ensemble, temperature=tau)


def _core_dict(ensemble: Ensemble) -> dict:
    """Trajectory-defining fields only (temperature excluded on purpose)."""
    return {
        "task": ensemble.task,
        "base_score": ensemble.base_score,
        "learning_rate": ensemble.learning_rate,
        "n_features": ensemble._n_features,
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": t.threshold.tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "value": t.value.tolist(),
                "cover": t.cover.tolist(),
            }
            for t in ensemble.trees
        ],
    }


def to_json(ensemble: Ensemble) -> str:
    doc = _core_dict(ensemble)
    doc["format_version"] = _FORMAT_VERSION
    doc["temperature"] = ensemble.temperature
    doc["config"] = {
        "n_estimators": ensemble.config.n_estimators,
        "max_depth": ensemble.config.max_depth,
        "learning_rate": ensemble.config.learning_rate,
        "subsample": ensemble.config.subsample,
        "colsample_bytree": ensemble.config.colsample_bytree,
        "l2_leaf_regularization": ensemble.config.l2_leaf_regularization,
        "min_child_weight": ensemble.config.min_child_weight,
        "seed": ensemble.config.seed,
    }
    return json.dumps(doc, sort_keys=True)


def from_json(text: str) -> Ensemble:
    doc = json.loads(text)
    if doc.get("format_version") != _FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('format_version')!r}")
    trees = []
    for t in doc["trees"]:
        n = len(t["feature"])
        trees.append(
            Tree(
                feature=np.array(t["feature"], dtype=np.int32),
                threshold=np.array(t["threshold"]),
                left=np.array(t["left"], dtype=np.int32),
                right=np.array(t["right"], dtype=np.int32),
                value=np.array(t["value"]),
                cover=np.array(t["cover"]),
                default_left=np.ones(n, dtype=bool),
            )
        )
    ens = Ensemble(
        trees=trees,
        base_score=doc["base_score"],
        learning_rate=doc["learning_rate"],
        task=doc["task"],
        config=GbmConfig(**doc["config"]),
        temperature=doc["temperature"],
    )
    ens._n_features = doc["n_features"]
    return ens


def fingerprint(ensemble: Ensemble) -> str:
    """Hash of the trajectory-defining model state.

    Temperature is excluded: it rescales probabilities but leaves
    trajectories (and hence difficulty features) untouched.
    """
    blob = json.dumps(_core_dict(ensemble), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
