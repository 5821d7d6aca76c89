"""Attributions and failure-mode segments for high-difficulty samples.

Path-dependent TreeSHAP (cover-weighted conditional expectations) over
the trained ensemble, PCA + k-means clustering of the attribution
vectors of the hardest samples, and per-cluster feature-range rules that
can filter an unlabeled pool or be rendered for human review.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import gbm
from .dataset import CATEGORICAL, CONTINUOUS, Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Attribution:
    """Per-feature contributions; base_value + sum == raw model output."""

    contributions: np.ndarray
    base_value: float


# --- path-dependent TreeSHAP ------------------------------------------------
#
# The path state is a list of [feature, zero_fraction, one_fraction, weight]
# entries, one per unique feature on the current root-to-node path.


def _extend(m, pz, po, pi):
    out = [row[:] for row in m]
    depth = len(out)
    out.append([pi, pz, po, 1.0 if depth == 0 else 0.0])
    for i in range(depth - 1, -1, -1):
        out[i + 1][3] += po * out[i][3] * (i + 1) / (depth + 1)
        out[i][3] = pz * out[i][3] * (depth - i) / (depth + 1)
    return out


def _unwind(m, index):
    depth = len(m) - 1
    z, o = m[index][1], m[index][2]
    out = [row[:] for row in m[:-1]]
    carry = m[depth][3]
    if o != 0.0:
        for i in range(depth - 1, -1, -1):
            tmp = out[i][3]
            out[i][3] = carry * (depth + 1) / ((i + 1) * o)
            carry = tmp - out[i][3] * z * (depth - i) / (depth + 1)
    else:
        for i in range(depth - 1, -1, -1):
            out[i][3] = out[i][3] * (depth + 1) / (z * (depth - i))
    for i in range(index, depth):
        out[i][0], out[i][1], out[i][2] = m[i + 1][0], m[i + 1][1], m[i + 1][2]
    return out


def _unwound_sum(m, index):
    depth = len(m) - 1
    z, o = m[index][1], m[index][2]
    carry = m[depth][3]
    total = 0.0
    if o != 0.0:
        for i in range(depth - 1, -1, -1):
            tmp = carry / ((i + 1) * o)
            total += tmp
            carry = m[i][3] - tmp * z * (depth - i)
    else:
        for i in range(depth - 1, -1, -1):
            total += m[i][3] / (z * (depth - i))
    return total * (depth + 1)


def _shap_recurse(tree: gbm.Tree, x, phi, node, m, pz, po, pi):
    m = _extend(m, pz, po, pi)
    f = int(tree.feature[node])
    if f < 0:
        leaf_value = float(tree.value[node])
        for i in range(1, len(m)):
            w = _unwound_sum(m, i)
            phi[m[i][0]] += w * (m[i][2] - m[i][1]) * leaf_value
        return
    left, right = int(tree.left[node]), int(tree.right[node])
    if x[f] < tree.threshold[node]:
        hot, cold = left, right
    else:
        hot, cold = right, left
    w_node = float(tree.cover[node])
    if w_node <= 0.0:
        raise ValueError("tree without cover statistics: non-positive node cover")
    hot_frac = float(tree.cover[hot]) / w_node
    cold_frac = float(tree.cover[cold]) / w_node

    iz = io = 1.0
    found = -1
    for idx in range(len(m)):
        if m[idx][0] == f:
            found = idx
            break
    if found >= 0:
        iz, io = m[found][1], m[found][2]
        m = _unwind(m, found)

    _shap_recurse(tree, x, phi, hot, m, iz * hot_frac, io, f)
    _shap_recurse(tree, x, phi, cold, m, iz * cold_frac, 0.0, f)


def _tree_expectation(tree: gbm.Tree) -> float:
    """Cover-weighted mean output of one tree (the empty-coalition value)."""
    total = 0.0
    stack = [(0, 1.0)]
    while stack:
        node, w = stack.pop()
        f = tree.feature[node]
        if f < 0:
            total += w * float(tree.value[node])
            continue
        cover = float(tree.cover[node])
        if cover <= 0.0:
            raise ValueError("tree without cover statistics: non-positive node cover")
        left, right = int(tree.left[node]), int(tree.right[node])
        stack.append((left, w * float(tree.cover[left]) / cover))
        stack.append((right, w * float(tree.cover[right]) / cover))
    return total


def tree_shap(ensemble: gbm.Ensemble, x: np.ndarray) -> Attribution:
    """SHAP attribution of one row, summed over all trees plus base_score."""
    x = np.asarray(x, dtype=np.float64)
    d = ensemble._n_features or len(x)
    if len(x) != d:
        raise ValueError(f"feature dimension mismatch: got {len(x)}, expected {d}")
    phi = np.zeros(d)
    base = ensemble.base_score
    lr = ensemble.learning_rate
    for tree in ensemble.trees:
        tree_phi = np.zeros(d)
        _shap_recurse(tree, x, tree_phi, 0, [], 1.0, 1.0, -1)
        phi += lr * tree_phi
        base += lr * _tree_expectation(tree)
    return Attribution(contributions=phi, base_value=float(base))


def shap_matrix(ensemble: gbm.Ensemble, X: np.ndarray) -> np.ndarray:
    """(n, d) attribution matrix; rows are independent."""
    X = np.asarray(X, dtype=np.float64)
    return np.vstack([tree_shap(ensemble, row).contributions for row in X])


# --- PCA + k-means ----------------------------------------------------------


def pca_reduce(M: np.ndarray, k: int = 5) -> np.ndarray:
    """Project onto the top-k principal components.

    Columns are centered; components are eigenvectors of the covariance
    matrix ordered by descending eigenvalue, with the sign convention
    that each component's largest-magnitude loading is positive.
    """
    M = np.asarray(M, dtype=np.float64)
    n, d = M.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > min(n, d):
        raise ValueError(f"k={k} exceeds min(n, d)={min(n, d)}")
    centered = M - M.mean(axis=0)
    cov = centered.T @ centered / n
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(-eigenvalues, kind="stable")[:k]
    components = eigenvectors[:, order]
    for c in range(k):
        j = int(np.argmax(np.abs(components[:, c])))
        if components[j, c] < 0:
            components[:, c] = -components[:, c]
    return centered @ components


@dataclass
class KmeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    objective_history: list[float]  # within-cluster sum of squares per sweep


def _kmeanspp_init(points: np.ndarray, K: int, rng) -> np.ndarray:
    n = len(points)
    centroids = np.empty((K, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for k in range(1, K):
        total = d2.sum()
        if total == 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[k] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[k]) ** 2).sum(axis=1))
    return centroids


def kmeans(points: np.ndarray, K: int = 4, seed: int = 0, max_iter: int = 300) -> KmeansResult:
    """Lloyd's algorithm with k-means++ seeding; deterministic given seed.

    Empty clusters are re-seeded from the point farthest from its current
    centroid. Iterates to an assignment fixpoint or max_iter sweeps.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < K:
        raise ValueError(f"need at least K={K} points, got {n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(points, K, rng)
    labels = None
    history: list[float] = []
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        for k in range(K):
            if not np.any(new_labels == k):
                far = int(d2[np.arange(n), new_labels].argmax())
                centroids[k] = points[far]
                d2[:, k] = ((points - centroids[k]) ** 2).sum(axis=1)
                new_labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for k in range(K):
            members = points[labels == k]
            if len(members):
                centroids[k] = members.mean(axis=0)
    return KmeansResult(labels=labels, centroids=centroids, objective_history=history)


# --- segments ---------------------------------------------------------------


@dataclass(frozen=True)
class IntervalRule:
    feature: int
    lo: float
    hi: float

    def matches(self, rows: np.ndarray) -> np.ndarray:
        v = rows[:, self.feature]
        return (v >= self.lo) & (v <= self.hi)


@dataclass(frozen=True)
class SetRule:
    feature: int
    values: frozenset[float]

    def matches(self, rows: np.ndarray) -> np.ndarray:
        return np.isin(rows[:, self.feature], sorted(self.values))


@dataclass
class Segment:
    id: int
    rules: tuple
    member_indices: np.ndarray  # indices into the hard subset
    difficulty: float  # mean calibration TDS over rule-matching rows
    calibration_match_count: int

    def matches(self, rows: np.ndarray) -> np.ndarray:
        mask = np.ones(len(rows), dtype=bool)
        for rule in self.rules:
            mask &= rule.matches(rows)
        return mask


@dataclass
class SegmentSet:
    segments: list[Segment]  # ordered by difficulty descending
    coverage_target: float  # percent of calibration rows to cover
    selected_prefix: list[int]  # segment ids
    calibration_coverage: float  # fraction achieved by the prefix

    def selected(self) -> list[Segment]:
        chosen = set(self.selected_prefix)
        return [s for s in self.segments if s.id in chosen]


def build_segments(
    hard_rows: np.ndarray,
    hard_scores: np.ndarray,
    attributions: np.ndarray,
    dataset: Dataset,
    calibration_rows: np.ndarray,
    calibration_scores: np.ndarray,
    n_clusters: int = 4,
    n_features_per_segment: int = 5,
    coverage_target: float = 80.0,
    pca_components: int = 5,
    seed: int = 0,
) -> SegmentSet:
    """Cluster the hard subset by attribution patterns into range rules.

    Attribution vectors are standardized per feature, PCA-reduced, and
    k-means clustered; each cluster keeps its top features by mean
    absolute attribution and turns member value ranges into rules.
    Segments are ranked by mean calibration TDS of rule-matching rows and
    the smallest prefix covering coverage_target percent of the
    calibration set is selected.
    """
    hard_rows = np.asarray(hard_rows, dtype=np.float64)
    attributions = np.asarray(attributions, dtype=np.float64)
    m = len(hard_rows)
    if m < n_clusters:
        raise ValueError(f"hard subset ({m} rows) smaller than n_clusters={n_clusters}")
    if n_features_per_segment < 1:
        raise ValueError("n_features_per_segment must be >= 1")

    mean = attributions.mean(axis=0)
    std = attributions.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    standardized = (attributions - mean) / std
    k = min(pca_components, m, standardized.shape[1])
    reduced = pca_reduce(standardized, k)
    labels = kmeans(reduced, n_clusters, seed).labels

    n_cal = len(calibration_rows)
    segments: list[Segment] = []
    for c in range(n_clusters):
        member_idx = np.nonzero(labels == c)[0]
        members = hard_rows[member_idx]
        mean_abs = np.abs(attributions[member_idx]).mean(axis=0)
        top = np.argsort(-mean_abs, kind="stable")[:n_features_per_segment]
        rules = []
        for f in sorted(int(j) for j in top):
            col = members[:, f]
            if dataset.schema[f].kind == CATEGORICAL:
                rules.append(SetRule(f, frozenset(col.tolist())))
            else:
                rules.append(IntervalRule(f, float(col.min()), float(col.max())))
        seg = Segment(
            id=c,
            rules=tuple(rules),
            member_indices=member_idx,
            difficulty=0.0,
            calibration_match_count=0,
        )
        match = seg.matches(calibration_rows)
        seg.calibration_match_count = int(match.sum())
        seg.difficulty = float(calibration_scores[match].mean()) if match.any() else 0.0
        segments.append(seg)

    segments.sort(key=lambda s: (-s.difficulty, s.id))

    covered = np.zeros(n_cal, dtype=bool)
    prefix: list[int] = []
    achieved = 0.0
    best_len, best_cov = 0, 0.0
    for seg in segments:
        prefix.append(seg.id)
        covered |= seg.matches(calibration_rows)
        achieved = covered.sum() / n_cal if n_cal else 0.0
        if achieved > best_cov:
            best_cov, best_len = achieved, len(prefix)
        if achieved >= coverage_target / 100.0:
            break
    else:
        # target unreachable: smallest prefix achieving the best coverage
        prefix = prefix[:best_len]
        achieved = best_cov
        log.warning(
            "calibration coverage target %.1f%% unreachable; selected %d segments covering %.1f%%",
            coverage_target,
            len(prefix),
            100.0 * achieved,
        )

    return SegmentSet(
        segments=segments,
        coverage_target=coverage_target,
        selected_prefix=prefix,
        calibration_coverage=achieved,
    )


def segment_filter(rows: np.ndarray, segment_set: SegmentSet) -> np.ndarray:
    """Indices of rows satisfying every rule of at least one selected segment."""
    rows = np.asarray(rows, dtype=np.float64)
    mask = np.zeros(len(rows), dtype=bool)
    for seg in segment_set.selected():
        mask |= seg.matches(rows)
    return np.nonzero(mask)[0]


def _destandardize(dataset: Dataset, feature: int, value: float) -> float:
    mean, std = dataset.standardization[feature]
    return value * std + mean


def _category_label(dataset: Dataset, feature: int, code: float) -> str:
    codes = dataset.schema[feature].category_codes
    i = int(code)
    return codes[i] if 0 <= i < len(codes) else "<unseen>"


def segment_report(segment_set: SegmentSet, dataset: Dataset) -> dict:
    """JSON-ready report with rules in raw (de-standardized) units."""
    out = {
        "coverage_target_percent": segment_set.coverage_target,
        "calibration_coverage": segment_set.calibration_coverage,
        "selected_prefix": list(segment_set.selected_prefix),
        "segments": [],
    }
    for seg in segment_set.segments:
        rules = []
        for rule in seg.rules:
            name = dataset.schema[rule.feature].name
            if isinstance(rule, IntervalRule):
                rules.append(
                    {
                        "feature": name,
                        "low": _destandardize(dataset, rule.feature, rule.lo),
                        "high": _destandardize(dataset, rule.feature, rule.hi),
                    }
                )
            else:
                labels = sorted(_category_label(dataset, rule.feature, v) for v in rule.values)
                rules.append({"feature": name, "values": labels})
        out["segments"].append(
            {
                "id": seg.id,
                "difficulty": seg.difficulty,
                "member_count": int(len(seg.member_indices)),
                "calibration_match_count": seg.calibration_match_count,
                "selected": seg.id in segment_set.selected_prefix,
                "rules": rules,
            }
        )
    return out


def render_segment_table(segment_set: SegmentSet, dataset: Dataset) -> str:
    """Human-readable table: one (Feature, Low, High) block per segment."""
    lines = []
    report = segment_report(segment_set, dataset)
    for seg in report["segments"]:
        mark = "*" if seg["selected"] else " "
        lines.append(
            f"{mark} Segment {seg['id']}  D(s)={seg['difficulty']:.4f}  "
            f"members={seg['member_count']}  calib_matches={seg['calibration_match_count']}"
        )
        lines.append(f"    {'Feature':<24} {'Low':>12} {'High':>12}")
        for rule in seg["rules"]:
            if "values" in rule:
                values = "{" + ", ".join(rule["values"]) + "}"
                lines.append(f"    {rule['feature']:<24} {values}")
            else:
                lines.append(
                    f"    {rule['feature']:<24} {rule['low']:>12.4g} {rule['high']:>12.4g}"
                )
    lines.append(
        f"selected prefix covers {100.0 * report['calibration_coverage']:.1f}% of calibration "
        f"(target {report['coverage_target_percent']:.0f}%)"
    )
    return "\n".join(lines)
