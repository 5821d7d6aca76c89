import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tds import metrics


def oracle_pearson(x, y):
    """Direct textbook formula: (sum(xy) - n*mx*my) / (n*sx*sy)."""
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum(a * b for a, b in zip(x, y)) - n * mx * my
    sxx = sum(a * a for a in x) - n * mx * mx
    syy = sum(b * b for b in y) - n * my * my
    return sxy / math.sqrt(sxx * syy)


def oracle_ranks(x):
    """Average ranks by stable sort, grouped by equality."""
    order = sorted(range(len(x)), key=lambda i: x[i])
    ranks = [0.0] * len(x)
    i = 0
    while i < len(x):
        j = i
        while j < len(x) and x[order[j]] == x[order[i]]:
            j += 1
        avg = (i + j + 1) / 2.0  # mean of 1-based positions i+1..j
        for k in range(i, j):
            ranks[order[k]] = avg
        i = j
    return ranks


class TestPearson:
    def test_affine_relation_is_one(self):
        x = np.arange(10.0)
        assert metrics.pearson(x, 2 * x + 3) == pytest.approx(1.0)

    def test_negation_is_minus_one(self):
        x = np.arange(10.0)
        assert metrics.pearson(x, -x) == pytest.approx(-1.0)

    def test_matches_direct_formula_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            x = rng.standard_normal(10)
            y = rng.standard_normal(10)
            assert metrics.pearson(x, y) == pytest.approx(oracle_pearson(x, y), abs=1e-12)

    def test_zero_variance_is_nan(self):
        assert math.isnan(metrics.pearson(np.ones(5), np.arange(5.0)))

    def test_length_checks(self):
        with pytest.raises(ValueError):
            metrics.pearson(np.arange(3.0), np.arange(4.0))
        with pytest.raises(ValueError):
            metrics.pearson(np.array([1.0]), np.array([1.0]))


class TestSpearman:
    def test_monotone_nonlinear_is_one(self):
        x = np.arange(1.0, 20.0)
        assert metrics.spearman(x, np.exp(x / 5.0)) == pytest.approx(1.0)

    def test_average_rank_ties(self):
        ranks = metrics.average_ranks(np.array([1.0, 2.0, 2.0, 3.0]))
        assert ranks.tolist() == [1.0, 2.5, 2.5, 4.0]

    def test_matches_rank_oracle(self):
        rng = np.random.default_rng(1)
        for n in (5, 50, 1000):
            x = rng.integers(0, 12, size=n).astype(float)  # many ties
            y = rng.standard_normal(n)
            assert metrics.spearman(x, y) == pytest.approx(
                metrics.pearson(np.array(oracle_ranks(x)), np.array(oracle_ranks(y))),
                abs=1e-12,
            )

    def test_rank_oracle_agrees_on_ranks(self):
        rng = np.random.default_rng(2)
        x = rng.integers(0, 5, size=200).astype(float)
        assert np.allclose(metrics.average_ranks(x), oracle_ranks(x), atol=1e-12)

    def test_all_tied_is_nan(self):
        assert math.isnan(metrics.spearman(np.ones(6), np.arange(6.0)))


class TestInvariances:
    pairs = st.lists(
        st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=3, max_size=40
    )

    @given(pairs, st.floats(0.1, 10), st.floats(-5, 5))
    @settings(max_examples=80, deadline=None)
    def test_affine_invariance(self, pts, a, b):
        x = np.array([p[0] for p in pts])
        y = np.array([p[1] for p in pts])
        r = metrics.pearson(x, y)
        r2 = metrics.pearson(a * x + b, y)
        if not (math.isnan(r) or math.isnan(r2)):
            assert r2 == pytest.approx(r, abs=1e-7)

    @given(pairs)
    @settings(max_examples=80, deadline=None)
    def test_symmetry_and_bounds(self, pts):
        x = np.array([p[0] for p in pts])
        y = np.array([p[1] for p in pts])
        r = metrics.pearson(x, y)
        if not math.isnan(r):
            assert abs(r) <= 1.0
            assert metrics.pearson(y, x) == pytest.approx(r, abs=1e-12)
        rho = metrics.spearman(x, y)
        if not math.isnan(rho):
            assert abs(rho) <= 1.0
            assert metrics.spearman(y, x) == pytest.approx(rho, abs=1e-12)

    # integer inputs keep x -> x^3 exact in float64, so the transform is
    # strictly increasing and tie-preserving without rounding artifacts
    @given(
        st.lists(
            st.tuples(st.integers(-1000, 1000), st.integers(-1000, 1000)),
            min_size=3,
            max_size=40,
        )
    )
    @settings(max_examples=50, deadline=None)
    def test_spearman_invariant_under_increasing_transform(self, pts):
        x = np.array([p[0] for p in pts], dtype=float)
        y = np.array([p[1] for p in pts], dtype=float)
        rho = metrics.spearman(x, y)
        rho2 = metrics.spearman(x**3, y)
        if not (math.isnan(rho) or math.isnan(rho2)):
            assert rho2 == pytest.approx(rho, abs=1e-9)


class TestReport:
    def test_undefined_flags(self):
        rep = metrics.correlation_report(np.ones(5), np.arange(5.0))
        assert not rep.pearson_defined
        assert not rep.spearman_defined
        assert rep.n == 5

    def test_defined_case(self):
        rep = metrics.correlation_report(np.arange(5.0), np.arange(5.0) ** 2)
        assert rep.pearson_defined and rep.spearman_defined
        assert rep.spearman_rho == pytest.approx(1.0)
