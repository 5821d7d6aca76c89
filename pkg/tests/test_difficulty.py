import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tds import dataset, difficulty, gbm, metrics
from tds.trajectory import TrajectoryConfig

CFG = TrajectoryConfig()
LABEL_FREE = TrajectoryConfig(use_residual_trajectory=False)


@pytest.fixture(scope="module")
def fitted(reg_data, reg_splits, reg_ensemble):
    ds = reg_data.dataset
    model = difficulty.fit_tds(
        reg_ensemble,
        ds.features[reg_splits.calibration],
        ds.targets[reg_splits.calibration],
        CFG,
        seed=0,
    )
    return model


class TestEcdf:
    def _model(self, fitted, support):
        import dataclasses

        return dataclasses.replace(fitted, ecdf_support=np.array(support, dtype=float))

    def test_counting_definition(self, fitted):
        model = self._model(fitted, [1.0, 2.0, 3.0])
        assert difficulty.ecdf_eval(model, 2.0) == pytest.approx(2.0 / 3.0)

    def test_below_min_is_zero(self, fitted):
        model = self._model(fitted, [1.0, 2.0, 3.0])
        assert difficulty.ecdf_eval(model, 0.5) == 0.0

    def test_at_max_is_one(self, fitted):
        model = self._model(fitted, [1.0, 2.0, 3.0])
        assert difficulty.ecdf_eval(model, 3.0) == 1.0

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=50), st.floats(-150, 150), st.floats(-150, 150))
    @settings(max_examples=100, deadline=None)
    def test_monotonicity(self, fitted, support, a, b):
        model = self._model(fitted, sorted(support))
        lo, hi = min(a, b), max(a, b)
        assert difficulty.ecdf_eval(model, lo) <= difficulty.ecdf_eval(model, hi)


class TestFit:
    def test_requires_enough_rows(self, reg_ensemble, reg_data):
        ds = reg_data.dataset
        with pytest.raises(ValueError, match="20"):
            difficulty.fit_tds(reg_ensemble, ds.features[:5], ds.targets[:5], CFG)

    def test_degenerate_losses_flagged(self):
        # perfect base model: constant targets -> zero loss everywhere
        rng = np.random.default_rng(0)
        X = rng.standard_normal((60, 3))
        y = np.full(60, 4.0)
        ens = gbm.fit(X, y, "regression", gbm.GbmConfig(n_estimators=5, max_depth=2))
        model = difficulty.fit_tds(ens, X, y, CFG)
        assert model.degenerate
        scores = difficulty.score_batch(model, ens, X, y)
        assert np.all((scores.value >= 0) & (scores.value <= 1))

    def test_refit_identical(self, reg_ensemble, reg_data, reg_splits):
        ds = reg_data.dataset
        X, y = ds.features[reg_splits.calibration], ds.targets[reg_splits.calibration]
        a = difficulty.fit_tds(reg_ensemble, X, y, CFG, seed=5)
        b = difficulty.fit_tds(reg_ensemble, X, y, CFG, seed=5)
        assert difficulty.to_json(a) == difficulty.to_json(b)

    def test_hard_region_scores_higher(self):
        # generator's membership mask is the oracle
        sd = dataset.synth("regression", 2500, 8, "planted_hard_region", seed=3)
        ds = sd.dataset
        splits = dataset.split(ds, "standard", seed=3)
        ens = gbm.fit(
            ds.features[splits.train],
            ds.targets[splits.train],
            ds.task,
            gbm.GbmConfig(n_estimators=40, max_depth=5, seed=3),
        )
        model = difficulty.fit_tds(
            ens, ds.features[splits.calibration], ds.targets[splits.calibration], LABEL_FREE
        )
        test = splits.test
        scores = difficulty.score_batch(model, ens, ds.features[test])
        mask = sd.hard_mask[test]
        assert scores.value[mask].mean() > scores.value[~mask].mean()


class TestScore:
    def test_fitting_rows_map_to_own_ranks(self, fitted, reg_ensemble, reg_data, reg_splits):
        ds = reg_data.dataset
        cal = reg_splits.calibration
        scores = difficulty.score_batch(
            fitted, reg_ensemble, ds.features[cal], ds.targets[cal]
        )
        n = len(cal)
        # each fitted point maps to its own rank; tie groups share the
        # group's upper rank (<= counting)
        _, inverse, counts = np.unique(scores.raw, return_inverse=True, return_counts=True)
        expected = np.cumsum(counts)[inverse] / n
        assert np.allclose(scores.value, expected)
        assert scores.value.max() == 1.0

    def test_identical_rows_identical_scores(self, fitted, reg_ensemble, reg_data):
        x = reg_data.dataset.features[0]
        y = float(reg_data.dataset.targets[0])
        a = difficulty.score(fitted, reg_ensemble, x, y)
        b = difficulty.score(fitted, reg_ensemble, x.copy(), y)
        assert a == b

    def test_batch_matches_scalar(self, fitted, reg_ensemble, reg_data):
        X = reg_data.dataset.features[:4]
        y = reg_data.dataset.targets[:4]
        batch = difficulty.score_batch(fitted, reg_ensemble, X, y)
        for i in range(4):
            assert batch[i] == difficulty.score(fitted, reg_ensemble, X[i], float(y[i]))

    def test_permutation_equivariance(self, fitted, reg_ensemble, reg_data):
        X = reg_data.dataset.features[:10]
        y = reg_data.dataset.targets[:10]
        perm = np.array([3, 1, 4, 0, 2, 9, 8, 7, 6, 5])
        direct = difficulty.score_batch(fitted, reg_ensemble, X, y)
        permuted = difficulty.score_batch(fitted, reg_ensemble, X[perm], y[perm])
        assert np.array_equal(permuted.value, direct.value[perm])

    def test_empty_batch(self, fitted, reg_ensemble):
        out = difficulty.score_batch(fitted, reg_ensemble, np.empty((0, 8)))
        assert len(out) == 0

    def test_rank_preservation(self, fitted, reg_ensemble, reg_data):
        X = reg_data.dataset.features[:50]
        y = reg_data.dataset.targets[:50]
        s = difficulty.score_batch(fitted, reg_ensemble, X, y)
        order_raw = np.argsort(s.raw, kind="stable")
        assert np.all(np.diff(s.value[order_raw]) >= 0)

    def test_fingerprint_mismatch_rejected(self, fitted, reg_data, reg_splits):
        ds = reg_data.dataset
        other = gbm.fit(
            ds.features[reg_splits.train],
            ds.targets[reg_splits.train],
            ds.task,
            gbm.GbmConfig(n_estimators=3, max_depth=2, seed=99),
        )
        with pytest.raises(ValueError, match="fingerprint"):
            difficulty.score_batch(fitted, other, ds.features[:3], ds.targets[:3])

    def test_residual_config_requires_targets(self, fitted, reg_ensemble, reg_data):
        with pytest.raises(ValueError, match="targets"):
            difficulty.score_batch(fitted, reg_ensemble, reg_data.dataset.features[:3])

    def test_top_vs_bottom_decile_error_gap(self):
        # averaged over 5 seeds, hardest-decile MSE > easiest-decile MSE
        gaps = []
        for seed in range(5):
            sd = dataset.synth("regression", 1500, 6, "planted_hard_region", seed=seed)
            ds = sd.dataset
            splits = dataset.split(ds, "standard", seed=seed)
            ens = gbm.fit(
                ds.features[splits.train],
                ds.targets[splits.train],
                ds.task,
                gbm.GbmConfig(n_estimators=30, max_depth=4, seed=seed),
            )
            model = difficulty.fit_tds(
                ens, ds.features[splits.calibration], ds.targets[splits.calibration], LABEL_FREE
            )
            test = splits.test
            scores = difficulty.score_batch(model, ens, ds.features[test]).value
            losses = (gbm.predict_margin(ens, ds.features[test]) - ds.targets[test]) ** 2
            order = np.argsort(scores, kind="stable")
            k = len(order) // 10
            gaps.append(losses[order[-k:]].mean() - losses[order[:k]].mean())
        assert np.mean(gaps) > 0

    def test_heldout_spearman_exceeds_threshold(self):
        sd = dataset.synth("regression", 3000, 10, "planted_hard_region", seed=21)
        ds = sd.dataset
        splits = dataset.split(ds, "standard", seed=21)
        ens = gbm.fit(
            ds.features[splits.train],
            ds.targets[splits.train],
            ds.task,
            gbm.GbmConfig(n_estimators=50, max_depth=5, seed=21),
        )
        model = difficulty.fit_tds(
            ens, ds.features[splits.calibration], ds.targets[splits.calibration], CFG
        )
        test = splits.test
        scores = difficulty.score_batch(model, ens, ds.features[test], ds.targets[test])
        losses = (gbm.predict_margin(ens, ds.features[test]) - ds.targets[test]) ** 2
        assert metrics.spearman(scores.value, losses) > 0.3


class TestSerialization:
    def test_round_trip(self, fitted, reg_ensemble, reg_data):
        clone = difficulty.from_json(difficulty.to_json(fitted))
        X = reg_data.dataset.features[:5]
        y = reg_data.dataset.targets[:5]
        a = difficulty.score_batch(fitted, reg_ensemble, X, y)
        b = difficulty.score_batch(clone, reg_ensemble, X, y)
        assert np.array_equal(a.value, b.value)
        assert np.array_equal(a.raw, b.raw)

    def test_bytes_stable(self, fitted):
        text = difficulty.to_json(fitted)
        assert difficulty.to_json(difficulty.from_json(text)) == text
