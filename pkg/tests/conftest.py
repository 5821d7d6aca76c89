import numpy as np
import pytest

from tds import dataset, gbm


def make_tree(feature, threshold, left, right, value, cover):
    """Hand-built tree from parallel lists (feature -1 marks leaves)."""
    n = len(feature)
    return gbm.Tree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        value=np.array(value, dtype=np.float64),
        cover=np.array(cover, dtype=np.float64),
        default_left=np.ones(n, dtype=bool),
    )


def make_stump(feature, threshold, v_left, v_right, n_left, n_right):
    """Single split: node 0 internal, node 1 left leaf, node 2 right leaf."""
    return make_tree(
        feature=[feature, -1, -1],
        threshold=[threshold, 0.0, 0.0],
        left=[1, -1, -1],
        right=[2, -1, -1],
        value=[0.0, v_left, v_right],
        cover=[n_left + n_right, n_left, n_right],
    )


def make_ensemble(trees, base_score=0.0, learning_rate=1.0, task="regression", n_features=0):
    ens = gbm.Ensemble(
        trees=list(trees),
        base_score=base_score,
        learning_rate=learning_rate,
        task=task,
        config=gbm.GbmConfig(n_estimators=max(1, len(trees))),
    )
    ens._n_features = n_features
    return ens


@pytest.fixture(scope="session")
def reg_data():
    return dataset.synth("regression", 1200, 8, "planted_hard_region", seed=11)


@pytest.fixture(scope="session")
def reg_splits(reg_data):
    return dataset.split(reg_data.dataset, "standard", seed=11)


@pytest.fixture(scope="session")
def reg_ensemble(reg_data, reg_splits):
    ds = reg_data.dataset
    cfg = gbm.GbmConfig(n_estimators=30, max_depth=4, seed=3)
    return gbm.fit(ds.features[reg_splits.train], ds.targets[reg_splits.train], ds.task, cfg)


@pytest.fixture(scope="session")
def cls_data():
    return dataset.synth("binary_classification", 1200, 6, "planted_hard_region", seed=7)


@pytest.fixture(scope="session")
def cls_splits(cls_data):
    return dataset.split(cls_data.dataset, "standard", seed=7)


@pytest.fixture(scope="session")
def cls_ensemble(cls_data, cls_splits):
    ds = cls_data.dataset
    cfg = gbm.GbmConfig(n_estimators=30, max_depth=4, seed=5)
    ens = gbm.fit(ds.features[cls_splits.train], ds.targets[cls_splits.train], ds.task, cfg)
    return gbm.temperature_scale(
        ens, ds.features[cls_splits.calibration], ds.targets[cls_splits.calibration]
    )
