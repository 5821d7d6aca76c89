"""Tabular data ingestion, preprocessing, splits, and synthetic benchmarks.

All operations are pure and seeded; Dataset values are frozen after
construction so they can be shared across threads and experiment runs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

REGRESSION = "regression"
BINARY_CLASSIFICATION = "binary_classification"

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"

#: cell contents treated as missing values in CSV input
MISSING_MARKERS = frozenset({"", "NA"})

#: label standing in for a missing categorical cell (its own category)
MISSING_CATEGORY = "<missing>"

_CACHE_VERSION = 1


@dataclass(frozen=True)
class ColumnSpec:
    """Schema entry for one feature column."""

    name: str
    kind: str  # CONTINUOUS or CATEGORICAL
    category_codes: tuple[str, ...] = ()  # ordered raw labels, categorical only

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, CATEGORICAL):
            raise ValueError(f"unknown column kind {self.kind!r}")
        if self.kind == CATEGORICAL and not self.category_codes:
            raise ValueError(f"categorical column {self.name!r} needs category_codes")
        if self.kind == CONTINUOUS and self.category_codes:
            raise ValueError(f"continuous column {self.name!r} cannot carry categories")


@dataclass(frozen=True)
class Dataset:
    """Preprocessed feature matrix plus targets and column metadata.

    `features` is fully numeric: continuous columns are z-scored with the
    per-column (mean, std) recorded in `standardization`, categorical
    columns hold integer codes >= 0 and carry the identity (0, 1) entry.
    """

    features: np.ndarray
    targets: np.ndarray
    schema: tuple[ColumnSpec, ...]
    task: str
    standardization: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if self.task not in (REGRESSION, BINARY_CLASSIFICATION):
            raise ValueError(f"unknown task {self.task!r}")
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d matrix")
        if len(self.targets) != len(self.features):
            raise ValueError("feature/target row counts differ")
        if len(self.schema) != self.features.shape[1]:
            raise ValueError("schema width does not match features")
        names = [c.name for c in self.schema]
        if len(set(names)) != len(names):
            raise ValueError("duplicate column names in schema")
        self.features.setflags(write=False)
        self.targets.setflags(write=False)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class SplitSets:
    """Row-index partition of a Dataset; all lists are sorted and disjoint."""

    train: np.ndarray
    calibration: np.ndarray
    test: np.ndarray
    seed: int
    al_initial: np.ndarray | None = None
    al_pool: np.ndarray | None = None

    def parts(self) -> list[np.ndarray]:
        out = [self.train, self.calibration, self.test]
        if self.al_initial is not None:
            out.append(self.al_initial)
        if self.al_pool is not None:
            out.append(self.al_pool)
        return out


@dataclass
class RawTable:
    """Parsed CSV contents before imputation/encoding.

    Cells hold raw strings with None marking missing values; the target
    column is already split out and parsed as float.
    """

    column_names: list[str]
    kinds: list[str]
    cells: list[list[str | None]]  # row-major, feature columns only
    targets: np.ndarray

    @property
    def n_rows(self) -> int:
        return len(self.cells)

    @property
    def n_features(self) -> int:
        return len(self.column_names)


@dataclass(frozen=True)
class SyntheticData:
    """Synthetic benchmark dataset plus its ground-truth hard-region mask."""

    dataset: Dataset
    hard_mask: np.ndarray  # bool, True inside the planted hard region


def _parses_as_float(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(
    path: str | Path,
    target_column: str,
    schema_hints: list[ColumnSpec] | None = None,
) -> RawTable:
    """Parse a comma-delimited file with a header row into a RawTable.

    Column kinds are inferred by parseability (every non-missing cell
    numeric -> continuous, otherwise categorical); `schema_hints` entries
    override inference for the named columns. Missing cells (empty or
    "NA") are kept as None for downstream imputation.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    if target_column not in header:
        raise ValueError(f"{path}: target column {target_column!r} not found")
    width = len(header)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ValueError(f"{path}: row {i + 2} has {len(row)} cells, expected {width}")

    target_idx = header.index(target_column)
    feature_names = [h for j, h in enumerate(header) if j != target_idx]

    targets = np.empty(len(rows))
    for i, row in enumerate(rows):
        cell = row[target_idx].strip()
        if cell in MISSING_MARKERS:
            raise ValueError(f"{path}: missing target value at row {i + 2}")
        try:
            targets[i] = float(cell)
        except ValueError:
            raise ValueError(f"{path}: non-numeric target {cell!r} at row {i + 2}") from None

    cells: list[list[str | None]] = []
    for row in rows:
        out_row: list[str | None] = []
        for j, cell in enumerate(row):
            if j == target_idx:
                continue
            cell = cell.strip()
            out_row.append(None if cell in MISSING_MARKERS else cell)
        cells.append(out_row)

    hinted = {c.name: c.kind for c in schema_hints} if schema_hints else {}
    kinds = []
    for j, name in enumerate(feature_names):
        if name in hinted:
            kinds.append(hinted[name])
            continue
        seen = [r[j] for r in cells if r[j] is not None]
        numeric = all(_parses_as_float(c) for c in seen) and seen
        kinds.append(CONTINUOUS if numeric else CATEGORICAL)

    return RawTable(feature_names, kinds, cells, targets)


def _infer_task(targets: np.ndarray) -> str:
    values = np.unique(targets)
    if values.size <= 2 and np.all(np.isin(values, (0.0, 1.0))):
        return BINARY_CLASSIFICATION
    return REGRESSION


def preprocess(raw: RawTable, fit_indices: np.ndarray, task: str | None = None) -> Dataset:
    """Impute, encode, and standardize a RawTable into a Dataset.

    Statistics (imputation means, category vocabularies, z-score moments)
    are fit on `fit_indices` only. Unseen categories outside the fitting
    rows map to the reserved code len(category_codes); constant columns
    keep stddev 1 so z-scoring is a no-op.
    """
    fit_indices = np.asarray(fit_indices, dtype=np.intp)
    if fit_indices.size == 0:
        raise ValueError("fit_indices must be non-empty")

    n, d = raw.n_rows, raw.n_features
    features = np.empty((n, d))
    schema: list[ColumnSpec] = []
    standardization: list[tuple[float, float]] = []

    for j in range(d):
        name = raw.column_names[j]
        col = [r[j] for r in raw.cells]
        if raw.kinds[j] == CONTINUOUS:
            values = np.array(
                [float(c) if c is not None else np.nan for c in col]
            )
            fit_vals = values[fit_indices]
            if np.all(np.isnan(fit_vals)):
                raise ValueError(f"column {name!r}: all values missing on fitting rows")
            impute = float(np.nanmean(fit_vals))
            values = np.where(np.isnan(values), impute, values)
            mean = float(values[fit_indices].mean())
            std = float(values[fit_indices].std())
            if std == 0.0:
                std = 1.0
            features[:, j] = (values - mean) / std
            schema.append(ColumnSpec(name, CONTINUOUS))
            standardization.append((mean, std))
        else:
            labels = [c if c is not None else MISSING_CATEGORY for c in col]
            vocab: dict[str, int] = {}
            for i in fit_indices:
                vocab.setdefault(labels[i], len(vocab))
            reserved = len(vocab)
            codes = np.array(
                [vocab.get(lab, reserved) for lab in labels], dtype=float
            )
            features[:, j] = codes
            schema.append(ColumnSpec(name, CATEGORICAL, tuple(vocab)))
            standardization.append((0.0, 1.0))

    task = task or _infer_task(raw.targets)
    if task == BINARY_CLASSIFICATION and not np.all(np.isin(raw.targets, (0.0, 1.0))):
        raise ValueError("binary classification targets must be in {0, 1}")
    return Dataset(
        features=features,
        targets=raw.targets.copy(),
        schema=tuple(schema),
        task=task,
        standardization=tuple(standardization),
    )


_STANDARD_RATIOS = (0.6, 0.2, 0.2)
_AL_RATIOS = (0.2, 0.6, 0.1, 0.1)


def split_indices(n_rows: int, mode: str, seed: int) -> SplitSets:
    """Seeded shuffle-and-cut partition of row indices 0..n_rows-1."""
    if n_rows < 10:
        raise ValueError(f"need at least 10 rows to split, got {n_rows}")
    if mode == "standard":
        ratios = _STANDARD_RATIOS
    elif mode == "active_learning":
        ratios = _AL_RATIOS
    else:
        raise ValueError(f"unknown split mode {mode!r}")

    sizes = [int(round(r * n_rows)) for r in ratios[:-1]]
    sizes.append(n_rows - sum(sizes))
    if min(sizes) < 1:
        raise ValueError(f"{n_rows} rows too few for a {mode} split")

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_rows)
    parts = []
    start = 0
    for s in sizes:
        parts.append(np.sort(perm[start : start + s]))
        start += s

    if mode == "standard":
        train, calibration, test = parts
        return SplitSets(train, calibration, test, seed)
    initial, pool, calibration, test = parts
    return SplitSets(
        train=np.array([], dtype=np.intp),
        calibration=calibration,
        test=test,
        seed=seed,
        al_initial=initial,
        al_pool=pool,
    )


def split(dataset: Dataset, mode: str, seed: int) -> SplitSets:
    """Partition a Dataset's rows: standard 60/20/20 or AL 20/60/10/10."""
    return split_indices(dataset.n_rows, mode, seed)


# Planted hard region: a box over the first two (raw, unit-normal) features.
_HARD_LO, _HARD_HI = 0.3, 2.3
_REGRESSION_BETA = (4.0, -3.0, 3.0, 2.0, -2.0, 1.0)
_REGRESSION_NOISE = 1.0
_REGRESSION_HARD_NOISE = 5.0
_CLASSIFICATION_BETA = (1.5, 1.2, -1.0, 0.8)
_LABEL_FLIP_PROB = 0.35


def synth(
    task: str,
    n_rows: int,
    n_features: int,
    noise_profile: str,
    seed: int,
) -> SyntheticData:
    """Generate a seeded synthetic Dataset with an optional planted hard region.

    `planted_hard_region` multiplies target noise (regression) or flips
    labels (classification) inside a fixed box over the first two feature
    axes; the returned mask records ground-truth membership for oracle
    tests. `homoscedastic` keeps noise uniform and the mask all-false.
    """
    if task not in (REGRESSION, BINARY_CLASSIFICATION):
        raise ValueError(f"unknown task {task!r}")
    if noise_profile not in ("homoscedastic", "planted_hard_region"):
        raise ValueError(f"unknown noise profile {noise_profile!r}")
    if n_rows < 10:
        raise ValueError("n_rows must be >= 10")
    if n_features < 2:
        raise ValueError("n_features must be >= 2")

    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_rows, n_features))

    in_box = (
        (X[:, 0] >= _HARD_LO)
        & (X[:, 0] <= _HARD_HI)
        & (X[:, 1] >= _HARD_LO)
        & (X[:, 1] <= _HARD_HI)
    )
    hard = in_box if noise_profile == "planted_hard_region" else np.zeros(n_rows, bool)

    if task == REGRESSION:
        beta = np.array(_REGRESSION_BETA[:n_features])
        signal = X[:, : beta.size] @ beta + 2.0 * X[:, 0] * X[:, 1]
        sigma = np.where(hard, _REGRESSION_HARD_NOISE, _REGRESSION_NOISE)
        y = signal + sigma * rng.standard_normal(n_rows)
    else:
        beta = np.array(_CLASSIFICATION_BETA[:n_features])
        logits = X[:, : beta.size] @ beta
        y = (rng.random(n_rows) < 1.0 / (1.0 + np.exp(-logits))).astype(float)
        flips = hard & (rng.random(n_rows) < _LABEL_FLIP_PROB)
        y = np.where(flips, 1.0 - y, y)

    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    features = (X - mean) / std

    dataset = Dataset(
        features=features,
        targets=y,
        schema=tuple(ColumnSpec(f"x{j}", CONTINUOUS) for j in range(n_features)),
        task=task,
        standardization=tuple((float(m), float(s)) for m, s in zip(mean, std)),
    )
    return SyntheticData(dataset, hard)


def save_dataset(dataset: Dataset, prefix: str | Path) -> None:
    """Dump a Dataset to <prefix>.npz with a <prefix>.schema.json sidecar."""
    prefix = Path(prefix)
    np.savez(prefix.with_suffix(".npz"), features=dataset.features, targets=dataset.targets)
    sidecar = {
        "version": _CACHE_VERSION,
        "task": dataset.task,
        "schema": [
            {"name": c.name, "kind": c.kind, "category_codes": list(c.category_codes)}
            for c in dataset.schema
        ],
        "standardization": [list(pair) for pair in dataset.standardization],
    }
    prefix.with_suffix(".schema.json").write_text(json.dumps(sidecar, indent=2))


def load_dataset(prefix: str | Path) -> Dataset:
    """Reload a Dataset written by save_dataset."""
    prefix = Path(prefix)
    sidecar = json.loads(prefix.with_suffix(".schema.json").read_text())
    if sidecar.get("version") != _CACHE_VERSION:
        raise ValueError(f"unsupported dataset cache version {sidecar.get('version')!r}")
    arrays = np.load(prefix.with_suffix(".npz"))
    schema = tuple(
        ColumnSpec(c["name"], c["kind"], tuple(c["category_codes"])) for c in sidecar["schema"]
    )
    return Dataset(
        features=arrays["features"],
        targets=arrays["targets"],
        schema=schema,
        task=sidecar["task"],
        standardization=tuple((m, s) for m, s in sidecar["standardization"]),
    )
