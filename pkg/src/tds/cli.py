"""Batch command-line front end for difficulty-score experiments.

Verbs: train, correlate, al, select, conformal, segment. Each reads a
single JSON experiment config, runs every seed (optionally in parallel
worker processes), and writes CSV/JSON artifacts plus a MANIFEST.json
describing the layout. All randomness flows from the config seeds, so
re-running a command reproduces identical bytes (timestamps live only in
the manifest).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import al as al_mod
from . import conformal as cp_mod
from . import dataset as ds_mod
from . import difficulty, explain, gbm, metrics, selective, trajectory
from .dataset import BINARY_CLASSIFICATION, REGRESSION
from .trajectory import TrajectoryConfig

log = logging.getLogger(__name__)

_COMMANDS = ("train", "correlate", "al", "select", "conformal", "segment")


@dataclass
class ExperimentConfig:
    task: str
    dataset: dict
    seeds: list[int]
    out_dir: str
    gbm: gbm.GbmConfig
    trajectory: TrajectoryConfig
    trajectory_explicit: bool
    al: dict
    conformal: dict
    selective: dict
    segment: dict

    @staticmethod
    def from_dict(doc: dict) -> "ExperimentConfig":
        for key in ("task", "dataset", "seeds", "out_dir"):
            if key not in doc:
                raise ValueError(f"config missing required key {key!r}")
        if doc["task"] not in (REGRESSION, BINARY_CLASSIFICATION):
            raise ValueError(f"unknown task {doc['task']!r}")
        seeds = list(doc["seeds"])
        if not seeds:
            raise ValueError("seeds must be non-empty")
        src = doc["dataset"]
        if "csv" in src:
            path = Path(src["csv"]["path"])
            if not path.exists():
                raise ValueError(f"dataset file does not exist: {path}")
        elif "synth" not in src:
            raise ValueError("dataset must specify either 'csv' or 'synth'")
        return ExperimentConfig(
            task=doc["task"],
            dataset=src,
            seeds=seeds,
            out_dir=doc["out_dir"],
            gbm=gbm.GbmConfig(**doc.get("gbm", {})),
            trajectory=TrajectoryConfig(**doc.get("trajectory", {})),
            trajectory_explicit="trajectory" in doc,
            al=doc.get("al", {}),
            conformal=doc.get("conformal", {}),
            selective=doc.get("selective", {}),
            segment=doc.get("segment", {}),
        )


def load_config(path: str | Path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


# --- small IO helpers ---------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _mean_ci(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    if len(arr) < 2:
        return {"mean": mean, "ci95": 0.0, "n": len(arr)}
    stderr = float(arr.std(ddof=1)) / float(np.sqrt(len(arr)))
    return {"mean": mean, "ci95": 1.96 * stderr, "n": len(arr)}


# --- shared pipeline pieces ---------------------------------------------------


def _build_data(cfg: ExperimentConfig, seed: int, mode: str):
    """(dataset, splits) for one seed; synth data is regenerated per seed."""
    if "synth" in cfg.dataset:
        spec = cfg.dataset["synth"]
        sd = ds_mod.synth(
            cfg.task,
            int(spec["n_rows"]),
            int(spec["n_features"]),
            spec.get("noise_profile", "planted_hard_region"),
            seed,
        )
        return sd.dataset, ds_mod.split(sd.dataset, mode, seed)
    spec = cfg.dataset["csv"]
    hints = [
        ds_mod.ColumnSpec(h["name"], h["kind"], tuple(h.get("category_codes", ())))
        for h in spec.get("schema_hints", [])
    ] or None
    raw = ds_mod.load_csv(spec["path"], spec["target_column"], hints)
    splits = ds_mod.split_indices(raw.n_rows, mode, seed)
    fit_idx = splits.train if mode == "standard" else splits.al_initial
    return ds_mod.preprocess(raw, fit_idx, cfg.task), splits


def _train_models(cfg: ExperimentConfig, data, splits, seed: int, tc: TrajectoryConfig):
    """Base ensemble (temperature-scaled for classification) + TDS model."""
    train_idx = splits.train if len(splits.train) else splits.al_initial
    ensemble = gbm.fit(
        data.features[train_idx],
        data.targets[train_idx],
        data.task,
        replace(cfg.gbm, seed=seed),
    )
    if data.task == BINARY_CLASSIFICATION:
        ensemble = gbm.temperature_scale(
            ensemble, data.features[splits.calibration], data.targets[splits.calibration]
        )
    model = difficulty.fit_tds(
        ensemble,
        data.features[splits.calibration],
        data.targets[splits.calibration],
        tc,
        seed=seed,
    )
    return ensemble, model


def _seed_dir(out: Path, seed: int) -> Path:
    d = out / f"seed_{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _test_losses(data, ensemble, test_idx) -> np.ndarray:
    margins = gbm.predict_margin(ensemble, data.features[test_idx])
    return trajectory.final_losses(ensemble, margins, data.targets[test_idx])


# --- per-seed experiment bodies -------------------------------------------------


def _run_train(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    data, splits = _build_data(cfg, seed, "standard")
    ensemble, model = _train_models(cfg, data, splits, seed, cfg.trajectory)
    sdir = _seed_dir(out, seed)
    (sdir / "model.json").write_text(gbm.to_json(ensemble))
    (sdir / "difficulty.json").write_text(difficulty.to_json(model))
    return {
        "seed": seed,
        "files": ["model.json", "difficulty.json"],
        "ensemble_fingerprint": gbm.fingerprint(ensemble),
        "degenerate_losses": model.degenerate,
    }


def _run_correlate(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    data, splits = _build_data(cfg, seed, "standard")
    ensemble, model = _train_models(cfg, data, splits, seed, cfg.trajectory)
    test = splits.test
    targets = data.targets[test] if cfg.trajectory.use_residual_trajectory else None
    scores = difficulty.score_batch(model, ensemble, data.features[test], targets)
    losses = _test_losses(data, ensemble, test)

    sdir = _seed_dir(out, seed)
    _write_csv(
        sdir / "scores.csv",
        ["row_index", "tds", "raw", "loss"],
        zip(test.tolist(), scores.value, scores.raw, losses),
    )
    report = metrics.correlation_report(scores.value, losses)
    return {
        "seed": seed,
        "n": report.n,
        "pearson": None if not report.pearson_defined else report.pearson_r,
        "spearman": None if not report.spearman_defined else report.spearman_rho,
        "undefined": not (report.pearson_defined and report.spearman_defined),
    }


def _curve_rows(result: al_mod.AlResult):
    c = result.curve
    return zip(c.rounds.tolist(), c.labeled_counts.tolist(), c.val_metric, c.test_metric)


def _run_al(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    data, splits = _build_data(cfg, seed, "active_learning")
    al_doc = cfg.al
    acquisitions = al_doc.get("acquisitions") or [al_doc.get("acquisition", "tds")]
    batch_size = al_doc.get("batch_size")
    if batch_size is None:
        batch_size = max(1, round(0.01 * len(splits.al_pool)))
    seg_cfg = al_mod.SegmentAcquisitionConfig(**al_doc.get("segment", {}))
    traj = cfg.trajectory if cfg.trajectory_explicit else None  # None: task default

    sdir = _seed_dir(out, seed)
    summary = {"seed": seed, "methods": {}}
    for acq in acquisitions:
        config = al_mod.AlConfig(
            batch_size=int(batch_size),
            rounds=int(al_doc.get("rounds", 30)),
            acquisition=acq,
            mix_ratio=float(al_doc.get("mix_ratio", 0.5)),
            mix_rounds=al_doc.get("mix_rounds"),
            seed=seed,
            gbm=replace(cfg.gbm, seed=seed),
            trajectory=traj,
            segment=seg_cfg,
        )
        result = al_mod.run_al(data, splits, config)
        _write_csv(
            sdir / f"curve_{acq}.csv",
            ["round", "labeled_count", "val", "test"],
            _curve_rows(result),
        )
        curve = result.curve
        best = int(np.argmin(curve.val_metric))
        summary["methods"][acq] = {
            "aulc": al_mod.aulc(curve),
            "aulc_75_100": al_mod.aulc(curve, (0.75, 1.0)),
            "best_by_val_test": float(curve.test_metric[best]),
            "final_val": float(curve.val_metric[-1]),
            "final_test": float(curve.test_metric[-1]),
            "selection_seconds_total": float(sum(result.selection_seconds)),
            "metric_kind": curve.metric_kind,
        }
    return summary


def _selective_methods(cfg: ExperimentConfig, data) -> list[str]:
    methods = ["tds", "random"]
    if data.task == BINARY_CLASSIFICATION:
        methods += ["entropy", "margin", "least_confident"]
    extra = cfg.selective.get("baselines")
    if extra:
        methods = ["tds"] + list(extra)
    return methods


def _run_select(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    data, splits = _build_data(cfg, seed, "standard")
    # scoring must be label-free: regions/acceptance cannot peek at test labels
    tc = replace(cfg.trajectory, use_residual_trajectory=False)
    ensemble, model = _train_models(cfg, data, splits, seed, tc)
    test = splits.test
    X_test = data.features[test]
    if data.task == REGRESSION:
        losses = _test_losses(data, ensemble, test)
        risk_kind = "mse"
    else:
        pred = (gbm.predict_proba(ensemble, X_test) >= 0.5).astype(float)
        losses = (pred != data.targets[test]).astype(float)
        risk_kind = "error_rate"

    sdir = _seed_dir(out, seed)
    result = {"seed": seed, "risk_kind": risk_kind, "methods": {}}
    for method in _selective_methods(cfg, data):
        if method == "tds":
            scores = difficulty.score_batch(model, ensemble, X_test).value
        elif method == "random":
            scores = np.random.default_rng([seed, 7]).random(len(X_test))
        else:
            p = gbm.predict_proba(ensemble, X_test)
            if method == "entropy":
                pc = np.clip(p, 1e-15, 1 - 1e-15)
                scores = -(pc * np.log(pc) + (1 - pc) * np.log(1 - pc))
            elif method == "margin":
                scores = -np.abs(2 * p - 1)
            elif method == "least_confident":
                scores = 1 - np.maximum(p, 1 - p)
            else:
                raise ValueError(f"unknown selective baseline {method!r}")
        curve = selective.risk_coverage(scores, losses, method, risk_kind)
        _write_csv(sdir / f"rc_{method}.csv", ["coverage", "risk"], zip(curve.coverage, curve.risk))
        entry = {"aurc": selective.aurc(curve), "full_coverage_risk": float(curve.risk[-1])}
        if curve.risk[-1] > 0:
            entry["naurc"] = selective.naurc(curve)
        result["methods"][method] = entry
    return result


def _run_conformal(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    data, splits = _build_data(cfg, seed, "standard")
    tc = replace(cfg.trajectory, use_residual_trajectory=False)
    ensemble, model = _train_models(cfg, data, splits, seed, tc)
    alpha = float(cfg.conformal.get("alpha", 0.1))
    n_bins = int(cfg.conformal.get("n_bins", 10))
    modes = cfg.conformal.get("modes", [cp_mod.VANILLA, cp_mod.TDS_MONDRIAN])

    cal, test = splits.calibration, splits.test
    tds_test = difficulty.score_batch(model, ensemble, data.features[test]).value

    sdir = _seed_dir(out, seed)
    result = {"seed": seed, "alpha": alpha, "modes": {}}
    for mode in modes:
        cp = cp_mod.fit_cp(
            ensemble,
            model,
            data.features[cal],
            data.targets[cal],
            alpha,
            mode=mode,
            n_bins=n_bins,
        )
        report = cp_mod.cp_diagnostics(
            cp, ensemble, model, data.features[test], data.targets[test], tds_test
        )
        center, q = cp_mod._regions_batch(cp, ensemble, model, data.features[test])
        if data.task == REGRESSION:
            rows = zip(test.tolist(), center - q, center + q, data.targets[test])
            _write_csv(sdir / f"regions_{mode}.csv", ["row_index", "lo", "hi", "target"], rows)
        else:
            contains_1 = (center >= 1.0 - q).astype(int)
            contains_0 = ((1.0 - center) >= 1.0 - q).astype(int)
            _write_csv(
                sdir / f"regions_{mode}.csv",
                ["row_index", "contains_1", "contains_0", "target"],
                zip(test.tolist(), contains_1, contains_0, data.targets[test]),
            )
        result["modes"][mode] = {
            "coverage": report.coverage,
            "width": report.mean_width,
            "mace": report.mace,
            "maxce": report.maxce,
            "slope": report.trend_slope,
            "per_decile": report.per_decile,
            "n_bins": cp.n_bins,
        }
    return result


def _run_segment(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    data, splits = _build_data(cfg, seed, "standard")
    ensemble, model = _train_models(cfg, data, splits, seed, cfg.trajectory)
    use_targets = cfg.trajectory.use_residual_trajectory
    cal, test = splits.calibration, splits.test
    test_scores = difficulty.score_batch(
        model, ensemble, data.features[test], data.targets[test] if use_targets else None
    ).value
    cal_scores = difficulty.score_batch(
        model, ensemble, data.features[cal], data.targets[cal] if use_targets else None
    ).value

    seg = cfg.segment
    top_fraction = float(seg.get("top_fraction", 0.1))
    n_hard = max(int(seg.get("n_clusters", 4)), int(np.ceil(top_fraction * len(test))))
    hard_pos = np.argsort(-test_scores, kind="stable")[:n_hard]
    hard_rows = data.features[test][hard_pos]
    shap = explain.shap_matrix(ensemble, hard_rows)
    segments = explain.build_segments(
        hard_rows,
        test_scores[hard_pos],
        shap,
        data,
        data.features[cal],
        cal_scores,
        n_clusters=int(seg.get("n_clusters", 4)),
        n_features_per_segment=int(seg.get("n_features_per_segment", 5)),
        coverage_target=float(seg.get("coverage_target", 80.0)),
        pca_components=int(seg.get("pca_components", 5)),
        seed=seed,
    )
    report = explain.segment_report(segments, data)
    sdir = _seed_dir(out, seed)
    _write_json(sdir / "segments.json", report)
    (sdir / "segments.txt").write_text(explain.render_segment_table(segments, data) + "\n")
    return {"seed": seed, "n_segments": len(report["segments"]), "selected": report["selected_prefix"]}


_RUNNERS = {
    "train": _run_train,
    "correlate": _run_correlate,
    "al": _run_al,
    "select": _run_select,
    "conformal": _run_conformal,
    "segment": _run_segment,
}


def _run_one_seed(command: str, config_json: str, seed: int, out_dir: str) -> dict:
    cfg = ExperimentConfig.from_dict(json.loads(config_json))
    return _RUNNERS[command](cfg, seed, Path(out_dir))


def _aggregate(command: str, per_seed: list[dict]) -> dict:
    agg: dict = {"n_seeds": len(per_seed)}
    if command == "correlate":
        pearson = [r["pearson"] for r in per_seed if r["pearson"] is not None]
        spearman = [r["spearman"] for r in per_seed if r["spearman"] is not None]
        if pearson:
            agg["pearson"] = _mean_ci(pearson)
        if spearman:
            agg["spearman"] = _mean_ci(spearman)
        agg["undefined_seeds"] = [r["seed"] for r in per_seed if r["undefined"]]
    elif command == "al":
        methods: dict = {}
        for name in per_seed[0]["methods"]:
            methods[name] = {
                stat: _mean_ci([r["methods"][name][stat] for r in per_seed])
                for stat in ("aulc", "aulc_75_100", "best_by_val_test", "final_test")
            }
        agg["methods"] = methods
    elif command == "select":
        methods = {}
        for name in per_seed[0]["methods"]:
            entries = [r["methods"][name] for r in per_seed]
            methods[name] = {"aurc": _mean_ci([e["aurc"] for e in entries])}
            naurcs = [e["naurc"] for e in entries if "naurc" in e]
            if naurcs:
                methods[name]["naurc"] = _mean_ci(naurcs)
        agg["methods"] = methods
    elif command == "conformal":
        modes: dict = {}
        for mode in per_seed[0]["modes"]:
            modes[mode] = {
                stat: _mean_ci([r["modes"][mode][stat] for r in per_seed])
                for stat in ("coverage", "width", "mace", "maxce", "slope")
            }
        agg["modes"] = modes
    return agg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tds",
        description="Trajectory-based difficulty scoring experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, action="append", help="override config seeds (repeatable)")
        p.add_argument("--out", help="override output directory")
        p.add_argument("--jobs", type=int, default=1, help="parallel seed workers")
    return parser


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("TDS_LOG", "error").lower(), logging.ERROR
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        doc = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config {args.config}: {exc}", file=sys.stderr)
        return 2
    if args.seed:
        doc["seeds"] = args.seed
    if args.out:
        doc["out_dir"] = args.out
    try:
        cfg = ExperimentConfig.from_dict(doc)
    except ValueError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 2

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_json = json.dumps(doc, sort_keys=True)

    started = time.time()
    per_seed: dict[int, dict] = {}
    failures: dict[int, str] = {}
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = {
                pool.submit(_run_one_seed, args.command, config_json, s, str(out)): s
                for s in cfg.seeds
            }
            for fut in concurrent.futures.as_completed(futures):
                s = futures[fut]
                try:
                    per_seed[s] = fut.result()
                except Exception as exc:  # noqa: BLE001 - report and continue
                    failures[s] = str(exc)
    else:
        for s in cfg.seeds:
            try:
                per_seed[s] = _run_one_seed(args.command, config_json, s, str(out))
            except Exception as exc:  # noqa: BLE001
                failures[s] = str(exc)
                log.debug("seed %d failed", s, exc_info=True)

    ordered = [per_seed[s] for s in cfg.seeds if s in per_seed]
    if ordered:
        summary = {
            "command": args.command,
            "per_seed": ordered,
            "aggregate": _aggregate(args.command, ordered),
        }
        _write_json(out / "summary.json", summary)
    manifest = {
        "command": args.command,
        "config": doc,
        "seeds_completed": sorted(per_seed),
        "seeds_failed": sorted(failures),
        "created_unix": started,
        "layout": {
            "summary.json": "per-seed results and aggregate statistics",
            "seed_<N>/": "artifacts for one seed (curves, scores, regions, models)",
        },
    }
    _write_json(out / "MANIFEST.json", manifest)

    if failures:
        for s in sorted(failures):
            print(f"seed {s} failed: {failures[s]}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
