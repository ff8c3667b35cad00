"""Stage runners for the end-to-end workflow.

Each stage reads its inputs from disk, writes its artifacts under the run
directory and returns the paths it wrote. Stages are deterministic given
(inputs, config, seed), so rerunning any of them reproduces identical bytes.

Layout under ``cfg.out``::

    features/     <layer>.asc, aux_<name>.asc, stack.json
    aggregate/    label_<indicator>.asc, households.asc, coverage.asc, training.csv, report.json
    models/       model_<indicator>.json
    metrics/      metrics.json
    predictions/  pred_<indicator>.asc, unclamped_<indicator>.asc
    explain/      attributions_<indicator>.csv, summary_<indicator>.json, summary_<indicator>.txt
"""
from __future__ import annotations

import logging
import platform
from dataclasses import replace
from pathlib import Path
from typing import Dict, List

import numpy as np

from . import __version__
from . import io as wio
from .census import blocks_to_grid, join_features_labels, label_column
from .config import PipelineConfig, effective_threads
from .errors import MissingInputError, ValidationError
from .explain import summarize_attributions, tree_shap
from .features import FeatureStack, assemble_stack
from .geo import GridSpec
from .forest import cross_validate, fit_forest, predict_stack, seeded_permutation

log = logging.getLogger(__name__)

STAGES = ("features", "aggregate", "train", "evaluate", "predict", "explain")


def _dir(cfg: PipelineConfig, name: str) -> Path:
    d = Path(cfg.out) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingInputError(f"{path} not found; run the {stage!r} stage first")
    return path


def _manifest(cfg: PipelineConfig):
    m = wio.load_manifest(cfg.manifest)
    if cfg.grid is not None:
        m = replace(m, grid=cfg.grid)
    return m


def _model_path(cfg, indicator):
    return Path(cfg.out) / "models" / f"model_{indicator}.json"


# --- features ----------------------------------------------------------------


def run_features(cfg: PipelineConfig) -> List[Path]:
    manifest = _manifest(cfg)
    stack = assemble_stack(manifest, threads=effective_threads(cfg),
                           low_access_threshold=cfg.low_access_threshold)
    d = _dir(cfg, "features")
    written = []
    for name, r in stack.layers.items():
        p = d / f"{name}.asc"
        wio.write_ascii_grid(r, p)
        written.append(p)
    for name, r in stack.auxiliary.items():
        p = d / f"aux_{name}.asc"
        wio.write_ascii_grid(r, p)
        written.append(p)
    p = d / "stack.json"
    wio.write_json({"grid": stack.spec.to_dict(), "layers": stack.names, "provenance": stack.provenance,
                    "auxiliary": sorted(stack.auxiliary)}, p)
    written.append(p)
    log.info("features: %d layers", len(stack.layers))
    return written


def load_stack(cfg: PipelineConfig) -> FeatureStack:
    d = Path(cfg.out) / "features"
    doc = wio.load_json(_need(d / "stack.json", "features"))
    layers = {n: wio.read_ascii_grid(_need(d / f"{n}.asc", "features")) for n in doc["layers"]}
    aux = {n: wio.read_ascii_grid(_need(d / f"aux_{n}.asc", "features")) for n in doc.get("auxiliary", [])}
    return FeatureStack(GridSpec.from_dict(doc["grid"]), layers, doc["provenance"], aux)


# --- aggregate -----------------------------------------------------------------


def run_aggregate(cfg: PipelineConfig) -> List[Path]:
    manifest = _manifest(cfg)
    if manifest.blocks_path is None:
        raise ValidationError("manifest has no blocks_path")
    stack = load_stack(cfg)
    blocks = wio.read_blocks_geojson(manifest.blocks_path, cfg.indicators, manifest.projection())
    grid = blocks_to_grid(blocks, stack.spec, cfg.nodata_area_threshold, cfg.indicators)
    table = join_features_labels(stack, grid)
    d = _dir(cfg, "aggregate")
    written = []
    for ind, r in grid.labels.items():
        p = d / f"label_{ind}.asc"
        wio.write_ascii_grid(r, p)
        written.append(p)
    for name, r in (("households", grid.household_weight), ("coverage", grid.coverage)):
        p = d / f"{name}.asc"
        wio.write_ascii_grid(r, p)
        written.append(p)
    p = d / "training.csv"
    wio.write_training_csv(table, p)
    written.append(p)
    p = d / "report.json"
    wio.write_json({"blocks": grid.report, "table": table.report}, p)
    written.append(p)
    log.info("aggregate: %d training rows from %d blocks", len(table), len(blocks))
    return written


def _table(cfg):
    return wio.read_training_csv(_need(Path(cfg.out) / "aggregate" / "training.csv", "aggregate"))


# --- train / evaluate --------------------------------------------------------------


def run_train(cfg: PipelineConfig) -> List[Path]:
    table = _table(cfg)
    stack_doc = wio.load_json(_need(Path(cfg.out) / "features" / "stack.json", "features"))
    norm = {n: p["normalization"] for n, p in stack_doc["provenance"].items() if "normalization" in p}
    d = _dir(cfg, "models")
    written = []
    for ind in cfg.indicators:
        model = fit_forest(table.X, table.label(ind), cfg.forest, table.feature_names,
                           label_column(ind), norm, threads=effective_threads(cfg))
        p = d / f"model_{ind}.json"
        wio.write_model_json(model, p)
        written.append(p)
        log.info("train: %s, %d trees", ind, len(model.trees))
    return written


def run_evaluate(cfg: PipelineConfig) -> List[Path]:
    table = _table(cfg)
    reports = {}
    for ind in cfg.indicators:
        model = wio.read_model_json(_need(_model_path(cfg, ind), "train"))
        reports[ind] = cross_validate(table.X, table.label(ind), model.params, cfg.cv.n_folds, cfg.seed,
                                      cfg.cv.mode, label_column(ind), threads=effective_threads(cfg))
        log.info("evaluate: %s R2=%.4f RMSE=%.4f", ind, reports[ind].mean_r_squared, reports[ind].mean_rmse)
    p = _dir(cfg, "metrics") / "metrics.json"
    wio.write_metrics_json(reports, p)
    return [p]


# --- predict / explain -------------------------------------------------------------


def run_predict(cfg: PipelineConfig) -> List[Path]:
    stack = load_stack(cfg)
    d = _dir(cfg, "predictions")
    written = []
    for ind in cfg.indicators:
        model = wio.read_model_json(_need(_model_path(cfg, ind), "train"))
        pred = predict_stack(model, stack)
        for prefix, r in (("pred", pred.prediction), ("unclamped", pred.unclamped)):
            p = d / f"{prefix}_{ind}.asc"
            wio.write_ascii_grid(r, p)
            written.append(p)
    return written


def explain_rows(n_rows: int, n_samples: int, seed: int) -> np.ndarray:
    """Seeded subset of training rows to attribute, in ascending order."""
    if n_samples >= n_rows:
        return np.arange(n_rows)
    return np.sort(seeded_permutation(n_rows, seed)[:n_samples])


def run_explain(cfg: PipelineConfig) -> List[Path]:
    table = _table(cfg)
    rows = explain_rows(len(table), cfg.explain.n_samples, cfg.seed)
    X = table.X[rows]
    d = _dir(cfg, "explain")
    written = []
    for ind in cfg.indicators:
        model = wio.read_model_json(_need(_model_path(cfg, ind), "train"))
        attr = tree_shap(model, X, threads=effective_threads(cfg))
        summary = summarize_attributions(attr, X)
        p = d / f"attributions_{ind}.csv"
        wio.write_attribution_csv(table.cell_id[rows], attr, p)
        written.append(p)
        p = d / f"summary_{ind}.json"
        wio.write_json({"label": label_column(ind), "base_value": attr.base_value, "n_samples": int(len(rows)),
                        **summary.to_dict()}, p)
        written.append(p)
        p = d / f"summary_{ind}.txt"
        p.write_text(summary.to_text(), encoding="utf-8")
        written.append(p)
    return written


RUNNERS = {
    "features": run_features,
    "aggregate": run_aggregate,
    "train": run_train,
    "evaluate": run_evaluate,
    "predict": run_predict,
    "explain": run_explain,
}


def _versions() -> Dict[str, str]:
    import numba
    import scipy

    return {"washmap": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def run_all(cfg: PipelineConfig) -> List[Path]:
    written = []
    for stage in STAGES:
        written += RUNNERS[stage](cfg)
    p = Path(cfg.out) / "run_manifest.json"
    wio.write_json({"config": cfg.to_dict(), "config_sha256": cfg.digest(), "seed": cfg.seed,
                    "versions": _versions(), "stages": list(STAGES)}, p)
    written.append(p)
    return written
