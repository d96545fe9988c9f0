"""Leave-one-out evaluation: error metrics, near/far stratification, reporting.

Errors are measured over non-air voxels only; that is the head-only quantity
the pipeline cares about, and it is stated in every rendered report. Each
held-out case is evaluated on its full volume (no air subsampling on the
test side).
"""

from __future__ import annotations

import io
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError
from .features import (
    FEATURE_COLUMNS,
    FeatureDataset,
    split_loocv,
    stack_cases,
)
from .forest import ForestModel, ForestParams, fit_forest, predict
from .linear import LinearGuards, LinearModel, fit_linear, predict_linear
from .volume import AIR, GridMeta, ScalarField

# Reference values from the literature on this method family, echoed in
# report footers for context (not asserted by the pipeline).
LITERATURE_FOREST_MAE = 0.14  # V/cm, clinical scale
LITERATURE_LINEAR_MAE = 0.29
LITERATURE_IMPORTANCES = {
    "dist_electrode_mm": 0.65,
    "dist_midline_mm": 0.15,
    "dist_csf_mm": 0.10,
    "conductivity": 0.05,
    "permittivity": 0.05,
}
LITERATURE_EXAMPLE_CASE = "case 1: AP 0.14 (0.62), LR 0.23 (0.80)"

DEFAULT_NEAR_FAR_MM = 16.6


@dataclass(frozen=True)
class CaseResult:
    case_id: str
    phantom_id: str
    axis: str
    model: str  # "forest" | "linear"
    mae: float  # V/cm, mean |pred - gold| over evaluated voxels
    sd: float  # V/cm, SD of |pred - gold|
    near_mse: float | None  # (V/cm)^2 where d_e < threshold; None if stratum empty
    far_mse: float | None
    n_voxels: int
    predict_seconds: float


@dataclass(frozen=True)
class ModelAggregate:
    mean_mae: float
    sd_mae: float | None  # None with a single case
    min_mae: float
    max_mae: float
    n_cases: int


@dataclass(frozen=True)
class EvalReport:
    cases: list[CaseResult]
    aggregates: dict[str, ModelAggregate]
    fold_importances: dict[str, list[float]]  # phantom id -> 5 importances
    fold_oob: dict[str, float]
    timings: dict[str, dict[str, float]]  # case id -> stage seconds
    near_far_threshold_mm: float
    mask_policy: str
    config_echo: dict = field(default_factory=dict)


def error_map(pred: ScalarField, gold: ScalarField, mask: np.ndarray) -> ScalarField:
    """|pred - gold| on masked voxels, 0 elsewhere."""
    if pred.meta.dims != gold.meta.dims or pred.meta.spacing != gold.meta.spacing:
        raise ValueError("prediction and gold grids do not match")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.meta.dims:
        raise ValueError("mask shape does not match the grids")
    out = np.zeros(pred.meta.dims)
    out[mask] = np.abs(
        pred.values[mask].astype(np.float64) - gold.values[mask].astype(np.float64)
    )
    return ScalarField(pred.meta, out, "volt-per-cm")


def case_metrics(
    pred: ScalarField,
    gold: ScalarField,
    dist_electrode: ScalarField,
    mask: np.ndarray,
    threshold_mm: float = DEFAULT_NEAR_FAR_MM,
    case_id: str = "",
    phantom_id: str = "",
    axis: str = "",
    model: str = "",
    predict_seconds: float = 0.0,
) -> CaseResult:
    """Absolute-error statistics over ``mask``, stratified at ``threshold_mm``."""
    diff = error_map(pred, gold, mask).values
    if dist_electrode.meta.dims != pred.meta.dims:
        raise ValueError("distance field grid does not match")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("evaluation mask is empty")
    err = diff[mask]
    d_e = dist_electrode.values[mask]
    near = err[d_e < threshold_mm]
    far = err[d_e >= threshold_mm]
    return CaseResult(
        case_id=case_id,
        phantom_id=phantom_id,
        axis=axis,
        model=model,
        mae=float(err.mean()),
        sd=float(err.std()),
        near_mse=float(np.mean(near**2)) if near.size else None,
        far_mse=float(np.mean(far**2)) if far.size else None,
        n_voxels=int(err.size),
        predict_seconds=predict_seconds,
    )


@dataclass(frozen=True)
class CaseBundle:
    """One evaluation case: its full feature rows plus upstream stage timings."""

    dataset: FeatureDataset
    solve_seconds: float = 0.0
    feature_seconds: float = 0.0


def fold_forest_seed(master_seed: int, phantom_id: str) -> int:
    return int(
        np.random.SeedSequence(
            (int(master_seed), zlib.crc32(f"forest:{phantom_id}".encode()))
        ).generate_state(1)[0]
    )


def _to_grid(meta: GridMeta, voxel_index: np.ndarray, values: np.ndarray) -> np.ndarray:
    flat = np.zeros(meta.n_voxels)
    flat[voxel_index] = values
    return flat.reshape(meta.dims, order="F")


def run_loocv(
    bundles: list[CaseBundle],
    forest_params: ForestParams = ForestParams(),
    guards: LinearGuards = LinearGuards(),
    seed: int = 0,
    near_far_threshold_mm: float = DEFAULT_NEAR_FAR_MM,
    config_echo: dict | None = None,
    artifact_sink=None,
) -> EvalReport:
    """Leave one phantom out at a time; train both models on the rest.

    ``artifact_sink(phantom_id, forest_model, linear_model, case_predictions)``
    is invoked once per fold (predictions keyed by case id, in linear voxel
    order) so callers can persist fold artifacts without holding them all.
    """
    datasets = [b.dataset for b in bundles]
    ids = [d.case_id for d in datasets]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate case ids in evaluation input")
    phantom_ids = sorted({d.phantom_id for d in datasets})
    if len(phantom_ids) < 2:
        raise DatasetError("leave-one-out needs at least 2 phantoms")

    results: list[CaseResult] = []
    fold_importances: dict[str, list[float]] = {}
    fold_oob: dict[str, float] = {}
    timings: dict[str, dict[str, float]] = {}
    bundle_by_id = {b.dataset.case_id: b for b in bundles}

    for pid in phantom_ids:
        train, test = split_loocv(datasets, pid, seed)
        X, y = stack_cases(train)
        forest = fit_forest(X, y, forest_params, fold_forest_seed(seed, pid))
        lin = fit_linear(X, y, guards)
        fold_importances[pid] = [float(v) for v in forest.importances]
        fold_oob[pid] = forest.oob_mse

        predictions: dict[str, dict[str, np.ndarray]] = {}
        for ds in sorted(test, key=lambda d: d.case_id):
            t0 = time.perf_counter()
            pred_f = predict(forest, ds.features)
            t_forest = time.perf_counter() - t0
            t0 = time.perf_counter()
            pred_l = predict_linear(lin, ds.features)
            t_linear = time.perf_counter() - t0

            meta = ds.meta
            gold_grid = ScalarField(meta, _to_grid(meta, ds.voxel_index, ds.target), "volt-per-cm")
            d_e_grid = ScalarField(meta, _to_grid(meta, ds.voxel_index, ds.features[:, 2]), "mm")
            mask = _to_grid(meta, ds.voxel_index, (ds.tissue != AIR).astype(np.float64)) > 0
            for model_name, pred_vals in (("forest", pred_f), ("linear", pred_l)):
                pred_grid = ScalarField(meta, _to_grid(meta, ds.voxel_index, pred_vals), "volt-per-cm")
                results.append(
                    case_metrics(
                        pred_grid,
                        gold_grid,
                        d_e_grid,
                        mask,
                        threshold_mm=near_far_threshold_mm,
                        case_id=ds.case_id,
                        phantom_id=ds.phantom_id,
                        axis=ds.axis,
                        model=model_name,
                        predict_seconds=t_forest if model_name == "forest" else t_linear,
                    )
                )
            bundle = bundle_by_id[ds.case_id]
            timings[ds.case_id] = {
                "solve_seconds": bundle.solve_seconds,
                "feature_seconds": bundle.feature_seconds,
                "forest_predict_seconds": t_forest,
                "linear_predict_seconds": t_linear,
            }
            predictions[ds.case_id] = {"forest": pred_f, "linear": pred_l}
        if artifact_sink is not None:
            artifact_sink(pid, forest, lin, predictions)

    results.sort(key=lambda r: (r.case_id, r.model))
    aggregates = {
        model: _aggregate([r for r in results if r.model == model])
        for model in ("forest", "linear")
    }
    return EvalReport(
        cases=results,
        aggregates=aggregates,
        fold_importances=fold_importances,
        fold_oob=fold_oob,
        timings=timings,
        near_far_threshold_mm=near_far_threshold_mm,
        mask_policy="non-air voxels only",
        config_echo=config_echo or {},
    )


def _aggregate(case_results: list[CaseResult]) -> ModelAggregate:
    maes = np.array([r.mae for r in case_results])
    return ModelAggregate(
        mean_mae=float(maes.mean()),
        sd_mae=float(maes.std(ddof=1)) if maes.size > 1 else None,
        min_mae=float(maes.min()),
        max_mae=float(maes.max()),
        n_cases=int(maes.size),
    )


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.6g}"


def render_report(report: EvalReport, fmt: str = "text") -> str:
    """Plain-text report or the per-case CSV (no wall-clock columns in the CSV,
    so reruns with identical seeds are byte identical)."""
    if fmt == "csv":
        buf = io.StringIO()
        buf.write("case_id,phantom_id,axis,model,mae_v_per_cm,sd_v_per_cm,near_mse,far_mse,n_voxels\n")
        for r in report.cases:
            near = "" if r.near_mse is None else repr(r.near_mse)
            far = "" if r.far_mse is None else repr(r.far_mse)
            buf.write(
                f"{r.case_id},{r.phantom_id},{r.axis},{r.model},"
                f"{repr(r.mae)},{repr(r.sd)},{near},{far},{r.n_voxels}\n"
            )
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")

    buf = io.StringIO()
    buf.write("Field surrogate evaluation (leave-one-out)\n")
    buf.write(f"evaluation mask: {report.mask_policy}\n")
    buf.write(f"near/far split: dist_electrode threshold {report.near_far_threshold_mm} mm\n\n")

    buf.write("Per-case absolute error vs gold field (V/cm):\n")
    buf.write(f"{'case':<24}{'model':<8}{'MAE':>10}{'SD':>10}{'nearMSE':>12}{'farMSE':>12}{'n':>10}\n")
    for r in report.cases:
        buf.write(
            f"{r.case_id:<24}{r.model:<8}{r.mae:>10.4f}{r.sd:>10.4f}"
            f"{_fmt(r.near_mse):>12}{_fmt(r.far_mse):>12}{r.n_voxels:>10}\n"
        )

    buf.write("\nAggregates over per-case MAE (V/cm):\n")
    for model, agg in report.aggregates.items():
        sd = _fmt(agg.sd_mae)
        buf.write(
            f"  {model}: mean {agg.mean_mae:.4f}, sd {sd}, "
            f"range [{agg.min_mae:.4f}, {agg.max_mae:.4f}], n={agg.n_cases}\n"
        )

    if report.fold_importances:
        buf.write("\nForest feature importances per fold (mean decrease in impurity):\n")
        buf.write(f"{'fold':<16}" + "".join(f"{c:>20}" for c in FEATURE_COLUMNS) + f"{'oob_mse':>12}\n")
        for pid in sorted(report.fold_importances):
            imps = report.fold_importances[pid]
            buf.write(
                f"{pid:<16}" + "".join(f"{v:>20.4f}" for v in imps)
                + f"{report.fold_oob.get(pid, float('nan')):>12.5f}\n"
            )
        mean_imp = np.mean([report.fold_importances[p] for p in report.fold_importances], axis=0)
        buf.write(f"{'mean':<16}" + "".join(f"{v:>20.4f}" for v in mean_imp) + "\n")

    if report.timings:
        buf.write("\nTiming per case (seconds):\n")
        buf.write(f"{'case':<24}{'solve':>10}{'features':>10}{'forest':>10}{'linear':>10}{'speedup':>10}\n")
        ratios = []
        for cid in sorted(report.timings):
            t = report.timings[cid]
            surrogate = t["feature_seconds"] + t["forest_predict_seconds"]
            ratio = t["solve_seconds"] / surrogate if surrogate > 0 else float("nan")
            if np.isfinite(ratio):
                ratios.append(ratio)
            buf.write(
                f"{cid:<24}{t['solve_seconds']:>10.3f}{t['feature_seconds']:>10.3f}"
                f"{t['forest_predict_seconds']:>10.3f}{t['linear_predict_seconds']:>10.3f}"
                f"{ratio:>10.2f}\n"
            )
        if ratios:
            buf.write(
                f"mean speedup, gold solve vs (features + forest predict): "
                f"{float(np.mean(ratios)):.2f}x\n"
            )

    buf.write("\nLiterature reference (clinical-scale results for this method family):\n")
    buf.write(
        f"  forest MAE {LITERATURE_FOREST_MAE} V/cm vs multilinear {LITERATURE_LINEAR_MAE} V/cm; "
        f"{LITERATURE_EXAMPLE_CASE}\n"
    )
    buf.write(
        "  importance profile: "
        + ", ".join(f"{k} {v}" for k, v in LITERATURE_IMPORTANCES.items())
        + "\n"
    )
    return buf.getvalue()
