"""Stage-oriented command line: phantom -> solve -> eval, plus model tools.

Stages hand off through the run directory, so the expensive gold-standard
solves are cached across surrogate experiments. Exit codes: 0 success,
1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluate, features, forest, geometry, linear, phantom, solver, volume
from .config import RunConfig
from .errors import HeadfieldError, ModelFormatError, RankDeficiencyError, SolverError

AXES = ("AP", "LR")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(p: _Parser):
    p.add_argument("--config", help="JSON run config; flags override file values")
    p.add_argument("--out", help="run directory (overrides config out_dir)")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")


def build_parser() -> _Parser:
    parser = _Parser(prog="headfield", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[], help="generate the phantom cohort")
    _add_common(p)
    p.add_argument("--cohort-size", type=int, help="number of phantoms")
    p.add_argument("--dims", type=int, nargs=3, metavar=("NX", "NY", "NZ"))
    p.add_argument("--spacing", type=float, nargs=3, metavar=("SX", "SY", "SZ"), help="mm per voxel")
    p.add_argument("--semi-axes", type=float, nargs=3, metavar=("AX", "AY", "AZ"), help="head semi-axes (mm)")
    p.add_argument("--skin-mm", type=float)
    p.add_argument("--skull-mm", type=float)
    p.add_argument("--csf-mm", type=float)
    p.add_argument("--grey-mm", type=float)
    p.add_argument("--tumor-offset", type=float, nargs=3, metavar=("OX", "OY", "OZ"))
    p.add_argument("--tumor-enhancing-radius", type=float)
    p.add_argument("--tumor-necrotic-radius", type=float)
    p.add_argument("--jitter-semi-axes", type=float)
    p.add_argument("--jitter-tumor-center", type=float)
    p.add_argument("--jitter-tumor-radius", type=float)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("solve", help="place electrodes and compute gold fields")
    _add_common(p)
    p.add_argument("--case", help="solve only this phantom id (default: all)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("eval", help="leave-one-out evaluation of both surrogates")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("importance", help="print feature importances of a saved forest")
    p.add_argument("--model", required=True, help="forest model file")
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("predict", help="apply a saved model to a phantom + layout")
    p.add_argument("--model", required=True, help="forest or linear model file")
    p.add_argument("--phantom", required=True, help="label volume file")
    p.add_argument("--layout", required=True, help="electrode layout JSON")
    p.add_argument("--tissue-table", help="tissue table JSON (default: built-in)")
    p.add_argument("--out", required=True, help="output field file")
    p.set_defaults(func=cmd_predict)

    return parser


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise HeadfieldError(f"config file not found: {path}")
        cfg = RunConfig.load(path)
    else:
        cfg = RunConfig()
    overrides = {}
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if getattr(args, "seed", None) is not None:
        overrides["master_seed"] = args.seed
    flag_map = {
        "cohort_size": "cohort_size",
        "dims": "dims",
        "spacing": "spacing_mm",
        "semi_axes": "semi_axes_mm",
        "skin_mm": "skin_mm",
        "skull_mm": "skull_mm",
        "csf_mm": "csf_mm",
        "grey_mm": "grey_mm",
        "tumor_offset": "tumor_offset_mm",
        "tumor_enhancing_radius": "tumor_enhancing_radius_mm",
        "tumor_necrotic_radius": "tumor_necrotic_radius_mm",
        "jitter_semi_axes": "jitter_semi_axes_mm",
        "jitter_tumor_center": "jitter_tumor_center_mm",
        "jitter_tumor_radius": "jitter_tumor_radius_mm",
    }
    for flag, field_name in flag_map.items():
        val = getattr(args, flag, None)
        if val is not None:
            overrides[field_name] = tuple(val) if isinstance(val, list) else val
    if overrides:
        cfg = RunConfig.from_dict({**json.loads(cfg.to_json()), **overrides})
    return cfg


def _phantom_id(i: int) -> str:
    return f"phantom_{i:03d}"


def _paths(cfg: RunConfig):
    out = Path(cfg.out_dir)
    return out, out / "phantoms", out / "cases", out / "eval"


def _echo_config(cfg: RunConfig):
    out, *_ = _paths(cfg)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config_echo.json")


def cmd_phantom(args) -> int:
    cfg = _load_config(args)
    _echo_config(cfg)
    _, pdir, _, _ = _paths(cfg)
    pdir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i in range(cfg.cohort_size):
        spec = cfg.phantom_spec(i)
        vol = phantom.make_phantom(spec)
        pid = _phantom_id(i)
        fname = pdir / f"{pid}.vvol"
        volume.save_volume(fname, vol)
        manifest.append({"id": pid, "file": fname.name, "seed": spec.seed})
        print(f"wrote {fname}")
    (pdir / "manifest.json").write_text(
        json.dumps({"phantoms": manifest}, indent=2, sort_keys=True)
    )
    return 0


def _read_manifest(cfg: RunConfig) -> list[dict]:
    _, pdir, _, _ = _paths(cfg)
    mpath = pdir / "manifest.json"
    if not mpath.exists():
        raise HeadfieldError(f"phantom manifest not found: {mpath} (run `headfield phantom` first)")
    return json.loads(mpath.read_text())["phantoms"]


def cmd_solve(args) -> int:
    cfg = _load_config(args)
    _echo_config(cfg)
    _, pdir, cdir, _ = _paths(cfg)
    table = cfg.tissue_table()
    params = cfg.solve_params()
    entries = _read_manifest(cfg)
    if args.case is not None:
        entries = [e for e in entries if e["id"] == args.case]
        if not entries:
            raise HeadfieldError(f"phantom id {args.case!r} not in the manifest")
    for entry in entries:
        ppath = pdir / entry["file"]
        if not ppath.exists():
            raise HeadfieldError(f"phantom file not found: {ppath}")
        vol = volume.load_volume(ppath)
        for axis in AXES:
            case_id = f"{entry['id']}_{axis}"
            case_dir = cdir / case_id
            case_dir.mkdir(parents=True, exist_ok=True)
            layout = geometry.place_pair(vol, axis, cfg.patch_radius_mm)
            t0 = time.perf_counter()
            try:
                sol = solver.solve_potential(vol, table, layout, params)
            except SolverError as exc:
                raise SolverError(f"case {case_id}: {exc}") from exc
            emag = solver.field_magnitude(sol)
            solve_seconds = time.perf_counter() - t0
            layout.save(case_dir / "layout.json")
            volume.save_volume(case_dir / "phi.vvol", sol.phi_field())
            volume.save_volume(case_dir / "emag.vvol", emag)
            (case_dir / "solve_log.json").write_text(
                json.dumps(
                    {
                        "case_id": case_id,
                        "axis": axis,
                        "iterations": sol.iterations,
                        "final_residual": sol.final_residual,
                        "solve_seconds": solve_seconds,
                        "voxels_solved": int(sol.solved_mask.sum()),
                    },
                    indent=2,
                    sort_keys=True,
                )
            )
            print(
                f"{case_id}: {sol.iterations} iterations, residual {sol.final_residual:.2e}, "
                f"{solve_seconds:.2f}s"
            )
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    _echo_config(cfg)
    _, pdir, cdir, edir = _paths(cfg)
    entries = _read_manifest(cfg)

    missing = []
    for entry in entries:
        ppath = pdir / entry["file"]
        if not ppath.exists():
            missing.append(str(ppath))
        for axis in AXES:
            case_dir = cdir / f"{entry['id']}_{axis}"
            for fname in ("layout.json", "emag.vvol", "solve_log.json"):
                if not (case_dir / fname).exists():
                    missing.append(str(case_dir / fname))
    if missing:
        listing = "\n  ".join(missing)
        raise HeadfieldError(
            f"missing prerequisites (run `headfield solve` first):\n  {listing}"
        )

    table = cfg.tissue_table()
    bundles = []
    for entry in entries:
        vol = volume.load_volume(pdir / entry["file"])
        for axis in AXES:
            case_dir = cdir / f"{entry['id']}_{axis}"
            layout = geometry.ElectrodeLayout.load(case_dir / "layout.json")
            gold = volume.load_volume(case_dir / "emag.vvol")
            log = json.loads((case_dir / "solve_log.json").read_text())
            t0 = time.perf_counter()
            ds = features.extract_features(vol, table, layout, gold, phantom_id=entry["id"])
            feature_seconds = time.perf_counter() - t0
            bundles.append(
                evaluate.CaseBundle(
                    dataset=ds,
                    solve_seconds=float(log["solve_seconds"]),
                    feature_seconds=feature_seconds,
                )
            )

    edir.mkdir(parents=True, exist_ok=True)
    (edir / "models").mkdir(exist_ok=True)
    (edir / "errmaps").mkdir(exist_ok=True)
    (edir / "predictions").mkdir(exist_ok=True)
    datasets = {b.dataset.case_id: b.dataset for b in bundles}
    written: list[str] = []

    def sink(pid, forest_model, linear_model, predictions):
        forest.save_forest(edir / "models" / f"fold_{pid}.forest", forest_model)
        linear_model.save(edir / "models" / f"fold_{pid}_linear.json")
        written.append(f"models/fold_{pid}.forest")
        written.append(f"models/fold_{pid}_linear.json")
        for case_id, preds in predictions.items():
            ds = datasets[case_id]
            meta = ds.meta
            mask = evaluate._to_grid(meta, ds.voxel_index, (ds.tissue != volume.AIR).astype(float)) > 0
            gold_grid = volume.ScalarField(
                meta, evaluate._to_grid(meta, ds.voxel_index, ds.target), "volt-per-cm"
            )
            for model_name, vals in preds.items():
                pred_grid = volume.ScalarField(
                    meta, evaluate._to_grid(meta, ds.voxel_index, vals), "volt-per-cm"
                )
                emap = evaluate.error_map(pred_grid, gold_grid, mask)
                volume.save_volume(edir / "predictions" / f"{case_id}_{model_name}.vvol", pred_grid)
                volume.save_volume(edir / "errmaps" / f"{case_id}_{model_name}.vvol", emap)
                written.append(f"predictions/{case_id}_{model_name}.vvol")
                written.append(f"errmaps/{case_id}_{model_name}.vvol")

    report = evaluate.run_loocv(
        bundles,
        forest_params=cfg.forest_params(),
        guards=cfg.guards(),
        seed=cfg.master_seed,
        near_far_threshold_mm=cfg.near_far_threshold_mm,
        config_echo=json.loads(cfg.to_json()),
        artifact_sink=sink,
    )
    (edir / "report.txt").write_text(evaluate.render_report(report, "text"))
    (edir / "report.csv").write_text(evaluate.render_report(report, "csv"))
    (edir / "timings.json").write_text(json.dumps(report.timings, indent=2, sort_keys=True))
    (edir / "importances.json").write_text(
        json.dumps(
            {"per_fold": report.fold_importances, "oob_mse": report.fold_oob},
            indent=2,
            sort_keys=True,
        )
    )
    written += ["report.txt", "report.csv", "timings.json", "importances.json"]
    (edir / "manifest.json").write_text(
        json.dumps(
            {"artifacts": sorted(written), "mask_policy": report.mask_policy},
            indent=2,
            sort_keys=True,
        )
    )
    print(evaluate.render_report(report, "text"))
    return 0


def _sniff_model(path: Path):
    if not path.exists():
        raise HeadfieldError(f"model file not found: {path}")
    with open(path, "rb") as fh:
        first = fh.readline()
    try:
        header = json.loads(first)
        if isinstance(header, dict) and header.get("magic") == "HFRF1":
            return "forest", forest.load_forest(path)
    except json.JSONDecodeError:
        pass
    try:
        return "linear", linear.LinearModel.load(path)
    except (ModelFormatError, OSError) as exc:
        raise ModelFormatError(f"{path}: not a forest or linear model file ({exc})") from exc


def cmd_importance(args) -> int:
    kind, model = _sniff_model(Path(args.model))
    if kind != "forest":
        raise ModelFormatError(f"{args.model}: importances are defined for forest models only")
    imps = model.importances
    order = np.argsort(imps)[::-1]
    print(f"{'feature':<24}{'importance':>12}{'literature':>12}")
    for j in order:
        name = features.FEATURE_COLUMNS[j]
        ref = evaluate.LITERATURE_IMPORTANCES.get(name, float("nan"))
        print(f"{name:<24}{imps[j]:>12.4f}{ref:>12.2f}")
    print(f"{'sum':<24}{imps.sum():>12.4f}{'1.00':>12}")
    if model.importances_degenerate:
        print("note: all trees are single leaves; importances fall back to uniform")
    print("(literature column: reference importance profile reported for this method family)")
    return 0


def cmd_predict(args) -> int:
    vol_path = Path(args.phantom)
    if not vol_path.exists():
        raise HeadfieldError(f"phantom file not found: {vol_path}")
    vol = volume.load_volume(vol_path)
    if not isinstance(vol, volume.LabelVolume):
        raise HeadfieldError(f"{vol_path}: expected a label volume")
    layout_path = Path(args.layout)
    if not layout_path.exists():
        raise HeadfieldError(f"layout file not found: {layout_path}")
    layout = geometry.ElectrodeLayout.load(layout_path)
    table = (
        volume.TissueTable.load(args.tissue_table)
        if args.tissue_table
        else volume.default_tissue_table()
    )
    kind, model = _sniff_model(Path(args.model))
    X = features.feature_matrix(vol, table, layout)
    values = forest.predict(model, X) if kind == "forest" else linear.predict_linear(model, X)
    grid = values.reshape(vol.meta.dims, order="F")
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    volume.save_volume(out_path, volume.ScalarField(vol.meta, grid, "volt-per-cm"))
    print(f"wrote {out_path} ({kind} model, {values.shape[0]} voxels)")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (SolverError, RankDeficiencyError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (HeadfieldError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
