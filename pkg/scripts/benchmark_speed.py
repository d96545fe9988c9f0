#!/usr/bin/env python3
"""Measure gold-solve time vs surrogate (features + forest predict) time
across grid sizes and print the per-case speed ratio table."""

import argparse
import time
from dataclasses import replace

import numpy as np

from headfield.features import extract_features, subsample_air
from headfield.forest import ForestParams, fit_forest, predict
from headfield.geometry import place_pair
from headfield.phantom import default_phantom_spec, make_phantom
from headfield.solver import field_magnitude, solve_potential
from headfield.volume import default_tissue_table


def run_size(n: int, seed: int):
    spacing = 96.0 / n  # keep the same physical head extent
    table = default_tissue_table()
    spec = default_phantom_spec(dims=(n, n, n), spacing=(spacing,) * 3, seed=seed)
    vol_train = make_phantom(replace(spec, seed=seed + 1))
    layout_tr = place_pair(vol_train, "AP")
    gold_tr = field_magnitude(solve_potential(vol_train, table, layout_tr))
    ds_tr = subsample_air(extract_features(vol_train, table, layout_tr, gold_tr, "train"), 0)
    model = fit_forest(ds_tr.features, ds_tr.target, ForestParams(), seed=0)

    vol = make_phantom(spec)
    layout = place_pair(vol, "AP")
    predict(model, ds_tr.features[:64])  # warm the jit path

    t0 = time.perf_counter()
    sol = solve_potential(vol, table, layout)
    gold = field_magnitude(sol)
    t_solve = time.perf_counter() - t0

    t0 = time.perf_counter()
    ds = extract_features(vol, table, layout, gold, "held")
    t_feat = time.perf_counter() - t0

    t0 = time.perf_counter()
    predict(model, ds.features)
    t_pred = time.perf_counter() - t0

    return t_solve, t_feat, t_pred, ds.n_rows, sol.iterations


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", type=int, nargs="+", default=[32, 48, 64])
    parser.add_argument("--seed", type=int, default=500)
    args = parser.parse_args()

    print(f"{'grid':>6}{'voxels':>10}{'solve_s':>9}{'feat_s':>8}{'pred_s':>8}"
          f"{'ratio':>7}{'vox/s':>12}{'cg_iters':>9}")
    for n in args.sizes:
        t_solve, t_feat, t_pred, n_rows, iters = run_size(n, args.seed)
        ratio = t_solve / (t_feat + t_pred)
        print(
            f"{n:>6}{n_rows:>10}{t_solve:>9.2f}{t_feat:>8.2f}{t_pred:>8.2f}"
            f"{ratio:>7.2f}{n_rows / t_pred:>12,.0f}{iters:>9}"
        )


if __name__ == "__main__":
    main()
