#!/usr/bin/env python3
"""Render mid-axial slices (gold field, forest prediction, absolute error)
for one evaluated case of a finished run directory. Requires matplotlib."""

import argparse
from pathlib import Path

import numpy as np

from headfield.volume import load_volume


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("run_dir", help="run directory produced by the eval command")
    parser.add_argument("--case", default="phantom_000_AP")
    parser.add_argument("--model", default="forest", choices=["forest", "linear"])
    parser.add_argument("--out", default=None, help="output PNG (default: <case>_<model>.png)")
    args = parser.parse_args()

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(args.run_dir)
    gold = load_volume(run / "cases" / args.case / "emag.vvol").values
    pred = load_volume(run / "eval" / "predictions" / f"{args.case}_{args.model}.vvol").values
    err = load_volume(run / "eval" / "errmaps" / f"{args.case}_{args.model}.vvol").values

    z = gold.shape[2] // 2
    vmax = float(np.percentile(gold[gold > 0], 99.5)) if (gold > 0).any() else 1.0
    fig, axes = plt.subplots(1, 3, figsize=(13, 4.2))
    panels = [
        (gold[:, :, z], f"gold |E| (V/cm), {args.case}", vmax),
        (pred[:, :, z], f"{args.model} prediction", vmax),
        (err[:, :, z], "absolute error", None),
    ]
    for ax, (img, title, top) in zip(axes, panels):
        im = ax.imshow(img.T, origin="lower", cmap="inferno", vmax=top)
        ax.set_title(title)
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    out = args.out or f"{args.case}_{args.model}.png"
    fig.savefig(out, dpi=130)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
