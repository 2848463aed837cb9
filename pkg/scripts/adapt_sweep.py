"""Noise-level mismatch sweep: a model trained at sigma_N, tested at several sigma_T.

For each test noise level, reports the mean PSNR of the unadapted model and of
the model with thresholds rescaled by sigma_T^2 / sigma_N^2.

    python3 scripts/adapt_sweep.py --checkpoint runs/desk50/model.linn --images desk_data \\
        --sigmas 15,25,35,50,65,80,95
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from dninn import load_checkpoint, load_images
from dninn.denoiser import adapt_thresholds
from dninn.train import mean_psnr


def sweep(model, images, sigmas, seed=0) -> list[dict]:
    rows = []
    for sigma_t in sigmas:
        plain, noisy = mean_psnr(model, images, sigma_t, np.random.default_rng(seed))
        adapted, _ = mean_psnr(adapt_thresholds(model, sigma_t), images, sigma_t, np.random.default_rng(seed))
        rows.append({"sigma_t": sigma_t, "noisy": noisy, "unadapted": plain, "adapted": adapted})
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--images", required=True, help="directory of clean test images")
    ap.add_argument("--sigmas", default="15,25,35,50,65,80,95")
    ap.add_argument("--last", type=int, default=0, help="use only the last N images (e.g. a held-out split)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write the rows to this file")
    args = ap.parse_args(argv)

    model = load_checkpoint(args.checkpoint, expect_head="st")
    images = load_images(args.images)
    if args.last:
        images = images[-args.last:]
    rows = sweep(model, images, [float(s) for s in args.sigmas.split(",")], args.seed)
    print(f"sigma_N={model.sigma_n:g}")
    print(f"{'sigma_T':>8} {'noisy':>8} {'unadapted':>10} {'adapted':>8}")
    for r in rows:
        print(f"{r['sigma_t']:8g} {r['noisy']:8.2f} {r['unadapted']:10.2f} {r['adapted']:8.2f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
