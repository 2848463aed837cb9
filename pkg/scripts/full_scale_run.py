"""Optional full-scale run: DnINN_ST at sigma = 15, 25, 50 with the complete recipe.

Trains on a 400-image grey-scale training set (9e4 patches of 40x40, 30
epochs, lr 1e-3 -> 1e-4 at epoch 20) and evaluates the mean PSNR on a 68-image
test set.  Each result is compared with its reference figure at +-0.3 dB.
This takes many hours to days on a CPU and is not part of the test suite.

    python3 scripts/full_scale_run.py --train-dir BSD400 --test-dir BSD68 --out runs/full_scale
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from dninn import TrainConfig, load_images, save_checkpoint, train
from dninn.train import mean_psnr

REFERENCE_PSNR = {15.0: 31.58, 25.0: 29.08, 50.0: 26.14}
TOLERANCE_DB = 0.3


def run_sigma(sigma: float, train_images, test_images, out: Path, seed: int, memory_efficient: bool) -> dict:
    cfg = TrainConfig(sigma=sigma, seed=seed, memory_efficient=memory_efficient)
    out.mkdir(parents=True, exist_ok=True)
    model, _ = train(cfg, train_images, metrics_path=out / "metrics.jsonl", dump_dir=out)
    save_checkpoint(model, out / "model.linn")
    den, noisy = mean_psnr(model, test_images, sigma, np.random.default_rng(seed + 1))
    target = REFERENCE_PSNR[sigma]
    return {"sigma": sigma, "psnr": den, "noisy_psnr": noisy, "reference": target,
            "within_tolerance": abs(den - target) <= TOLERANCE_DB}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train-dir", required=True)
    ap.add_argument("--test-dir", required=True)
    ap.add_argument("--out", default="runs/full_scale")
    ap.add_argument("--sigmas", default="15,25,50")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trace-backward", action="store_true",
                    help="keep activations instead of recomputing them (faster, more memory)")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    train_images = load_images(args.train_dir)
    test_images = load_images(args.test_dir)
    results = []
    for sigma in (float(s) for s in args.sigmas.split(",")):
        if sigma not in REFERENCE_PSNR:
            raise SystemExit(f"no reference figure for sigma={sigma:g}")
        res = run_sigma(sigma, train_images, test_images, Path(args.out) / f"sigma{sigma:g}", args.seed,
                        not args.trace_backward)
        results.append(res)
        print(f"sigma={sigma:g} psnr={res['psnr']:.2f} reference={res['reference']:.2f} "
              f"{'PASS' if res['within_tolerance'] else 'FAIL'}", flush=True)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "results.json").write_text(json.dumps(results, indent=2))
    return 0 if all(r["within_tolerance"] for r in results) else 1


if __name__ == "__main__":
    sys.exit(main())
