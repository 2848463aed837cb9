"""Desk-scale training run: a small DnINN_ST trained on the offline corpus.

Trains on the first 20 crops, validates on the last 5, and reports the mean
denoised PSNR next to the noisy baseline.  Writes ``model.linn`` and
``metrics.jsonl`` to ``--out``.

    python3 scripts/desk_scale.py --data /tmp/desk --out runs/desk25 --sigma 25
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent))

from dninn import TrainConfig, load_images, save_checkpoint, train  # noqa: E402
from dninn.train import mean_psnr, split_validation  # noqa: E402


def desk_config(sigma: float = 25.0, seed: int = 0, **changes) -> TrainConfig:
    base = TrainConfig(sigma=sigma, num_patches=2000, epochs=5, seed=seed, val_holdout=5,
                       memory_efficient=False)
    return base.replace(**changes)


def run(data: str, out: str, config: TrainConfig) -> dict:
    from make_desk_data import write_desk_data

    if not Path(data).exists():
        write_desk_data(data)
    images = load_images(data)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    model, _ = train(config, images, metrics_path=out_dir / "metrics.jsonl", dump_dir=out_dir)
    save_checkpoint(model, out_dir / "model.linn")
    _, val = split_validation(images, config.val_holdout)
    den, noisy = mean_psnr(model, val, config.sigma, np.random.default_rng(1234))
    summary = {"sigma": config.sigma, "denoised_psnr": den, "noisy_psnr": noisy,
               "gain_db": den - noisy, "seconds": round(time.perf_counter() - t0, 1)}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", default="desk_data")
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--sigma", type=float, default=25.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--patches", type=int, default=2000)
    ap.add_argument("--epochs", type=int, default=5)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = desk_config(args.sigma, args.seed, num_patches=args.patches, epochs=args.epochs)
    print(json.dumps(run(args.data, args.out, cfg), indent=2))


if __name__ == "__main__":
    main()
