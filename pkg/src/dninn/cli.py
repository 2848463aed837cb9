"""Command-line interface: ``dninn {train,denoise,eval,adapt,inspect,gradcheck}``.

Every subcommand writes only under ``--out``.  Failures print a single
``error: <kind>: <message>`` line on stderr and exit non-zero (2 for usage
errors, 1 for everything else).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import add_noise, list_images, load_images, read_image, write_image
from .denoiser import UnsupportedHeadError, adapt_thresholds
from .gradcheck import model_gradcheck
from .model import HParams, LinnModel, denoise_image, transform
from .train import _DTYPES, _single_thread, load_config, psnr, train
from .wavelet import DETAIL_ORDER

log = logging.getLogger("dninn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one line instead of usage + message
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--out", required=out_required, help="output directory (all files go here)")
    p.add_argument("--seed", type=int, default=None, help="seed for noise synthesis / training")
    p.add_argument("--precision", choices=sorted(_DTYPES), default=None)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                   help="single-threaded BLAS and no wall-clock values in outputs")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dninn", description="Lifting-inspired invertible denoising network.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model on a directory of clean images")
    p.add_argument("--data", required=True, help="directory of clean training images")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--sigma", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--num-patches", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--head", choices=("st", "lista"))
    p.add_argument("--scales", type=int, choices=(1, 2))
    p.add_argument("--val-holdout", type=int)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--memory-efficient", action=argparse.BooleanOptionalAction, default=None)
    _common(p)

    p = sub.add_parser("denoise", help="denoise images with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, nargs="+", help="image files or directories")
    p.add_argument("--sigma", type=float,
                   help="treat inputs as clean and synthesize noise of this level first")
    p.add_argument("--clean", help="ground-truth directory (same file names) for noisy inputs")
    _common(p)

    p = sub.add_parser("eval", help="mean PSNR table over a test directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-dir", required=True)
    p.add_argument("--sigmas", default="15,25,50", help="comma-separated noise levels")
    p.add_argument("--adapt", action="store_true",
                   help="rescale ST thresholds to each test noise level")
    _common(p)

    p = sub.add_parser("adapt", help="rescale soft-thresholds to a new noise level")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sigma-t", type=float, required=True)
    _common(p)

    p = sub.add_parser("inspect", help="dump detail channels before/after denoising")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="noisy input image")
    p.add_argument("--coarse", action="store_true", help="also dump the coarse channel")
    _common(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model gradient")
    p.add_argument("--head", choices=("st", "lista", "both"), default="both")
    p.add_argument("--scales", type=int, choices=(1, 2), default=1)
    p.add_argument("--pairs", type=int, default=2)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--width", type=int, default=4)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--samples", type=int, default=6, help="coordinates probed per tensor")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)  # test hook: breaks one gradient
    _common(p, out_required=False)
    return ap


# --- helpers ----------------------------------------------------------------------


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(args, expect_head=None) -> LinnModel:
    model = ckpt.load_checkpoint(args.checkpoint, expect_head)
    if args.precision:
        model = model.astype(_DTYPES[args.precision])
    return model


def _gather(paths) -> list[Path]:
    files = []
    for p in paths:
        files.extend(list_images(p))
    return files


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- subcommands ------------------------------------------------------------------


def cmd_train(args) -> int:
    overrides = dict(
        sigma=args.sigma, epochs=args.epochs, num_patches=args.num_patches, batch_size=args.batch_size,
        patch_size=args.patch_size, lr=args.lr, head=args.head, scales=args.scales, seed=args.seed,
        precision=args.precision, val_holdout=args.val_holdout, augment=args.augment,
        memory_efficient=args.memory_efficient, deterministic=args.deterministic,
    )
    config = load_config(args.config, **overrides)
    images = load_images(args.data, config.dtype)
    out = _out_dir(args)
    model, rows = train(config, images, metrics_path=out / "metrics.jsonl", dump_dir=out)
    ckpt.save_checkpoint(model, out / "model.linn")
    final = rows[-1] if rows else {}
    print(f"checkpoint={out / 'model.linn'} steps={model.meta['trained_steps']} "
          f"final_val_psnr={final.get('val_psnr')}")
    return 0


def cmd_denoise(args) -> int:
    if args.sigma is not None and args.clean:
        raise UsageError("--sigma and --clean are mutually exclusive")
    model = _load_model(args)
    files = _gather(args.images)
    out = _out_dir(args)
    rng = np.random.default_rng(_seed(args))
    rows = []
    for f in files:
        img = read_image(f, model.dtype)
        truth = None
        if args.sigma is not None:
            truth, img = img, add_noise(img, args.sigma, rng)
            write_image(out / f"{f.stem}_noisy{f.suffix}", img)
        elif args.clean:
            truth = read_image(Path(args.clean) / f.name, model.dtype)
        xhat = denoise_image(model, img)
        write_image(out / f"{f.stem}_denoised{f.suffix}", xhat)
        row = {"image": f.name}
        if truth is not None:
            row.update(psnr_noisy=psnr(img, truth, clip=False), psnr_denoised=psnr(xhat, truth))
            print(f"image={f.name} psnr_noisy={row['psnr_noisy']:.2f} psnr_denoised={row['psnr_denoised']:.2f}")
        rows.append(row)
    summary = {"images": rows, "count": len(rows)}
    line = f"count={len(rows)}"
    if rows and "psnr_denoised" in rows[0]:
        summary["mean_psnr_noisy"] = float(np.mean([r["psnr_noisy"] for r in rows]))
        summary["mean_psnr_denoised"] = float(np.mean([r["psnr_denoised"] for r in rows]))
        line += (f" mean_psnr_noisy={summary['mean_psnr_noisy']:.2f}"
                 f" mean_psnr_denoised={summary['mean_psnr_denoised']:.2f}")
    _write_json(out / "denoise.json", summary)
    print(line)
    return 0


def _parse_sigmas(text: str) -> list[float]:
    try:
        sigmas = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--sigmas: not a comma-separated list of numbers: {text!r}") from None
    if not sigmas or any(s < 0 for s in sigmas):
        raise UsageError("--sigmas needs at least one non-negative value")
    return sigmas


def eval_table(model: LinnModel, clean: list[np.ndarray], sigmas, seed: int, adapt: bool = False) -> dict:
    """Mean noisy/denoised PSNR per noise level; noise is reseeded per level."""
    table = {}
    for sigma in sigmas:
        m = adapt_thresholds(model, sigma) if adapt else model
        rng = np.random.default_rng(seed)
        noisy, den = [], []
        for x in clean:
            y = add_noise(x, sigma, rng)
            noisy.append(psnr(y, x, clip=False))
            den.append(psnr(denoise_image(m, y), x))
        table[sigma] = {"noisy": float(np.mean(noisy)), "denoised": float(np.mean(den))}
    return table


def format_table(table: dict) -> str:
    sig = list(table)
    head = "sigma     " + "".join(f"{s:>9g}" for s in sig)
    rows = [head]
    for key in ("noisy", "denoised"):
        rows.append(f"{key:<10s}" + "".join(f"{table[s][key]:9.2f}" for s in sig))
    return "\n".join(rows)


def cmd_eval(args) -> int:
    sigmas = _parse_sigmas(args.sigmas)
    model = _load_model(args)
    clean = load_images(args.test_dir, model.dtype)
    out = _out_dir(args)
    table = eval_table(model, clean, sigmas, _seed(args), args.adapt)
    text = format_table(table)
    (out / "eval.txt").write_text(text + "\n")
    _write_json(out / "eval.json", {"images": len(clean), "sigma_n": model.sigma_n,
                                    "adapt": args.adapt, "table": {f"{k:g}": v for k, v in table.items()}})
    print(text)
    return 0


def cmd_adapt(args) -> int:
    model = _load_model(args)
    adapted = adapt_thresholds(model, args.sigma_t)
    out = _out_dir(args)
    path = out / "model.linn"
    ckpt.save_checkpoint(adapted, path)
    factor = args.sigma_t**2 / model.sigma_n**2
    print(f"checkpoint={path} sigma_n={model.sigma_n:g} sigma_t={args.sigma_t:g} factor={factor:.6g}")
    return 0


def _normalize(band: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo, hi = float(band.min()), float(band.max())
    scaled = (band - lo) / (hi - lo) if hi > lo else np.zeros_like(band)
    return scaled, lo, hi


def cmd_inspect(args) -> int:
    model = _load_model(args)
    y = read_image(args.image, model.dtype)
    out = _out_dir(args)
    before, after, zc = transform(model, y)
    xhat = denoise_image(model, y)
    write_image(out / "noisy.png", y)
    write_image(out / "denoised.png", xhat)
    meta = {"image": str(Path(args.image).name), "normalization": "per-channel min-max to 8 bit",
            "channels": {}}
    dumps = []
    for tag, bands in (("before", before), ("after", after)):
        for c, name in enumerate(DETAIL_ORDER):
            dumps.append((f"detail_{tag}_{name}", bands[0, c]))
    if args.coarse:
        dumps.append(("coarse", zc[0, 0]))
    for name, band in dumps:
        scaled, lo, hi = _normalize(band.astype(np.float64))
        write_image(out / f"{name}.png", scaled)
        meta["channels"][name] = {"min": lo, "max": hi, "variance": float(np.var(band, dtype=np.float64))}
    _write_json(out / "inspect.json", meta)
    for name in meta["channels"]:
        print(f"{name} variance={meta['channels'][name]['variance']:.6g}")
    return 0


def cmd_gradcheck(args) -> int:
    heads = ("st", "lista") if args.head == "both" else (args.head,)
    ok = True
    lines = []
    for head in heads:
        hp = HParams(pairs=args.pairs, depth=args.depth, width=args.width, scales=args.scales, head=head)
        report, used = model_gradcheck(hp, seed=_seed(args), size=args.size, samples=args.samples,
                                       corrupt=args.corrupt)
        passed = report.ok(args.tol)
        ok &= passed
        lines.append(f"== head={head} scales={args.scales} seed={used} size={args.size}")
        lines.extend(report.lines())
        lines.append(f"result={'PASS' if passed else 'FAIL'} worst_rel_err={report.worst:.3e} tol={args.tol:g}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        (_out_dir(args) / "gradcheck.txt").write_text(text + "\n")
    if not ok:
        raise GradCheckFailed(f"worst relative error exceeds {args.tol:g} or kink violation")
    return 0


class GradCheckFailed(RuntimeError):
    pass


COMMANDS = {"train": cmd_train, "denoise": cmd_denoise, "eval": cmd_eval,
            "adapt": cmd_adapt, "inspect": cmd_inspect, "gradcheck": cmd_gradcheck}


def _fail(kind: str, message: str, code: int) -> int:
    msg = " ".join(str(message).split())  # force a single line
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _single_thread(args.deterministic):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except UnsupportedHeadError as exc:
        return _fail("unsupported", exc, 1)
    except ckpt.CheckpointError as exc:
        return _fail("checkpoint", exc, 1)
    except GradCheckFailed as exc:
        return _fail("gradcheck", exc, 1)
    except (OSError, ValueError) as exc:
        return _fail("input", exc, 1)
    except Exception as exc:  # noqa: BLE001 - last-resort single-line report
        return _fail(type(exc).__name__, exc, 1)


if __name__ == "__main__":
    sys.exit(main())
