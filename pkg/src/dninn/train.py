"""End-to-end training, losses and metrics."""

from __future__ import annotations

import contextlib
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import add_noise, sample_patches
from .model import HParams, LinnModel, denoise_image, init_model, model_backward, model_forward
from .tensor import AdamState, adam_step

log = logging.getLogger(__name__)

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrainConfig:
    sigma: float = 25.0
    patch_size: int = 40
    num_patches: int = 90_000
    batch_size: int = 32
    epochs: int = 30
    lr: float = 1e-3
    lr_decay_epoch: int = 20    # epochs are counted from 1
    lr_decayed: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    precision: str = "float32"
    deterministic: bool = True
    memory_efficient: bool = True
    augment: bool = False
    val_holdout: int = 5
    scales: int = 1
    head: str = "st"
    pairs: int = 4
    depth: int = 8
    width: int = 16
    kernel_size: int = 3
    lista_layers: int = 3
    init_gain: float = 1.0      # interior conv std = sqrt(init_gain / fan_in); see README

    def __post_init__(self):
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}")
        for name in ("sigma", "patch_size", "num_patches", "batch_size", "epochs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or self.lr_decayed < 0:
            raise ValueError("learning rates must be non-negative")
        if self.val_holdout < 0:
            raise ValueError("val_holdout must be non-negative")

    @property
    def dtype(self):
        return _DTYPES[self.precision]

    def hparams(self) -> HParams:
        return HParams(self.pairs, self.depth, self.width, self.kernel_size,
                       self.lista_layers, self.scales, self.head)

    def lr_at(self, epoch: int) -> float:
        return self.lr if epoch < self.lr_decay_epoch else self.lr_decayed

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _coerce(value: str, typ):
    if typ in (bool, "bool"):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ in (int, "int"):
        return int(float(value)) if "e" in value.lower() else int(value)
    if typ in (float, "float"):
        return float(value)
    return value.strip()


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines (``#`` comments) into typed config fields."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(value, types[key])
    return out


def load_config(path: str | Path | None = None, **overrides) -> TrainConfig:
    """Built-in defaults, then the config file, then explicit overrides."""
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


# --- losses and metrics -------------------------------------------------------


def mse_loss(xhat: np.ndarray, x: np.ndarray) -> tuple[float, np.ndarray]:
    """``(1/N) sum_j ||x_j - xhat_j||^2`` over a batch, and its gradient."""
    if xhat.shape != x.shape:
        raise ValueError(f"mse_loss: shapes differ, {xhat.shape} vs {x.shape}")
    n = x.shape[0]
    diff = xhat - x
    loss = float(np.sum(diff.astype(np.float64) ** 2) / n)
    return loss, (2.0 / n) * diff


def psnr_from_mse(mse: float, peak: float = 1.0) -> float:
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def psnr(xhat: np.ndarray, x: np.ndarray, clip: bool = True) -> float:
    """PSNR in dB for [0,1] data; identical images give ``inf``."""
    if xhat.shape != x.shape:
        raise ValueError(f"psnr: shapes differ, {xhat.shape} vs {x.shape}")
    xh = np.clip(xhat, 0.0, 1.0) if clip else xhat
    d = xh.astype(np.float64) - x.astype(np.float64)
    return psnr_from_mse(float(np.mean(d * d)))


def mean_psnr(model: LinnModel, clean: list[np.ndarray], sigma: float, rng: np.random.Generator):
    """Average (denoised, noisy) PSNR over images with freshly drawn noise.

    Denoised outputs are clipped to [0,1] first; noisy inputs are not, so the
    noisy figure matches the analytic 20*log10(255/sigma).
    """
    den, noisy = [], []
    for x in clean:
        y = add_noise(x.astype(model.dtype), sigma, rng)
        den.append(psnr(denoise_image(model, y), x))
        noisy.append(psnr(y, x, clip=False))
    return float(np.mean(den)), float(np.mean(noisy))


# --- training loop --------------------------------------------------------------


class TrainingDivergedError(RuntimeError):
    pass


@contextlib.contextmanager
def _single_thread(enabled: bool):
    if not enabled:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=1):
        yield


def split_validation(images: list[np.ndarray], holdout: int):
    if holdout >= len(images):
        raise ValueError(f"need more than {holdout} images to hold out {holdout} for validation")
    if holdout == 0:
        return list(images), []
    return list(images[:-holdout]), list(images[-holdout:])


def train(
    config: TrainConfig,
    images: list[np.ndarray],
    metrics_path: str | Path | None = None,
    dump_dir: str | Path | None = None,
    model: LinnModel | None = None,
) -> tuple[LinnModel, list[dict]]:
    """Train a model end to end on patches cut from ``images``.

    The last ``config.val_holdout`` images are kept out of training and used
    for a per-epoch validation PSNR.  Sampling, noise, initialisation and
    validation noise each get their own RNG stream derived from ``seed``.
    """
    dtype = config.dtype
    train_imgs, val_imgs = split_validation([im.astype(dtype) for im in images], config.val_holdout)
    if min(min(im.shape[-2:]) for im in train_imgs) < config.patch_size:
        raise ValueError("patch_size exceeds the smallest training image")
    init_ss, sample_ss, noise_ss, val_ss = np.random.SeedSequence(config.seed).spawn(4)
    sample_rng = np.random.default_rng(sample_ss)
    noise_rng = np.random.default_rng(noise_ss)

    if model is None:
        model = init_model(config.hparams(), config.sigma, np.random.default_rng(init_ss), dtype,
                           init_gain=config.init_gain)
    params = model.parameters()
    state = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2)

    patches = sample_patches(train_imgs, config.patch_size, config.num_patches, sample_rng, config.augment)
    steps_per_epoch = max(1, math.ceil(config.num_patches / config.batch_size))
    log_rows: list[dict] = []
    sink = open(metrics_path, "w") if metrics_path else None
    t0 = time.perf_counter()

    def emit(row):
        if config.deterministic:
            row["wall_time"] = None
        else:
            row["wall_time"] = round(time.perf_counter() - t0, 3)
        log_rows.append(row)
        if sink:
            sink.write(json.dumps(row) + "\n")
            sink.flush()

    try:
        with _single_thread(config.deterministic):
            step = 0
            for epoch in range(1, config.epochs + 1):
                state.lr = config.lr_at(epoch)
                order = sample_rng.permutation(len(patches))
                losses = []
                for b in range(steps_per_epoch):
                    idx = order[b * config.batch_size : (b + 1) * config.batch_size]
                    if len(idx) == 0:
                        continue
                    x = patches[idx]
                    y = add_noise(x, config.sigma, noise_rng)
                    xhat, ctxs = model_forward(model, y, config.memory_efficient)
                    loss, g = mse_loss(xhat, x)
                    if not np.isfinite(loss):
                        _dump_batch(dump_dir, x, y, step)
                        raise TrainingDivergedError(
                            f"non-finite loss at epoch {epoch} step {step}"
                            + (f"; batch dumped to {dump_dir}" if dump_dir else "")
                        )
                    grads, _ = model_backward(model, ctxs, g)
                    adam_step(params, grads, state)
                    step += 1
                    losses.append(loss)
                    emit({"epoch": epoch, "step": step, "loss": loss, "lr": state.lr, "val_psnr": None})
                val = None
                if val_imgs:
                    val, _ = mean_psnr(model, val_imgs, config.sigma, np.random.default_rng(val_ss))
                emit({"epoch": epoch, "step": step, "loss": float(np.mean(losses)),
                      "lr": state.lr, "val_psnr": val})
                log.info("epoch %d loss %.5f val_psnr %s", epoch, np.mean(losses), val)
    finally:
        if sink:
            sink.close()
    model.meta.update({"trained_steps": step, "seed": config.seed})
    return model, log_rows


def _dump_batch(dump_dir, x, y, step):
    if dump_dir is None:
        return
    Path(dump_dir).mkdir(parents=True, exist_ok=True)
    np.savez(Path(dump_dir) / f"diverged_step{step}.npz", clean=x, noisy=y)
