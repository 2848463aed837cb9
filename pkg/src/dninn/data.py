"""Image loading, patch sampling and noise synthesis.

Images live in [0, 1] as float arrays of shape (1, 1, H, W).  Noise levels
are given on the 0-255 scale and divided by 255 internally.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".pgm", ".png")


def read_image(path: str | Path, dtype=np.float32) -> np.ndarray:
    path = Path(path)
    dtype = np.dtype(dtype).type
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "I;16", "I", "F"):
                log.warning("%s: mode %s is not grayscale, converting by luminance", path, im.mode)
                im = im.convert("L")
            arr = np.asarray(im)
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if arr.dtype == np.uint8:
        scaled = arr.astype(dtype) / dtype(255)
    elif arr.dtype.kind in "ui":
        scaled = arr.astype(dtype) / dtype(np.iinfo(arr.dtype).max if arr.max() > 255 else 255)
    else:
        scaled = arr.astype(dtype)
    return scaled[None, None]


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Write a [0,1] image (any leading singleton dims) as 8-bit PGM/PNG."""
    arr = np.squeeze(np.asarray(image))
    if arr.ndim != 2:
        raise ValueError(f"write_image expects a single 2D image, got {image.shape}")
    byte = np.round(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(byte, mode="L").save(path)


def list_images(path: str | Path) -> list[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise FileNotFoundError(f"no such image file or directory: {path}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no .pgm/.png images in {path}")
    return files


def load_images(path: str | Path, dtype=np.float32) -> list[np.ndarray]:
    """Load one image or every image in a directory, in filename order."""
    return [read_image(p, dtype) for p in list_images(path)]


def _augment(patch: np.ndarray, code: int) -> np.ndarray:
    out = np.rot90(patch, code % 4, axes=(-2, -1))
    if code >= 4:
        out = out[..., ::-1]
    return out


def sample_patches(
    images: list[np.ndarray],
    patch_size: int,
    num_patches: int,
    rng: np.random.Generator,
    augment: bool = False,
) -> np.ndarray:
    """Uniform random crops; the source image is drawn uniformly for each patch.

    Returns an array of shape (num_patches, 1, patch_size, patch_size).
    """
    if not images:
        raise ValueError("sample_patches: no images")
    for i, im in enumerate(images):
        if min(im.shape[-2:]) < patch_size:
            raise ValueError(
                f"sample_patches: patch size {patch_size} exceeds image {i} of size {im.shape[-2:]}"
            )
    which = rng.integers(0, len(images), size=num_patches)
    out = np.empty((num_patches, 1, patch_size, patch_size), dtype=images[0].dtype)
    for k, i in enumerate(which):
        im = images[i][0, 0]
        top = rng.integers(0, im.shape[0] - patch_size + 1)
        left = rng.integers(0, im.shape[1] - patch_size + 1)
        patch = im[top : top + patch_size, left : left + patch_size]
        if augment:
            patch = _augment(patch, int(rng.integers(0, 8)))
        out[k, 0] = patch
    return out


def add_noise(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """``x`` plus white Gaussian noise of std ``sigma / 255``; no clipping."""
    if sigma < 0:
        raise ValueError(f"noise level must be non-negative, got {sigma}")
    if sigma == 0:
        return x.copy()
    noise = rng.standard_normal(x.shape) * (sigma / 255.0)
    return (x + noise).astype(x.dtype, copy=False)
