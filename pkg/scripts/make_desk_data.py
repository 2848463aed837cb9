"""Build the small offline image corpus used for desk-scale experiments.

Twenty-five 180x180 grayscale crops are cut from the sample images bundled
with scikit-image and written as 8-bit PGM files.  The first twenty come from
ten training sources; the last five (the validation hold-out) come from five
other sources, so validation never sees a training photograph.

    python3 scripts/make_desk_data.py OUT_DIR
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

TRAIN_SOURCES = ("moon", "coins", "brick", "grass", "gravel",
                 "cell", "clock", "immunohistochemistry", "retina", "page")
HOLDOUT_SOURCES = ("camera", "astronaut", "coffee", "chelsea", "rocket")
CROP = 180


def _gray(name: str) -> np.ndarray:
    from skimage import data
    from skimage.color import rgb2gray

    img = getattr(data, name)()
    if img.ndim == 3:
        img = np.round(rgb2gray(img[..., :3]) * 255)
    return img.astype(np.uint8)


def desk_crops(seed: int = 0, crop: int = CROP) -> list[np.ndarray]:
    """Return the 25 uint8 crops in file order (training first)."""
    rng = np.random.default_rng(seed)
    sources = list(TRAIN_SOURCES) * 2 + list(HOLDOUT_SOURCES)
    cache: dict[str, np.ndarray] = {}
    crops = []
    for name in sources:
        img = cache.setdefault(name, _gray(name))
        r = rng.integers(0, img.shape[0] - crop + 1)
        c = rng.integers(0, img.shape[1] - crop + 1)
        crops.append(img[r : r + crop, c : c + crop].copy())
    return crops


def write_desk_data(out_dir: str | Path, seed: int = 0) -> list[Path]:
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, arr in enumerate(desk_crops(seed)):
        p = out / f"desk_{i:02d}.pgm"
        Image.fromarray(arr, mode="L").save(p)
        paths.append(p)
    return paths


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for p in write_desk_data(args.out_dir, args.seed):
        print(p)


if __name__ == "__main__":
    main()
