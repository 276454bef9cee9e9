"""Regenerate the bundled desk image set from scikit-image sample data.

Writes 64x64 grayscale P5 crops: 50 training images and 10 held-out images.
Run from the repository root:  python scripts/make_desk_set.py
"""
from pathlib import Path

import numpy as np
import skimage.data
from skimage.color import rgb2gray

SOURCES = ["camera", "astronaut", "brick", "grass", "gravel", "moon", "coins", "clock",
           "page", "text", "cat", "chelsea", "coffee", "rocket", "immunohistochemistry",
           "hubble_deep_field", "retina", "colorwheel"]
SIZE = 64
N_TRAIN, N_TEST = 50, 10
OUT = Path(__file__).resolve().parents[1] / "src" / "dcqe" / "data" / "desk"


def gray(name):
    im = getattr(skimage.data, name)()
    if im.ndim == 3:
        im = rgb2gray(im[..., :3])
        return np.floor(im * 255 + 0.5).astype(np.uint8)
    return im.astype(np.uint8)


def main():
    rng = np.random.default_rng(20240607)
    pool = {n: gray(n) for n in SOURCES}
    crops = []
    while len(crops) < N_TRAIN + N_TEST:
        name = SOURCES[len(crops) % len(SOURCES)]
        im = pool[name]
        y = rng.integers(0, im.shape[0] - SIZE + 1)
        x = rng.integers(0, im.shape[1] - SIZE + 1)
        crop = im[y:y + SIZE, x:x + SIZE]
        if crop.std() < 12:  # skip near-flat regions
            continue
        crops.append((name, crop))
    for split, items in (("train", crops[:N_TRAIN]), ("test", crops[N_TRAIN:])):
        d = OUT / split
        d.mkdir(parents=True, exist_ok=True)
        for old in d.glob("*.pgm"):
            old.unlink()
        for i, (name, crop) in enumerate(items):
            (d / f"{i:03d}_{name}.pgm").write_bytes(b"P5\n%d %d\n255\n" % (SIZE, SIZE) + crop.tobytes())


if __name__ == "__main__":
    main()
