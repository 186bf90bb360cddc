"""Build the bundled 96x96 grayscale mini-sets from scikit-image sample images.

Writes ``data/mini/test/*.pgm`` (eight evaluation crops) and
``data/mini/train/*.pgm`` (eight 128x128 training crops, from different
photographs).  Images are converted to gray, downscaled so the short side is
192 (test) or 256 (train) pixels with anti-aliasing, then center-cropped.

Run from the repository root::

    python3 demos/make_minidata.py
"""

from pathlib import Path

import numpy as np
from skimage import color, data, transform

from ebmkit.imageio import write_pgm

TEST = ["camera", "astronaut", "chelsea", "coffee", "coins", "moon", "rocket", "clock"]
TRAIN = ["brick", "grass", "gravel", "retina", "hubble_deep_field", "immunohistochemistry", "cell", "motorcycle"]


def load(name):
    if name == "motorcycle":
        im = data.stereo_motorcycle()[0]
    else:
        im = getattr(data, name)()
    im = np.asarray(im)
    if im.ndim == 3:
        im = color.rgb2gray(im[..., :3])
    else:
        im = im / 255.0 if im.dtype == np.uint8 else im.astype(float)
    return im


def crop(im, short_side, size):
    scale = short_side / min(im.shape)
    im = transform.rescale(im, scale, anti_aliasing=True)
    h, w = im.shape
    r, c = (h - size) // 2, (w - size) // 2
    return np.clip(im[r:r + size, c:c + size], 0, 1)


def main(root="data/mini"):
    root = Path(root)
    for sub, names, short, size in (("test", TEST, 192, 96), ("train", TRAIN, 256, 128)):
        (root / sub).mkdir(parents=True, exist_ok=True)
        for name in names:
            write_pgm(root / sub / f"{name}.pgm", crop(load(name), short, size))
            print(f"wrote {sub}/{name}.pgm")


if __name__ == "__main__":
    main()
