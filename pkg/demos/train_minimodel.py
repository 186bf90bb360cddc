"""Train the bundled bilevel prior on the mini training set.

Writes ``data/models/bilevel_mini.json``, its loss trace
``bilevel_mini_loss.csv`` and the exact configuration
``bilevel_mini.ini`` (readable with ``ebmkit.training.read_config``), so the
acceptance suite can replay a prefix of the run and compare bytes.

The model is smaller (12 filters, 63 components, 32-pixel patches) and the
learning rates larger than the full-size defaults, so 1000 steps fit in
well under an hour on one core.

Run from the repository root::

    python3 demos/train_minimodel.py
"""

import sys
import time
from dataclasses import asdict
from pathlib import Path

from ebmkit.foe import save_model
from ebmkit.imageio import load_image_dir
from ebmkit.training import BilevelConfig, train_bilevel

ROOT = Path(__file__).resolve().parents[1]
OUT = ROOT / "data" / "models"

CONFIG = BilevelConfig(
    lower_noise_var=0.01,
    batch_size=4,
    n_steps=1000,
    lr_weights=1e-3,
    lr_betas=5e-3,
    lr_lambda=1e-2,
    apgd_rtol=1e-7,
    patch_size=32,
    seed=0,
    n_filters=12,
    n_components=63,
)


def main(n_steps=None):
    cfg = CONFIG if n_steps is None else BilevelConfig(**{**asdict(CONFIG), "n_steps": int(n_steps)})
    OUT.mkdir(parents=True, exist_ok=True)
    with open(OUT / "bilevel_mini.ini", "w", encoding="utf-8") as fh:
        for key, val in asdict(cfg).items():
            fh.write(f"{key} = {val!r}\n")
    images = load_image_dir(ROOT / "data" / "mini" / "train")
    t0 = time.time()

    def report(step, model, loss):
        if step % 50 == 0:
            print(f"step {step:5d}  loss {loss:.6g}  lambda {model.lam:.4g}  {time.time() - t0:.0f}s", flush=True)

    model = train_bilevel(images, cfg, trace_path=OUT / "bilevel_mini_loss.csv", callback=report)
    save_model(model, OUT / "bilevel_mini.json")
    print(f"wrote {OUT / 'bilevel_mini.json'} (lambda {model.lam:.4g})")


if __name__ == "__main__":
    main(*sys.argv[1:2])
