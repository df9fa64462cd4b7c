"""Train (or load from cache) the toy models used by the acceptance suite.

Usage: python3 scripts/train_toy_models.py
Prints the checkpoint paths; the cache directory is $PRISMCAD_CACHE or .cache.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

import artifacts  # noqa: E402

if __name__ == "__main__":
    for mode in ("sdf", "mask"):
        _, info, cfg = artifacts.model2d(mode)
        print(f"2D {mode}: {cfg.out} (held-out median IoU {info['heldout_iou_median']:.3f})")
    _, _, cfg = artifacts.model3d()
    print(f"3D: {cfg.out}")
