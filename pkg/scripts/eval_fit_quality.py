"""Retrieval + fit IoU on rounded synthetic 2D targets, SDF queries vs mask queries.

Usage: python3 scripts/eval_fit_quality.py [--n 200] [--out fit_quality.json]
Models come from the test artifact cache (trained on first use).
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

import artifacts  # noqa: E402
from test_acceptance import synthetic_2d_targets  # noqa: E402

from prismcad.retrieval import EmbeddingIndex, crop_square, fit_parameters, nearest  # noqa: E402
from prismcad.sketch import build_corpus  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--out", default="fit_quality.json")
    args = ap.parse_args()
    corpus = build_corpus()
    targets = synthetic_2d_targets(args.n)
    rows, cache = [], {}
    for mode in ("sdf", "mask"):
        model, _, _ = artifacts.model2d(mode)
        index = EmbeddingIndex.build(model, corpus, mode)
        t0 = time.time()
        for k, target in enumerate(targets):
            sdf, tf = crop_square(target)
            var, dist = nearest(index, model, sdf if mode == "sdf" else sdf.binary())
            if (k, var.id) not in cache:
                cache[(k, var.id)] = fit_parameters(var, target, tf)
            fit = cache[(k, var.id)]
            rows.append({"mode": mode, "target": k, "template": fit.template, "variation": var.id,
                         "distance": dist, "iou": fit.iou})
        ious = [r["iou"] for r in rows if r["mode"] == mode]
        print(f"{mode}: mean IoU {np.mean(ious):.4f} +- {np.std(ious):.4f}, median {np.median(ious):.4f}, "
              f"{time.time() - t0:.0f} s")
    Path(args.out).write_text(json.dumps(rows, indent=1))


if __name__ == "__main__":
    main()
