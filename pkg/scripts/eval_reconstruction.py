"""End-to-end reconstruction of held-out rounded synthetic inputs with the toy models.

Usage: python3 scripts/eval_reconstruction.py [--n 50] [--out recon.json]
Writes one row per input (recipe chosen, IoU vs pre-rounding truth, validity).
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

import artifacts  # noqa: E402

from prismcad import pipeline as P  # noqa: E402
from prismcad.recipes import recipe_map  # noqa: E402
from prismcad.retrieval import EmbeddingIndex  # noqa: E402
from prismcad.sketch import build_corpus  # noqa: E402
from prismcad.trainkit import gen_base  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=50)
    ap.add_argument("--out", default="recon.json")
    args = ap.parse_args()
    net, recipes, _ = artifacts.model3d()
    model2d, _, _ = artifacts.model2d("sdf")
    held = artifacts.dataset(**artifacts.HELDOUT3D)
    corpus = build_corpus()
    index = EmbeddingIndex.build(model2d, corpus, "sdf")
    decoder, rmap = P.ModelDecoder(net), recipe_map(recipes)
    rows = []
    for b, (rid, steps) in enumerate(list(zip(held.recipes, held.programs))[:args.n]):
        t0 = time.time()
        _, grids, radii = gen_base(held.seed, b, rmap[rid], corpus)
        rounded = [(g, r) for g, r in zip(grids, radii) if r > 0]
        grid, radius = rounded[b % len(rounded)]
        row = {"base": b, "recipe": rid, "radius_vox": radius}
        try:
            rec = P.reconstruct(grid, recipes, decoder, index, model2d, target=~held.target(b))
            row.update(chosen=rec.metrics["recipe"], iou=rec.metrics["iou"], valid=rec.report.valid)
        except P.ReconstructionError as err:
            row.update(chosen=None, iou=0.0, valid=False, error=err.to_json())
        row["seconds"] = time.time() - t0
        rows.append(row)
        print(json.dumps(row), flush=True)
    ious = [r["iou"] for r in rows]
    print(f"median IoU {np.median(ious):.3f}, valid ratio {np.mean([r['valid'] for r in rows]):.2f}, "
          f"recipe match {np.mean([r['chosen'] == r['recipe'] for r in rows]):.2f}")
    Path(args.out).write_text(json.dumps(rows, indent=1))


if __name__ == "__main__":
    main()
