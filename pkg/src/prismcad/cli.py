"""Command-line front end. Every command prints JSON on stdout (or a short
text summary with --pretty); failures print an error JSON on stderr and
exit nonzero."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np


class CliError(Exception):
    pass


class JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error({"error": "usage", "message": message, "prog": self.prog})
        sys.exit(2)


def _emit_error(obj):
    sys.stderr.write(json.dumps(obj) + "\n")


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))


def _summary(obj, indent=""):
    lines = []
    for k, v in obj.items():
        if isinstance(v, dict):
            lines.append(f"{indent}{k}:")
            lines.extend(_summary(v, indent + "  "))
        elif isinstance(v, list) and v and isinstance(v[0], dict):
            lines.append(f"{indent}{k}: {len(v)} entries")
        elif isinstance(v, float):
            lines.append(f"{indent}{k}: {v:.4f}")
        else:
            lines.append(f"{indent}{k}: {v}")
    return lines


def _load_mask2d(path):
    from .sdf import load_vsdf_array

    values = load_vsdf_array(path)
    if values.ndim != 2:
        raise CliError(f"{path}: expected a 2D grid")
    # 0/1 masks mark the inside with 1; signed fields mark it with negative values
    return values > 0.5 if values.min() >= 0 else values < 0


def _load_corpus(path):
    from .sketch import SketchVariation

    manifest = json.loads((Path(path) / "manifest.json").read_text())
    return [SketchVariation(d["template"], tuple(d["params"]), d["id"]) for d in manifest["variations"]]


# --------------------------------------------------------------------------
# commands


def cmd_gen_corpus(args):
    from .sketch import DEFAULT_COUNTS, TEMPLATES, build_corpus, corpus_manifest, loops_to_svg, paper_counts

    names = args.templates.split(",") if args.templates else list(TEMPLATES)
    unknown = [n for n in names if n not in TEMPLATES]
    if unknown:
        raise CliError(f"unknown templates {unknown}")
    if args.paper_counts:
        counts = paper_counts(names)
    elif args.max_n is not None:
        counts = {n: args.max_n for n in names}
    else:
        counts = {n: DEFAULT_COUNTS.get(n, 30) for n in names}
    corpus = build_corpus(counts, names)
    out = Path(args.out)
    (out / "svg").mkdir(parents=True, exist_ok=True)
    text = corpus_manifest(corpus)
    (out / "manifest.json").write_text(text)
    for v in corpus:
        (out / "svg" / f"{v.id:05d}_{v.template}.svg").write_text(loops_to_svg(v.loops))
    per = {n: sum(v.template == n for v in corpus) for n in names}
    return {"count": len(corpus), "per_template": per, "manifest": str(out / "manifest.json"),
            "digest": hashlib.sha256(text.encode()).hexdigest()}


def cmd_gen_data(args):
    from .sketch import build_corpus
    from .trainkit import gen_dataset

    ds = gen_dataset(args.seed, args.n, build_corpus(), rounded=not args.no_round)
    ds.save(args.out)
    return {"bases": args.n, "inputs": len(ds), "digest": ds.digest(), "out": str(args.out)}


def cmd_train_3d(args):
    from .config import Train3DConfig, load_config
    from .sketch import build_corpus
    from .trainkit import Dataset, gen_dataset, train_3d

    cfg = load_config(args.config, Train3DConfig)
    if cfg.data_dir and (Path(cfg.data_dir) / "manifest.json").exists():
        ds = Dataset.load(cfg.data_dir)
    else:
        d = cfg.data
        ds = gen_dataset(d.seed, d.n_base, build_corpus(d.corpus_counts or None), rounded=d.rounded,
                         keep_sdfs=bool(cfg.data_dir))
        if cfg.data_dir:
            ds.save(cfg.data_dir)
    res = train_3d(cfg, ds, resume=args.resume)
    last = res.curves[-1] if res.curves else {}
    return {"checkpoint": res.checkpoint, "epochs": res.epochs_run, "seconds": res.seconds, "last": last}


def cmd_train_2d(args):
    from .config import Train2DConfig, load_config
    from .trainkit import train_2d

    cfg = load_config(args.config, Train2DConfig)
    res, ious = train_2d(cfg)
    return {"checkpoint": res.checkpoint, "epochs": res.epochs_run, "seconds": res.seconds,
            "heldout_iou_median": float(np.median(ious)) if len(ious) else None}


def cmd_build_index(args):
    from .retrieval import EmbeddingIndex
    from .trainkit import load_model2d

    model, info = load_model2d(args.ckpt)
    mode = args.mode or info.get("query_mode", "sdf")
    index = EmbeddingIndex.build(model, _load_corpus(args.corpus), mode)
    index.save(args.out)
    return {"count": len(index), "mode": mode, "checksum": index.checksum, "out": str(args.out)}


def cmd_reconstruct(args):
    from .pipeline import CadProgram, ModelDecoder, OracleDecoder, program_sdf, reconstruct
    from .recipes import builtin_recipes, load_recipes
    from .retrieval import EmbeddingIndex
    from .sdf import load_vsdf, marching_cubes
    from .trainkit import load_model2d, load_net3d

    grid = load_vsdf(args.input)
    if grid.rank != 3:
        raise CliError(f"{args.input}: expected a 3D grid")
    if args.bypass:
        program = CadProgram.loads(Path(args.bypass).read_text())
        decoder = OracleDecoder(program)
        recipes = load_recipes(args.recipes) if args.recipes else builtin_recipes()
    else:
        if not args.ckpt:
            raise CliError("--ckpt is required unless --bypass is given")
        net, recipes = load_net3d(args.ckpt)
        decoder = ModelDecoder(net)
    model2d, _ = load_model2d(args.ckpt2d)
    index = EmbeddingIndex.load(args.index)
    target = None
    if args.target:
        target = load_vsdf(args.target).values < 0
    rec = reconstruct(grid, recipes, decoder, index, model2d, target=target)
    _write_json(args.out, rec.program.to_json())
    out = {"program": str(args.out), "validity": rec.report.to_json(), "metrics": rec.metrics}
    if args.mesh:
        mesh = marching_cubes(program_sdf(rec.program.steps, grid.n))
        mesh.save_obj(args.mesh)
        out["mesh"] = str(args.mesh)
    return out


def cmd_fit_profile(args):
    from .pipeline import fit_profile_image
    from .retrieval import EmbeddingIndex
    from .sketch import loops_to_json
    from .trainkit import load_model2d

    mask = _load_mask2d(args.target)
    model2d, _ = load_model2d(args.ckpt2d)
    index = EmbeddingIndex.load(args.index)
    logits = np.where(mask, -1.0, 1.0)
    loops, reports = fit_profile_image(logits, index, model2d, args.max_iter)
    out = {"loops": loops_to_json(loops), "fits": reports}
    if args.out:
        _write_json(args.out, out)
    return out


def cmd_interp(args):
    from .retrieval import EmbeddingIndex, interpolate
    from .sketch import loops_to_svg
    from .trainkit import load_model2d

    model2d, _ = load_model2d(args.ckpt2d)
    index = EmbeddingIndex.load(args.index)
    pos = {v.id: i for i, v in enumerate(index.variations)}
    for vid in (args.start, args.end):
        if vid not in pos:
            raise CliError(f"variation id {vid} not in index")
    if args.steps < 2:
        raise CliError("--steps must be at least 2")
    ts = np.linspace(0.0, 1.0, args.steps)
    fits = interpolate(index.embeddings[pos[args.start]], index.embeddings[pos[args.end]], ts, index, model2d,
                       args.max_iter)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = []
    for k, (t, fit) in enumerate(zip(ts, fits)):
        entry = {"t": float(t), "fit": fit.to_json() if fit is not None else None}
        if fit is not None:
            svg = out_dir / f"frame_{k:03d}.svg"
            svg.write_text(loops_to_svg(fit.loops()))
            entry["svg"] = str(svg)
        frames.append(entry)
    _write_json(out_dir / "interp.json", {"start": args.start, "end": args.end, "frames": frames})
    return {"frames": frames, "out": str(out_dir)}


def cmd_metrics(args):
    from .pipeline import CadProgram, program_metrics
    from .sdf import load_vsdf

    program = CadProgram.loads(Path(args.program).read_text())
    grid = load_vsdf(args.target)
    if grid.rank != 3:
        raise CliError(f"{args.target}: expected a 3D grid")
    return program_metrics(program, grid, grid.values < 0, rot24=args.rot24)


def cmd_round(args):
    from .sdf import load_vsdf, round_offset, save_vsdf

    grid = load_vsdf(args.input)
    if args.radius_vox < 0:
        raise CliError("--radius-vox must be non-negative")
    out = round_offset(grid, args.radius_vox * grid.spacing)
    dest = args.out or str(Path(args.input).with_suffix("")) + f"_r{args.radius_vox:g}.vsdf"
    save_vsdf(dest, out)
    return {"out": dest, "radius_vox": args.radius_vox, "radius_world": args.radius_vox * grid.spacing,
            "inside_before": int((grid.values < 0).sum()), "inside_after": int((out.values < 0).sum())}


def cmd_oracle_check(args):
    from .pipeline import cross_oracle_check

    result = cross_oracle_check(args.seed, args.n, args.res)
    if result["agree"] != result["n"]:
        raise CliError(result["summary"])
    return result


# --------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads for numeric kernels (default: all cores; 1 is bit-reproducible)")
    common.add_argument("--pretty", action="store_true", help="print a human-readable summary instead of JSON")

    p = JsonArgumentParser(prog="prismcad", description="Prismatic CAD reconstruction from rounded SDF voxels.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=JsonArgumentParser)

    s = sub.add_parser("gen-corpus", parents=[common], help="flood sketch templates into a variation corpus")
    s.add_argument("--templates", default="", help="comma-separated template names (default: all)")
    s.add_argument("--max-n", type=int, default=None, help="variations per template")
    s.add_argument("--paper-counts", action="store_true", help="1000 rectangles, 1 circle, 30 of the others")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("gen-data", parents=[common], help="generate a synthetic training dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, required=True, help="number of base programs")
    s.add_argument("--no-round", action="store_true", help="skip the rounded copies")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-2d", parents=[common], help="train the 2D profile autoencoder")
    s.add_argument("--config", required=True, help="TOML config file")
    s.set_defaults(func=cmd_train_2d)

    s = sub.add_parser("train-3d", parents=[common], help="train the 3D extrusion network")
    s.add_argument("--config", required=True, help="TOML config file")
    s.add_argument("--resume", default=None, help="training state file to resume from")
    s.set_defaults(func=cmd_train_3d)

    s = sub.add_parser("build-index", parents=[common], help="embed a corpus into a retrieval index")
    s.add_argument("--corpus", required=True, help="directory written by gen-corpus")
    s.add_argument("--ckpt", required=True, help="2D model checkpoint")
    s.add_argument("--mode", choices=("sdf", "mask"), default=None, help="query image type (default: model's)")
    s.add_argument("--out", required=True, help="index file")
    s.set_defaults(func=cmd_build_index)

    s = sub.add_parser("reconstruct", parents=[common], help="reconstruct a CAD program from a 3D SDF")
    s.add_argument("--input", required=True, help="input .vsdf grid")
    s.add_argument("--ckpt", default=None, help="3D model checkpoint")
    s.add_argument("--ckpt2d", required=True, help="2D model checkpoint")
    s.add_argument("--index", required=True, help="retrieval index file")
    s.add_argument("--out", required=True, help="program JSON path")
    s.add_argument("--mesh", default=None, help="write an OBJ surface of the reconstruction")
    s.add_argument("--target", default=None, help="pre-rounding ground truth .vsdf for IoU")
    s.add_argument("--bypass", default=None, help="program JSON whose hard logits replace the 3D network")
    s.add_argument("--recipes", default=None, help="recipe JSON file (bypass mode)")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("fit-profile", parents=[common], help="retrieve and fit CAD loops to a 2D mask")
    s.add_argument("--target", required=True, help="2D .vsdf mask (1 or negative inside)")
    s.add_argument("--index", required=True, help="retrieval index file")
    s.add_argument("--ckpt2d", required=True, help="2D model checkpoint")
    s.add_argument("--max-iter", type=int, default=200)
    s.add_argument("--out", default=None, help="also write the report here")
    s.set_defaults(func=cmd_fit_profile)

    s = sub.add_parser("interp", parents=[common], help="fit CAD profiles along an embedding interpolation")
    s.add_argument("--start", type=int, required=True, help="start variation id")
    s.add_argument("--end", type=int, required=True, help="end variation id")
    s.add_argument("--steps", type=int, default=5, help="number of blend weights in [0, 1]")
    s.add_argument("--index", required=True, help="retrieval index file")
    s.add_argument("--ckpt2d", required=True, help="2D model checkpoint")
    s.add_argument("--max-iter", type=int, default=200)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_interp)

    s = sub.add_parser("metrics", parents=[common], help="IoU of a program against a target grid")
    s.add_argument("--program", required=True, help="program JSON")
    s.add_argument("--target", required=True, help="target .vsdf (negative inside)")
    s.add_argument("--rot24", action="store_true", help="also report the best IoU over the 24 rotations")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("round", parents=[common], help="round a 3D SDF by an inward-outward offset")
    s.add_argument("--input", required=True, help="input .vsdf")
    s.add_argument("--radius-vox", type=float, required=True, help="rounding radius in voxels")
    s.add_argument("--out", default=None, help="output .vsdf (default: <input>_r<radius>.vsdf)")
    s.set_defaults(func=cmd_round)

    s = sub.add_parser("oracle-check", parents=[common], help="compare compositor and ray-cast voxelization")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=100, help="number of random programs")
    s.add_argument("--res", type=int, default=16, help="grid resolution")
    s.set_defaults(func=cmd_oracle_check)
    return p


def _set_threads(n):
    n = n or os.cpu_count() or 1
    from threadpoolctl import threadpool_limits

    threadpool_limits(n)
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _set_threads(args.threads)
        result = args.func(args)
    except Exception as err:  # report every failure as JSON
        payload = {"error": type(err).__name__, "message": str(err), "command": args.command}
        if hasattr(err, "to_json"):
            payload["details"] = err.to_json()
        _emit_error(payload)
        return 1
    if args.pretty:
        print("\n".join(_summary(result)))
    else:
        print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
