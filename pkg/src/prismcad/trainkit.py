"""Synthetic training data, losses, and the training loops for the 3D and 2D models."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import Train2DConfig, Train3DConfig, config_hash
from .nets import ExtrusionNet, ProfileAutoencoder
from .pipeline import ProgramStep, hard_profile, net_input, program_sdf, step_membership, voxelize_steps
from .recipes import AXIS_ROLES, builtin_recipes, decode_model, recipe_map
from .retrieval import CROP_RES, encoder_input
from .sdf import (SdfGrid, ShapeEliminatedError, cell_centers, load_vsdf, round_offset, rounding_radii_voxels,
                  save_vsdf)
from .sketch import (CROP_MARGIN, SketchVariation, bbox, build_corpus, get_template, rasterize,
                     sdf_from_binary, transform_loops)

MIN_LEN = 8 / 64
LO, HI = 0.04, 0.96
MIN_EFFECT = 20  # voxels a non-base step must change


# --------------------------------------------------------------------------
# random programs


def place_loops(variation, size, center):
    """Variation loops with bounding-box max side ``size`` centred at ``center``."""
    s = size * (1 + 2 * CROP_MARGIN)
    return transform_loops(variation.normalized_loops, s, (center[0] - 0.5 * s, center[1] - 0.5 * s))


def _center(rng, size, around=None, jitter=0.2):
    lo, hi = LO + size / 2, HI - size / 2
    if hi < lo:
        return None
    if around is None:
        return tuple(rng.uniform(lo, hi, size=2))
    c = np.asarray(around) + rng.uniform(-jitter, jitter, size=2)
    return tuple(np.clip(c, lo, hi))


def _free_end(rng, fixed, below):
    """A coordinate at least MIN_LEN from ``fixed`` on the requested side, inside [LO, HI]."""
    if below:
        lo, hi = max(LO, fixed - 0.6), fixed - MIN_LEN
    else:
        lo, hi = fixed + MIN_LEN, min(HI, fixed + 0.6)
    if hi <= lo:
        return None
    return float(rng.uniform(lo, hi))


def _world_extent(step):
    """World [lo, hi] along x, y, z of one step's prism."""
    c0, r0, c1, r1 = bbox(step.loops)
    r, c, w = AXIS_ROLES[step.axis]
    ext = [None, None, None]
    ext[r], ext[c], ext[w] = (r0, r1), (c0, c1), tuple(step.interval)
    return ext


def _draw(rng, recipe, corpus):
    steps = []
    for i, rs in enumerate(recipe.steps):
        var = corpus[int(rng.integers(len(corpus)))]
        if i == 0:
            size = rng.uniform(0.35, 0.8)
            loops = place_loops(var, size, _center(rng, size))
            length = rng.uniform(MIN_LEN, 0.7)
            a = rng.uniform(LO, HI - length)
            steps.append(ProgramStep(rs.axis, rs.boolean, (float(a), float(a + length)), loops))
            continue
        base = steps[0]
        bx0, by0, bx1, by1 = bbox(base.loops)
        if rs.axis == base.axis:
            size = rng.uniform(0.15, 0.75 * max(bx1 - bx0, by1 - by0)) if rs.boolean == "SUBTRACT" \
                else rng.uniform(0.2, 0.8)
            c = _center(rng, size, ((bx0 + bx1) / 2, (by0 + by1) / 2))
        else:
            # orthogonal cut centred inside the base's world extent
            size = rng.uniform(0.15, 0.5)
            ext = _world_extent(base)
            r, col, _ = AXIS_ROLES[rs.axis]
            c = _center(rng, size, (rng.uniform(*ext[col]), rng.uniform(*ext[r])), jitter=0.0)
        if c is None:
            return None
        loops = place_loops(var, size, c)
        start = end = None
        refs = {"START": rs.start_ref, "END": rs.end_ref}
        for which, ref in refs.items():
            if ref.kind != "OWN":
                src = steps[ref.step].interval[0 if ref.which == "START" else 1]
                if which == "START":
                    start = src
                else:
                    end = src
        if start is None and end is None:
            if rs.axis != base.axis:
                w0, w1 = _world_extent(base)[AXIS_ROLES[rs.axis][2]]
                mid = (w0 + w1) / 2
                start = float(rng.uniform(w0 - 0.05, mid - MIN_LEN / 2))
                end = float(rng.uniform(mid + MIN_LEN / 2, w1 + 0.05))
                start, end = max(start, LO), min(end, HI)
            else:
                length = rng.uniform(MIN_LEN, 0.6)
                start = float(rng.uniform(LO, HI - length))
                end = start + length
        elif start is None:
            start = _free_end(rng, end, below=True)
        elif end is None:
            end = _free_end(rng, start, below=False)
        if start is None or end is None or end - start < MIN_LEN:
            return None
        steps.append(ProgramStep(rs.axis, rs.boolean, (start, end), loops))
    return steps


def _acceptable(recipe, steps, res=64):
    acc = step_membership(steps[0], res)
    if acc.sum() < 200:
        return False
    for i in range(1, len(steps)):
        m = step_membership(steps[i], res)
        if steps[i].boolean == "UNION":
            if (m & ~acc).sum() < MIN_EFFECT or (acc & ~m).sum() < MIN_EFFECT:
                return False
            ref = recipe.steps[i].start_ref
            if ref.kind == "SAME_AS":
                # a shared start must not make the step expressible by stacking instead
                pi = hard_profile(steps[i].loops, res) < 0
                pj = hard_profile(steps[ref.step].loops, res) < 0
                if (pi & ~pj).sum() < 10:
                    return False
            acc = acc | m
        elif steps[i].boolean == "SUBTRACT":
            if (m & acc).sum() < MIN_EFFECT or (acc & ~m).sum() < 200:
                return False
            acc = acc & ~m
        else:
            acc = acc & m
    return True


def random_program(rng, recipe, corpus, max_tries=200):
    """Canonical-pose program for ``recipe`` whose every step changes the shape."""
    for _ in range(max_tries):
        steps = _draw(rng, recipe, corpus)
        if steps is not None and _acceptable(recipe, steps):
            return steps
    raise RuntimeError(f"could not draw a program for recipe {recipe.id}")


def sample_recipes(rng, recipes, n):
    p = np.array([r.prior for r in recipes], dtype=float)
    idx = rng.choice(len(recipes), size=n, p=p / p.sum())
    return [recipes[i] for i in idx]


# --------------------------------------------------------------------------
# targets and datasets


def step_targets(step, res=64, profile_res=128):
    """(P-hat, S-hat, E-hat) for one step: 1 outside the profile, below start, above end."""
    P = ~rasterize(step.loops, profile_res)
    c = cell_centers(res)
    a, b = step.interval
    return P, (c <= a), (c >= b)  # strict interval: a center on a plane is outside


@dataclass
class Dataset:
    seed: int
    recipes: list  # recipe id per base program
    programs: list  # list of ProgramStep lists
    inputs: np.ndarray  # int8 (M, 64, 64, 64), net_input * 127
    input_base: np.ndarray  # (M,)
    input_radius: np.ndarray  # (M,) voxels, 0 = unrounded
    targets: np.ndarray  # packed bits (B, 64**3 / 8) of T-hat
    profiles: np.ndarray  # bool (B, 3, 128, 128)
    starts: np.ndarray  # float32 (B, 3, 64)
    ends: np.ndarray  # float32 (B, 3, 64)
    sdfs: list = field(default_factory=list, repr=False)  # full input grids (optional)

    def __len__(self):
        return len(self.inputs)

    def target(self, b):
        return np.unpackbits(self.targets[b]).reshape(64, 64, 64).astype(bool)

    def manifest(self):
        return {"seed": self.seed, "bases": [
            {"recipe": r, "program": [s.to_json() for s in p]} for r, p in zip(self.recipes, self.programs)],
            "inputs": [{"base": int(b), "radius_vox": float(r)} for b, r in zip(self.input_base, self.input_radius)]}

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.manifest(), sort_keys=True).encode())
        for a in (self.inputs, self.targets, self.profiles, self.starts, self.ends):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def save(self, out):
        out = Path(out)
        (out / "inputs").mkdir(parents=True, exist_ok=True)
        (out / "targets").mkdir(exist_ok=True)
        m = self.manifest()
        for i, g in enumerate(self.sdfs):
            name = f"inputs/{i:05d}.vsdf"
            save_vsdf(out / name, g)
            m["inputs"][i]["file"] = name
        for b in range(len(self.programs)):
            save_vsdf(out / f"targets/{b:05d}_vox.vsdf", SdfGrid(np.where(self.target(b), 1.0, -1.0)))
            n = len(self.programs[b])
            for i in range(n):
                save_vsdf(out / f"targets/{b:05d}_p{i}.vsdf", SdfGrid(np.where(self.profiles[b, i], 1.0, -1.0)))
            env = np.stack([self.starts[b, :n], self.ends[b, :n]], axis=1).astype("<f4")
            (out / f"targets/{b:05d}_env.f32").write_bytes(env.tobytes())
        m["digest"] = self.digest()
        (out / "manifest.json").write_text(json.dumps(m, indent=1))

    @classmethod
    def load(cls, path):
        path = Path(path)
        m = json.loads((path / "manifest.json").read_text())
        programs = [[ProgramStep.from_json(s) for s in b["program"]] for b in m["bases"]]
        sdfs = [load_vsdf(path / d["file"]) for d in m["inputs"]]
        return _assemble(m["seed"], [b["recipe"] for b in m["bases"]], programs,
                         [quantize_input(g) for g in sdfs], [d["base"] for d in m["inputs"]],
                         [d["radius_vox"] for d in m["inputs"]], sdfs)

    def save_compact(self, path):
        """Single npz with the quantized inputs and packed targets (no float grids)."""
        np.savez(path, manifest=np.frombuffer(json.dumps(self.manifest()).encode(), dtype=np.uint8),
                 inputs=self.inputs, targets=self.targets, profiles=np.packbits(self.profiles, axis=-1),
                 starts=self.starts, ends=self.ends)

    @classmethod
    def load_compact(cls, path):
        with np.load(path) as z:
            m = json.loads(z["manifest"].tobytes().decode())
            programs = [[ProgramStep.from_json(s) for s in b["program"]] for b in m["bases"]]
            return cls(m["seed"], [b["recipe"] for b in m["bases"]], programs, z["inputs"],
                       np.array([d["base"] for d in m["inputs"]], dtype=np.int64),
                       np.array([d["radius_vox"] for d in m["inputs"]], dtype=np.float64),
                       z["targets"], np.unpackbits(z["profiles"], axis=-1).astype(bool),
                       z["starts"], z["ends"])


def quantize_input(grid):
    return np.round(net_input(grid) * 127).astype(np.int8)


def _assemble(seed, recipes, programs, inputs, bases, radii, sdfs=()):
    nb = len(programs)
    T = np.zeros((nb, 64 ** 3 // 8), dtype=np.uint8)
    P = np.ones((nb, 3, 128, 128), dtype=bool)
    S = np.ones((nb, 3, 64), dtype=np.float32)
    E = np.ones((nb, 3, 64), dtype=np.float32)
    for b, steps in enumerate(programs):
        T[b] = np.packbits(~voxelize_steps(steps, 64))
        for i, st in enumerate(steps):
            p, s, e = step_targets(st)
            P[b, i], S[b, i], E[b, i] = p, s, e
    inputs = np.stack(inputs) if len(inputs) else np.zeros((0, 64, 64, 64), np.int8)
    return Dataset(seed, list(recipes), programs, inputs, np.asarray(bases, dtype=np.int64),
                   np.asarray(radii, dtype=np.float64), T, P, S, E, list(sdfs))


def gen_base(seed, b, recipe, corpus, rounded=True, res=64):
    """One base program and its inputs (unrounded plus the four rounded variants)."""
    rng = np.random.default_rng([seed, 1, b])
    steps = random_program(rng, recipe, corpus)
    sdf = program_sdf(steps, res)
    grids, radii = [sdf], [0.0]
    if rounded:
        for r in rounding_radii_voxels(res):
            try:
                grids.append(round_offset(sdf, r / res))
                radii.append(float(r))
            except ShapeEliminatedError:
                continue
    return steps, grids, radii


def gen_dataset(seed, n, corpus=None, recipes=None, rounded=True, keep_sdfs=True, progress=None) -> Dataset:
    """``n`` base programs drawn by recipe prior; a pure function of the arguments."""
    corpus = corpus if corpus is not None else build_corpus()
    if not corpus:
        raise ValueError("empty corpus")
    recipes = recipes if recipes is not None else builtin_recipes()
    chosen = sample_recipes(np.random.default_rng([seed, 0]), recipes, n)
    programs, inputs, sdfs, bases, radii = [], [], [], [], []
    for b, recipe in enumerate(chosen):
        steps, grids, rs = gen_base(seed, b, recipe, corpus, rounded)
        programs.append(steps)
        inputs.extend(quantize_input(g) for g in grids)
        if keep_sdfs:
            sdfs.extend(grids)
        bases.extend([b] * len(grids))
        radii.extend(rs)
        if progress:
            progress(b + 1, n)
    return _assemble(seed, [r.id for r in chosen], programs, inputs, bases, radii, sdfs)


# --------------------------------------------------------------------------
# losses


@dataclass
class LossBundle:
    vox: ad.Tensor
    profile: ad.Tensor
    start: ad.Tensor
    end: ad.Tensor
    total: ad.Tensor

    def values(self) -> dict:
        return {k: float(getattr(self, k).data) for k in ("vox", "profile", "start", "end", "total")}


def _mean_of(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.scale(acc, 1.0 / len(terms))


def compute_losses(decoded, T, P, S, E) -> LossBundle:
    """Voxel, profile, start and end BCE terms; profile/envelope terms averaged over steps.

    ``T`` is (N, 64, 64, 64); ``P``, ``S``, ``E`` are per-step lists of (N, ...) targets.
    """
    n = len(decoded.profiles)
    if not (len(P) == len(S) == len(E) == n):
        raise ValueError(f"{n} decoded steps but {len(P)}/{len(S)}/{len(E)} targets")
    if decoded.phi.shape != np.shape(T):
        raise ValueError(f"voxel logits {decoded.phi.shape} vs target {np.shape(T)}")
    vox = ad.bce_with_logits(decoded.phi, T)
    prof = _mean_of([ad.bce_with_logits(p, t) for p, t in zip(decoded.profiles, P)])
    start = _mean_of([ad.bce_with_logits(s, t) for (s, _), t in zip(decoded.envelopes, S)])
    end = _mean_of([ad.bce_with_logits(e, t) for (_, e), t in zip(decoded.envelopes, E)])
    total = ad.add(ad.add(ad.add(vox, prof), start), end)
    return LossBundle(vox, prof, start, end, total)


# --------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: dict, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, params: dict):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data = (p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
            p.grad = None

    def state(self) -> dict:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        out["adam.t"] = np.array([self.t], dtype=np.float32)
        return out

    def load_state(self, arrays: dict):
        for k in self.m:
            self.m[k] = arrays[f"adam.m.{k}"].astype(self.m[k].dtype)
            self.v[k] = arrays[f"adam.v.{k}"].astype(self.v[k].dtype)
        self.t = int(arrays["adam.t"][0])


def trainable_dict(params):
    return {k: t for k, t in params.items() if k not in params.frozen}


# --------------------------------------------------------------------------
# 3D training


def recipe_batches(rng, recipe_ids, indices, batch_size):
    """Shuffled batches in which every sample shares one recipe."""
    groups = {}
    for i in indices:
        groups.setdefault(recipe_ids[i], []).append(i)
    batches = []
    for rid in sorted(groups):
        idx = np.array(groups[rid])
        rng.shuffle(idx)
        batches += [(rid, idx[k:k + batch_size]) for k in range(0, len(idx), batch_size)]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def batch_arrays(ds: Dataset, idx, n_steps):
    bases = ds.input_base[idx]
    x = (ds.inputs[idx].astype(np.float32) / 127.0)[:, None]
    T = np.stack([ds.target(b) for b in bases]).astype(np.float32)
    P = [ds.profiles[bases, i].astype(np.float32) for i in range(n_steps)]
    S = [ds.starts[bases, i] for i in range(n_steps)]
    E = [ds.ends[bases, i] for i in range(n_steps)]
    return x, T, P, S, E


def batch_loss(net, recipe, ds, idx):
    x, T, P, S, E = batch_arrays(ds, idx, recipe.n)
    z = net.encode(ad.Tensor(x))
    return compute_losses(decode_model(net, z, recipe), T, P, S, E)


def split_bases(ds: Dataset, val_fraction, seed):
    nb = len(ds.programs)
    perm = np.random.default_rng([seed, 2]).permutation(nb)
    nval = int(round(val_fraction * nb)) if nb > 1 else 0
    val_bases = set(perm[:nval].tolist())
    train = [i for i in range(len(ds)) if int(ds.input_base[i]) not in val_bases]
    val = [i for i in range(len(ds)) if int(ds.input_base[i]) in val_bases]
    return train, val


def sidecar(path):
    return Path(str(path) + ".json")


def save_training_state(path, net, adam, meta: dict, best=None, seed=0):
    arrays = dict(net.params.arrays())
    if adam is not None:
        arrays.update(adam.state())
    if best is not None:
        arrays.update({f"best.{k}": v for k, v in best.items()})
    for k, v in meta.items():
        arrays[f"meta.{k}"] = np.array([v], dtype=np.float32)
    ad.save_checkpoint(path, arrays, seed)


def _sample_recipe_ids(ds):
    return [ds.recipes[int(b)] for b in ds.input_base]


@dataclass
class TrainResult:
    net: object
    curves: list
    checkpoint: str
    epochs_run: int
    seconds: float


def build_net3d(cfg: Train3DConfig, recipes=None):
    recipes = recipes if recipes is not None else builtin_recipes()
    return ExtrusionNet({r.id: r.n for r in recipes}, scale=cfg.scale, seed=cfg.seed)


def train_3d(cfg: Train3DConfig, ds: Dataset, recipes=None, resume=None, stop_after_epochs=None, log=None):
    """Minimise the summed loss with Adam; keeps the parameters with the best validation loss."""
    if ds is None or len(ds) == 0:
        raise ValueError("dataset missing")
    recipes = recipes if recipes is not None else builtin_recipes()
    rmap = recipe_map(recipes)
    net = build_net3d(cfg, recipes)
    params = trainable_dict(net.params)
    adam = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    train_idx, val_idx = split_bases(ds, cfg.val_fraction, cfg.seed)
    rids = _sample_recipe_ids(ds)
    epoch0, best_val, bad, best, curves = 0, np.inf, 0, None, []
    if resume:
        arrays, _ = ad.load_checkpoint(resume)
        net.params.load_arrays({k: v for k, v in arrays.items() if k in net.params})
        adam.load_state(arrays)
        epoch0 = int(arrays["meta.epoch"][0])
        best_val = float(arrays["meta.best_val"][0])
        bad = int(arrays["meta.bad"][0])
        best = {k[5:]: v for k, v in arrays.items() if k.startswith("best.")} or None
        curves = _read_curves(Path(str(cfg.out) + ".csv"))[:epoch0]
    t0 = time.time()
    epoch = epoch0
    for epoch in range(epoch0, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 3, epoch])
        sums, count = {}, 0
        for rid, idx in recipe_batches(rng, rids, train_idx, cfg.batch_size):
            lb = batch_loss(net, rmap[rid], ds, idx)
            ad.backward(lb.total)
            adam.step(params)
            for k, v in lb.values().items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            count += len(idx)
        row = {"epoch": epoch, **{f"train_{k}": v / max(count, 1) for k, v in sums.items()}}
        val = evaluate_3d(net, ds, val_idx, rmap, rids, cfg.batch_size) if val_idx else row["train_total"]
        row["val_total"] = val
        row["seconds"] = time.time() - t0
        curves.append(row)
        if log:
            log(row)
        if val < best_val - 1e-7:
            best_val, bad = val, 0
            best = {k: v.copy() for k, v in net.params.arrays().items()}
        else:
            bad += 1
        meta = {"epoch": epoch + 1, "best_val": best_val, "bad": bad}
        save_training_state(str(cfg.out) + ".state", net, adam, meta, best, cfg.seed)
        _write_curves(Path(str(cfg.out) + ".csv"), curves)
        if bad >= cfg.patience or time.time() - t0 > cfg.max_seconds:
            break
        if stop_after_epochs is not None and epoch + 1 - epoch0 >= stop_after_epochs:
            break
    if best is not None:
        net.params.load_arrays(best)
    save_model(cfg.out, net, {"kind": "3d", "scale": cfg.scale, "seed": cfg.seed,
                              "recipes": [r.to_json() for r in recipes], "config_hash": config_hash(cfg)})
    return TrainResult(net, curves, str(cfg.out), epoch + 1 - epoch0, time.time() - t0)


def evaluate_3d(net, ds, idx, rmap, rids, batch_size):
    rng = np.random.default_rng(0)
    total, count = 0.0, 0
    for rid, b in recipe_batches(rng, rids, idx, batch_size):
        lb = batch_loss(net, rmap[rid], ds, b)
        total += lb.values()["total"] * len(b)
        count += len(b)
    return total / max(count, 1)


def save_model(path, net, info: dict):
    ad.save_checkpoint(path, net.params.arrays(), info.get("seed", 0))
    info = dict(info, digest=net.params.digest(), architecture=json.loads(net.describe()))
    sidecar(path).write_text(json.dumps(info, indent=1))


def load_net3d(path):
    from .recipes import Recipe
    info = json.loads(sidecar(path).read_text())
    recipes = [Recipe.from_json(r) for r in info["recipes"]]
    net = ExtrusionNet({r.id: r.n for r in recipes}, scale=info["scale"], seed=info.get("seed", 0))
    arrays, _ = ad.load_checkpoint(path)
    net.params.load_arrays(arrays)
    return net, recipes


def load_model2d(path):
    info = json.loads(sidecar(path).read_text())
    model = ProfileAutoencoder(scale=info["scale"], seed=info.get("seed", 0))
    arrays, _ = ad.load_checkpoint(path)
    model.params.load_arrays(arrays)
    return model, info


def _write_curves(path, rows):
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _read_curves(path):
    if not path.exists():
        return []
    with open(path) as f:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in csv.DictReader(f)]


# --------------------------------------------------------------------------
# 2D training


def random_variation(rng, template, max_tries=100):
    """Uniformly drawn valid parameters for a template.

    Draws whose features are too thin to cover a single pixel are redrawn.
    """
    t = get_template(template)
    for _ in range(max_tries):
        vals = tuple(float(rng.uniform(q.lo, q.hi)) for q in t.params)
        if t.instantiate(vals):
            v = SketchVariation(t.name, vals)
            m = v.raster(CROP_RES)
            if m.any() and not m.all():
                return v
    return SketchVariation(t.name, t.seed)


def image_pair(variation, mode="sdf"):
    """(encoder input, profile target with 1 outside) for one variation."""
    mask = variation.raster(CROP_RES)
    query = sdf_from_binary(mask) if mode == "sdf" else mask
    return encoder_input(query, mode)[0], (~mask).astype(np.float32)


def split_corpus(corpus, holdout, seed):
    perm = np.random.default_rng([seed, 4]).permutation(len(corpus))
    held = set(perm[:holdout].tolist())
    return [v for i, v in enumerate(corpus) if i not in held], [v for i, v in enumerate(corpus) if i in held]


def reconstruction_iou(model, variations, mode="sdf"):
    from .sdf import iou
    out = []
    for v in variations:
        x, y = image_pair(v, mode)
        logits = model.decode(model.encode(ad.Tensor(x[None]))).data[0]
        out.append(iou(logits < 0, y < 0.5))
    return np.array(out)


def train_2d(cfg: Train2DConfig, corpus=None, log=None):
    """Autoencoder on sketch images; the encoder later embeds retrieval queries."""
    corpus = corpus if corpus is not None else build_corpus(cfg.corpus_counts or None)
    if not corpus:
        raise ValueError("corpus missing")
    train, held = split_corpus(corpus, cfg.holdout, cfg.seed)
    model = ProfileAutoencoder(scale=cfg.scale, seed=cfg.seed)
    params = trainable_dict(model.params)
    adam = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    base = [image_pair(v, cfg.query_mode) for v in train]
    templates = sorted({v.template for v in corpus})
    held_pairs = [image_pair(v, cfg.query_mode) for v in held]
    t0 = time.time()
    curves, best, best_val, bad = [], None, np.inf, 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 5, epoch])
        pairs = list(base)
        for _ in range(cfg.augment * len(train) // max(len(templates), 1)):
            for t in templates:
                pairs.append(image_pair(random_variation(rng, t), cfg.query_mode))
        order = rng.permutation(len(pairs))
        tot, cnt = 0.0, 0
        for k in range(0, len(order), cfg.batch_size):
            idx = order[k:k + cfg.batch_size]
            x = np.stack([pairs[i][0] for i in idx])
            y = np.stack([pairs[i][1] for i in idx])
            loss = ad.bce_with_logits(model.decode(model.encode(ad.Tensor(x))), y)
            ad.backward(loss)
            adam.step(params)
            tot += float(loss.data) * len(idx)
            cnt += len(idx)
        val = _eval_2d(model, held_pairs) if held_pairs else tot / cnt
        row = {"epoch": epoch, "train_loss": tot / cnt, "val_loss": val, "seconds": time.time() - t0}
        curves.append(row)
        if log:
            log(row)
        if val < best_val - 1e-7:
            best_val, bad = val, 0
            best = {k: v.copy() for k, v in model.params.arrays().items()}
        else:
            bad += 1
        if bad >= cfg.patience or time.time() - t0 > cfg.max_seconds:
            break
    if best is not None:
        model.params.load_arrays(best)
    _write_curves(Path(str(cfg.out) + ".csv"), curves)
    ious = reconstruction_iou(model, held, cfg.query_mode) if held else np.array([])
    save_model(cfg.out, model, {"kind": "2d", "scale": cfg.scale, "seed": cfg.seed, "query_mode": cfg.query_mode,
                                "config_hash": config_hash(cfg),
                                "heldout_iou_median": float(np.median(ious)) if len(ious) else None})
    return TrainResult(model, curves, str(cfg.out), len(curves), time.time() - t0), ious


def _eval_2d(model, pairs, batch=32):
    tot = 0.0
    for k in range(0, len(pairs), batch):
        x = np.stack([p[0] for p in pairs[k:k + batch]])
        y = np.stack([p[1] for p in pairs[k:k + batch]])
        tot += float(ad.bce_with_logits(model.decode(model.encode(ad.Tensor(x))), y).data) * len(x)
    return tot / len(pairs)
