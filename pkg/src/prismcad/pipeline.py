"""End-to-end inference: pick a recipe and orientation, read off intervals,
fit sketch loops, and assemble an editable extrusion program."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .recipes import AXIS_ROLES, Recipe, assemble_numpy, builtin_recipes, decode_model, extrude_numpy, resolve_envelopes
from .nets import voxel_input
from .retrieval import crop_square, extract_loops, fit_parameters, nearest
from .sdf import (IDENTITY, ROT90_X, ROT90_Y, Rotation24, SdfGrid, cell_centers, fast_march_reinit, iou,
                  iou_best_rotation, rotate_array)
from .sketch import (distance_to_curves, even_odd_inside, is_closed, loop_self_intersects, loops_from_json, loops_to_json, loops_touch,
                     pixel_grid, signed_distance, transform_loops, winding_inside)

PROGRAM_VERSION = 1
KAPPA = 10.0
CANDIDATE_ORIENTATIONS = (IDENTITY, ROT90_X, ROT90_Y)
MIN_INTERVAL = 1e-9
BOUNDARY_TOL = 1e-9  # sample points this close to a profile curve count as outside
MIN_REGION_PX = 16  # profile regions and holes smaller than this are speckle and ignored
MAX_REGIONS = 8  # a profile needing more loops than this is rejected as fragmented


class DegenerateIntervalError(ValueError):
    def __init__(self, msg="degenerate interval"):
        super().__init__(msg)


class ReconstructionError(RuntimeError):
    def __init__(self, stage, detail, locus=None):
        super().__init__(f"{stage}: {detail}")
        self.stage, self.detail, self.locus = stage, detail, locus

    def to_json(self):
        return {"error": self.stage, "detail": self.detail, "locus": self.locus}


# --------------------------------------------------------------------------
# programs


@dataclass
class ProgramStep:
    axis: str
    boolean: str
    interval: tuple  # (start, end) along the axis, world units
    loops: list  # sketch-plane loops, (col, row) world coordinates
    fits: list = field(default_factory=list)  # fit reports, informational

    def to_json(self):
        return {"axis": self.axis, "boolean": self.boolean, "interval": list(self.interval),
                "loops": loops_to_json(self.loops), "fits": self.fits}

    @classmethod
    def from_json(cls, d):
        return cls(d["axis"], d["boolean"], tuple(d["interval"]), loops_from_json(d["loops"]), d.get("fits", []))


@dataclass
class CadProgram:
    """Extrusion steps in the input's pose; ``orientation`` maps the canonical frame to it."""

    steps: list
    orientation: Rotation24 = IDENTITY
    recipe_id: str = ""

    def to_json(self):
        return {"version": PROGRAM_VERSION, "recipe": self.recipe_id, "orientation": self.orientation.to_json(),
                "steps": [s.to_json() for s in self.steps]}

    def dumps(self):
        return json.dumps(self.to_json(), indent=1)

    @classmethod
    def from_json(cls, d):
        if d.get("version", PROGRAM_VERSION) != PROGRAM_VERSION:
            raise ValueError(f"unsupported program version {d.get('version')}")
        return cls([ProgramStep.from_json(s) for s in d["steps"]], Rotation24.from_json(d["orientation"]),
                   d.get("recipe", ""))

    @classmethod
    def loads(cls, text):
        return cls.from_json(json.loads(text))

    def canonical_steps(self):
        return transform_steps(self.steps, self.orientation.inverse())


def _frame_map(axis, rot: Rotation24):
    """How a rotation acts on one step's sketch frame: new axis, 2x2 map, offset, sign along the axis."""
    R = rot.matrix().astype(float)
    roles = AXIS_ROLES[axis]

    def image(role):
        e = np.zeros(3)
        e[roles[role]] = 1.0
        return R @ e

    dw = image(2)
    b = int(np.argmax(np.abs(dw)))
    new_axis = "XYZ"[b]
    wsign = int(round(dw[b]))
    rb, cb, _ = AXIS_ROLES[new_axis]
    du, dv = image(1), image(0)
    M = np.array([[du[cb], dv[cb]], [du[rb], dv[rb]]])
    off = 0.5 - M @ np.array([0.5, 0.5])
    return new_axis, M, (float(off[0]), float(off[1])), wsign


def transform_steps(steps, rot: Rotation24):
    """Steps of the shape rotated by ``rot`` about the cube center."""
    if rot.is_identity():
        return [ProgramStep(s.axis, s.boolean, tuple(s.interval), list(s.loops), list(s.fits)) for s in steps]
    out = []
    for s in steps:
        axis, M, off, wsign = _frame_map(s.axis, rot)
        a, b = s.interval
        interval = (a, b) if wsign > 0 else (1.0 - b, 1.0 - a)
        out.append(ProgramStep(axis, s.boolean, interval, transform_loops(s.loops, 1.0, off, M), list(s.fits)))
    return out


def transform_program(program: CadProgram, rot: Rotation24) -> CadProgram:
    return CadProgram(transform_steps(program.steps, rot), rot.compose(program.orientation), program.recipe_id)


# --------------------------------------------------------------------------
# voxelization and analytic fields


def open_profile(loops, res, inside_fn=even_odd_inside):
    """Pixel centers strictly inside the loops; points on a curve are outside.

    Fitted edges often land on pixel edges of the 128 profile image, which are
    voxel centers of the 64 grid. An open set keeps membership symmetric under
    the mirror part of a rotation, matching the strict interval test.
    """
    px, py = pixel_grid(res)
    return inside_fn(loops, px, py) & (distance_to_curves(loops, px, py) > BOUNDARY_TOL)


def step_membership(step, res, inside_fn=even_odd_inside):
    """Boolean [x, y, z] mask of one extrusion step at voxel centers."""
    prof = open_profile(step.loops, res, inside_fn)
    c = cell_centers(res)
    a, b = step.interval
    env = (c > a) & (c < b)
    # inside iff profile and interval; express as max of "outside" indicators
    block = extrude_numpy((~prof).astype(np.int8), (~env).astype(np.int8), step.axis)
    return block == 0


def combine_masks(steps, masks):
    out = masks[0].copy()
    for s, m in zip(steps[1:], masks[1:]):
        if s.boolean == "UNION":
            out |= m
        elif s.boolean == "INTERSECT":
            out &= m
        elif s.boolean == "SUBTRACT":
            out &= ~m
        else:
            raise ValueError(f"unknown boolean {s.boolean!r}")
    return out


def voxelize_steps(steps, res=64):
    if not steps:
        raise ValueError("program has no steps")
    return combine_masks(steps, [step_membership(s, res) for s in steps])


def voxelize_program(program: CadProgram, res=64) -> np.ndarray:
    """Exact occupancy at voxel centers: even-odd ray casting per step plus interval test."""
    return voxelize_steps(program.steps, res)


def step_sdf(step, res):
    """Signed distance of one extruded prism at voxel centers (negative inside)."""
    px, py = pixel_grid(res)
    d2 = signed_distance(step.loops, px, py)
    c = cell_centers(res)
    a, b = step.interval
    dw = np.maximum(a - c, c - b)
    d2b, dwb = np.broadcast_arrays(d2[:, :, None], dw[None, None, :])
    outside = np.hypot(np.maximum(d2b, 0.0), np.maximum(dwb, 0.0))
    inside = np.minimum(np.maximum(d2b, dwb), 0.0)
    return np.transpose(outside + inside, np.argsort(AXIS_ROLES[step.axis]))


def program_sdf(steps, res=64) -> SdfGrid:
    """CSG of the analytic prism distances, re-initialised to a distance field."""
    phi = step_sdf(steps[0], res)
    for s in steps[1:]:
        d = step_sdf(s, res)
        if s.boolean == "UNION":
            phi = np.minimum(phi, d)
        elif s.boolean == "INTERSECT":
            phi = np.maximum(phi, d)
        else:
            phi = np.maximum(phi, -d)
    return fast_march_reinit(SdfGrid(phi))


def surface_distance(steps, res):
    """Lower bound on the distance from each voxel center to any step's surface."""
    out = np.full((res,) * 3, np.inf)
    for s in steps:
        out = np.minimum(out, np.abs(step_sdf(s, res)))
    return out


# --------------------------------------------------------------------------
# hard logits (bypass mode)


def hard_profile(loops, res):
    """Profile logits [row, col]: -kappa inside (winding rule), +kappa outside."""
    if not loops:
        return np.full((res, res), KAPPA)
    return np.where(open_profile(loops, res, winding_inside), -KAPPA, KAPPA)


def hard_envelopes(interval, res=64):
    c = cell_centers(res)
    a, b = interval
    S = np.where(c <= a, KAPPA, -KAPPA)
    E = np.where(c < b, -KAPPA, KAPPA)
    return S, E


def hard_phi(recipe: Recipe, steps, res=64):
    """Compositor field from hard logits for ``recipe`` using matching program steps."""
    profiles, own = hard_inputs(recipe, steps, res)
    return assemble_numpy(recipe, [p[1] for p in profiles], own)


def hard_inputs(recipe: Recipe, steps, res=64, profile_res=128):
    profiles = []
    arrays = {}
    for i, rs in enumerate(recipe.steps):
        ok = i < len(steps) and steps[i].axis == rs.axis
        if ok:
            profiles.append((hard_profile(steps[i].loops, profile_res), hard_profile(steps[i].loops, res)))
            S, E = hard_envelopes(steps[i].interval, res)
        else:
            profiles.append((np.full((profile_res,) * 2, KAPPA), np.full((res, res), KAPPA)))
            S, E = np.full(res, KAPPA), np.full(res, KAPPA)
        arrays[(i, "START")], arrays[(i, "END")] = S, E
    own = {k: arrays[k] for k in recipe.own_arrays()}
    return profiles, own


# --------------------------------------------------------------------------
# decoders


@dataclass
class DecodeResult:
    phi: np.ndarray  # (64, 64, 64)
    profiles: list  # (128, 128) logits per step
    envelopes: list  # (S, E) per step


net_input = voxel_input


class ModelDecoder:
    """Runs the trained 3D network on a canonical-frame input."""

    def __init__(self, net):
        self.net = net
        self._cache = (None, None)

    def decode(self, grid: SdfGrid, recipe: Recipe, orientation: Rotation24) -> DecodeResult:
        x = net_input(grid)[None, None].astype(self.net.params.dtype)
        key = zlib.crc32(x.tobytes())
        if self._cache[0] != key:
            self._cache = (key, self.net.encode(ad.Tensor(x)))
        d = decode_model(self.net, self._cache[1], recipe)
        return DecodeResult(d.phi.data[0], [p.data[0] for p in d.profiles],
                            [(s.data[0], e.data[0]) for s, e in d.envelopes])


class OracleDecoder:
    """Bypass mode: produces hard logits from a known program instead of network outputs."""

    def __init__(self, program: CadProgram):
        self.canonical = program.canonical_steps()
        self.orientation = program.orientation

    def decode(self, grid: SdfGrid, recipe: Recipe, orientation: Rotation24) -> DecodeResult:
        r = orientation.inverse().compose(self.orientation)
        steps = transform_steps(self.canonical, r)
        profiles, own = hard_inputs(recipe, steps, grid.n)
        phi = assemble_numpy(recipe, [p[1] for p in profiles], own)
        envs = resolve_envelopes(recipe, {k: ad.Tensor(v) for k, v in own.items()})
        return DecodeResult(phi, [p[0] for p in profiles], [(s.data, e.data) for s, e in envs])


# --------------------------------------------------------------------------
# selection


def voxel_loss(phi, target_outside) -> float:
    return float(ad.bce_with_logits_values(np.asarray(phi, dtype=np.float64), target_outside).mean())


@dataclass
class Candidate:
    recipe: Recipe
    orientation: Rotation24
    loss: float
    decoded: DecodeResult


def rank_candidates(grid: SdfGrid, recipes, decoder, orientations=CANDIDATE_ORIENTATIONS):
    """All (recipe, orientation) candidates sorted by voxel loss; ties keep recipe then orientation order."""
    if not recipes:
        raise ValueError("no recipes registered")
    out = []
    for oi, o in enumerate(orientations):
        canon = SdfGrid(rotate_array(np.asarray(grid.values), o.inverse()))
        target = (canon.values >= 0).astype(np.float64)
        for ri, r in enumerate(recipes):
            dec = decoder.decode(canon, r, o)
            out.append((voxel_loss(dec.phi, target), ri, oi, Candidate(r, o, 0.0, dec)))
    out.sort(key=lambda t: (t[0], t[1], t[2]))
    cands = []
    for loss, _, _, c in out:
        c.loss = loss
        cands.append(c)
    return cands


def select_recipe_and_orientation(grid, recipes, decoder, orientations=CANDIDATE_ORIENTATIONS) -> Candidate:
    return rank_candidates(grid, recipes, decoder, orientations)[0]


# --------------------------------------------------------------------------
# intervals


def _crossings(a, rising):
    a = np.asarray(a, dtype=np.float64)
    out = []
    for k in range(1, len(a)):
        p, q = a[k - 1], a[k]
        hit = (p > 0 >= q) if not rising else (p <= 0 < q)
        if hit:
            f = (k - 1) + p / (p - q) if p != q else k - 0.5
            out.append((f + 0.5) / len(a))
    return out


def envelope_to_interval(S, E):
    """[start, end] from the envelope zero crossings, maximising length when ambiguous."""
    S, E = np.asarray(S, dtype=np.float64), np.asarray(E, dtype=np.float64)
    starts = _crossings(S, rising=False)
    if S[0] <= 0:
        starts = [0.0] + starts
    ends = _crossings(E, rising=True)
    if E[-1] <= 0:
        ends = ends + [1.0]
    best = None
    for s in starts:
        for e in ends:
            if e > s and (best is None or e - s > best[1] - best[0]):
                best = (s, e)
    if best is None:
        raise DegenerateIntervalError()
    return best


def step_intervals(recipe: Recipe, envelopes):
    """Per-step intervals; shared planes copy the source step's coordinate exactly."""
    raw = [envelope_to_interval(S, E) for S, E in envelopes]
    vals = {}

    def get(i, which):
        key = (i, which)
        if key in vals:
            return vals[key]
        ref = recipe.steps[i].start_ref if which == "START" else recipe.steps[i].end_ref
        if ref.kind == "OWN":
            v = raw[i][0] if which == "START" else raw[i][1]
        else:
            v = get(ref.step, ref.which)
        vals[key] = v
        return v

    return [(get(i, "START"), get(i, "END")) for i in range(recipe.n)]


# --------------------------------------------------------------------------
# assembly


def build_program(candidate: Candidate, step_loops, intervals, fits=None) -> CadProgram:
    """Program in the input's pose from canonical-frame loops and intervals."""
    recipe = candidate.recipe
    if len(step_loops) != recipe.n or len(intervals) != recipe.n:
        raise ValueError(f"recipe {recipe.id} needs {recipe.n} steps of loops and intervals")
    steps = []
    for i, rs in enumerate(recipe.steps):
        if not step_loops[i]:
            raise ValueError(f"missing fit for step {i}")
        steps.append(ProgramStep(rs.axis, rs.boolean, tuple(intervals[i]), list(step_loops[i]),
                                 list(fits[i]) if fits else []))
    return CadProgram(transform_steps(steps, candidate.orientation), candidate.orientation, recipe.id)


def fit_profile_image(logits, index, model2d, max_iter=200):
    """Threshold a decoded profile, then retrieve and fit every outer loop and hole."""
    mask = np.asarray(logits) < 0
    regions = []
    for ci, comp in enumerate(c for c in extract_loops(mask) if c.filled.sum() >= MIN_REGION_PX):
        regions.append((ci, "outer", comp.filled))
        regions += [(ci, "hole", h) for h in comp.holes if h.sum() >= MIN_REGION_PX]
    if not regions:
        raise ReconstructionError("empty profile", "profile image thresholds to empty")
    if len(regions) > MAX_REGIONS:
        raise ReconstructionError("fit", f"profile fragments into {len(regions)} regions")
    loops, reports = [], []
    for ci, kind, region in regions:
        sdf, tf = crop_square(region)
        var, dist = nearest(index, model2d, sdf if index.mode == "sdf" else sdf.binary())
        fit = fit_parameters(var, region, tf, max_iter)
        if fit.iou <= 0:
            raise ReconstructionError("fit", f"no valid fit for {kind} region", {"component": ci})
        loops.extend(fit.loops())
        reports.append(dict(fit.to_json(), kind=kind, component=ci, distance=dist))
    return loops, reports


# --------------------------------------------------------------------------
# validity


@dataclass
class Check:
    name: str
    passed: bool
    locus: dict
    advisory: bool = False


@dataclass
class ValidityReport:
    checks: list

    @property
    def valid(self) -> bool:
        return all(c.passed for c in self.checks if not c.advisory)

    def failures(self):
        return [c for c in self.checks if not c.passed and not c.advisory]

    def to_json(self):
        return {"valid": self.valid,
                "checks": [{"name": c.name, "passed": c.passed, "locus": c.locus, "advisory": c.advisory}
                           for c in self.checks]}


def validate_program(program: CadProgram, res=32) -> ValidityReport:
    checks = []
    for si, step in enumerate(program.steps):
        for li, loop in enumerate(step.loops):
            loc = {"step": si, "loop": li}
            checks.append(Check("closed loop", is_closed(tuple(loop)), loc))
            checks.append(Check("self-intersection", not loop_self_intersects(tuple(loop)), loc))
        for a in range(len(step.loops)):
            for b in range(a + 1, len(step.loops)):
                checks.append(Check("loop tangency", not loops_touch(step.loops[a], step.loops[b]),
                                    {"step": si, "loop": [a, b]}))
        if not step.loops:
            checks.append(Check("empty profile", False, {"step": si}))
        lo, hi = step.interval
        checks.append(Check("degenerate interval", hi - lo > MIN_INTERVAL, {"step": si}))
    base = None
    for si, step in enumerate(program.steps):
        if not step.loops or step.interval[1] - step.interval[0] <= MIN_INTERVAL:
            continue
        m = step_membership(step, res)
        if base is not None and step.boolean == "SUBTRACT":
            checks.append(Check("subtract overlaps base", bool((base & m).any()), {"step": si}, advisory=True))
        base = m if base is None else combine_masks([program.steps[0], step], [base, m])
    return ValidityReport(checks)


# --------------------------------------------------------------------------
# reconstruction


@dataclass
class Reconstruction:
    program: CadProgram
    report: ValidityReport
    metrics: dict
    candidate: Candidate


def reconstruct(grid: SdfGrid, recipes, decoder, index, model2d, target=None, max_iter=200,
                orientations=CANDIDATE_ORIENTATIONS) -> Reconstruction:
    """Select, fit, assemble and validate; IoU is measured against ``target`` when given."""
    ranked = rank_candidates(grid, recipes, decoder, orientations)
    last_err = None
    for cand in ranked:
        try:
            intervals = step_intervals(cand.recipe, cand.decoded.envelopes)
            step_loops, fits = [], []
            for i in range(cand.recipe.n):
                loops, rep = fit_profile_image(cand.decoded.profiles[i], index, model2d, max_iter)
                step_loops.append(loops)
                fits.append(rep)
        except (ReconstructionError, DegenerateIntervalError) as err:
            # empty or unusable decode: fall back to the next-best candidate
            last_err = err
            continue
        program = build_program(cand, step_loops, intervals, fits)
        report = validate_program(program)
        metrics = program_metrics(program, grid, target)
        metrics.update({"recipe": cand.recipe.id, "orientation": cand.orientation.to_json(),
                        "voxel_loss": cand.loss, "valid": report.valid})
        return Reconstruction(program, report, metrics, cand)
    if isinstance(last_err, ReconstructionError):
        raise last_err
    raise ReconstructionError("selection", str(last_err) if last_err else "no usable candidate")


def program_metrics(program, grid: SdfGrid, target=None, rot24=False) -> dict:
    vox = voxelize_program(program, grid.n)
    if target is None:
        ref, against = grid.values < 0, "input"
    else:
        ref, against = np.asarray(target, dtype=bool), "target"
    out = {"iou": iou(vox, ref), "iou_against": against}
    if against == "input":
        out["warning"] = "no pre-rounding target; IoU measured against the input"
    if rot24:
        best, rot = iou_best_rotation(ref, vox)
        out["iou_rot24"] = best
        out["best_rotation"] = rot.to_json()
    return out


# --------------------------------------------------------------------------
# cross-oracle


def cross_oracle_case(recipe: Recipe, steps, res):
    """(agree, compared voxels) between the hard-logit compositor and ray-cast voxelization."""
    member = hard_phi(recipe, steps, res) < 0
    vox = voxelize_steps(steps, res)
    safe = surface_distance(steps, res) > 0.5 / res
    return bool(np.array_equal(member[safe], vox[safe])), int(safe.sum())


def cross_oracle_check(seed=0, n=100, res=16, recipes=None, corpus=None):
    """Random synthetic programs cycled over the recipes; counts agreement cases."""
    from .sketch import build_corpus
    from .trainkit import random_program

    recipes = recipes if recipes is not None else builtin_recipes()
    corpus = corpus if corpus is not None else build_corpus()
    cases = []
    for k in range(n):
        rng = np.random.default_rng([seed, 6, k])
        recipe = recipes[k % len(recipes)]
        steps = random_program(rng, recipe, corpus)
        ok, count = cross_oracle_case(recipe, steps, res)
        cases.append({"case": k, "recipe": recipe.id, "agree": ok, "voxels": count})
    agree = sum(c["agree"] for c in cases)
    return {"agree": agree, "n": n, "res": res, "summary": f"{agree}/{n} agree", "cases": cases}
