"""Extrusion recipes and the differentiable compositor.

A recipe lists extrusion steps. Each step has an axis, a Boolean operation and
references for its start and end planes. ``OWN`` planes are decoded from the
step's embedding. ``NEG_OF(j, END)`` reuses step j's end array negated, which
puts this step's start exactly on j's end plane. ``SAME_AS(j, END)`` reuses
the array unchanged.

Envelope convention: S is positive below the start plane and E is negative
below the end plane, so max(S, E) < 0 exactly between the two planes.

Axis mapping from 3D [x, y, z] to sketch images [row, col]:
  Z -> (row=y, col=x),  X -> (row=y, col=z),  Y -> (row=z, col=x).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

AXES = ("X", "Y", "Z")
BOOLEANS = ("UNION", "SUBTRACT", "INTERSECT")
MAX_STEPS = 3
RES = 64


class RecipeError(ValueError):
    pass


@dataclass(frozen=True)
class PlaneRef:
    kind: str = "OWN"  # OWN | NEG_OF | SAME_AS
    step: int = -1
    which: str = ""  # START | END

    def __str__(self):
        return "OWN" if self.kind == "OWN" else f"{self.kind}({self.step},{self.which})"

    @classmethod
    def parse(cls, text) -> "PlaneRef":
        text = str(text).replace(" ", "")
        if text == "OWN":
            return cls()
        m = re.fullmatch(r"(NEG_OF|SAME_AS)\((\d+),(START|END)\)", text)
        if not m:
            raise RecipeError(f"bad plane reference {text!r}")
        return cls(m.group(1), int(m.group(2)), m.group(3))


OWN = PlaneRef()


def NEG_OF(step, which):
    return PlaneRef("NEG_OF", step, which)


def SAME_AS(step, which):
    return PlaneRef("SAME_AS", step, which)


@dataclass(frozen=True)
class Step:
    axis: str = "Z"
    boolean: str = "UNION"
    start_ref: PlaneRef = OWN
    end_ref: PlaneRef = OWN

    def to_json(self):
        return {"axis": self.axis, "boolean": self.boolean, "start_ref": str(self.start_ref),
                "end_ref": str(self.end_ref)}

    @classmethod
    def from_json(cls, d):
        return cls(d["axis"], d["boolean"], PlaneRef.parse(d.get("start_ref", "OWN")),
                   PlaneRef.parse(d.get("end_ref", "OWN")))


@dataclass(frozen=True)
class Recipe:
    id: str
    steps: tuple
    prior: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        self.validate()

    @property
    def n(self) -> int:
        return len(self.steps)

    def validate(self):
        if not 1 <= self.n <= MAX_STEPS:
            raise RecipeError(f"{self.id}: {self.n} steps (1..{MAX_STEPS} allowed)")
        if self.steps[0].axis != "Z" or self.steps[0].boolean != "UNION":
            raise RecipeError(f"{self.id}: step 0 must be a UNION along Z")
        for i, s in enumerate(self.steps):
            if s.axis not in AXES or s.boolean not in BOOLEANS:
                raise RecipeError(f"{self.id}: step {i} has axis {s.axis!r} / boolean {s.boolean!r}")
            for ref in (s.start_ref, s.end_ref):
                if ref.kind == "OWN":
                    continue
                if not 0 <= ref.step < i:
                    raise RecipeError(f"{self.id}: step {i} references step {ref.step}, not an earlier step")
                if self.steps[ref.step].axis != s.axis:
                    raise RecipeError(f"{self.id}: step {i} shares a plane with step {ref.step} on another axis")

    def own_arrays(self):
        """(step, START|END) pairs that are decoded rather than shared."""
        out = []
        for i, s in enumerate(self.steps):
            if s.start_ref.kind == "OWN":
                out.append((i, "START"))
            if s.end_ref.kind == "OWN":
                out.append((i, "END"))
        return out

    def to_json(self):
        return {"id": self.id, "prior": self.prior, "steps": [s.to_json() for s in self.steps]}

    @classmethod
    def from_json(cls, d):
        return cls(d["id"], tuple(Step.from_json(s) for s in d["steps"]), float(d.get("prior", 0.0)))


_RAW_PRIORS = {"a": 56.7, "b": 5.2, "c": 4.5, "d": 2.9, "e": 2.6}


def builtin_recipes():
    """The five catalogue recipes, priors renormalised over the five."""
    total = sum(_RAW_PRIORS.values())
    p = {k: v / total for k, v in _RAW_PRIORS.items()}
    return [
        Recipe("a", (Step("Z", "UNION"),), p["a"]),
        Recipe("b", (Step("Z", "UNION"), Step("Z", "UNION", start_ref=NEG_OF(0, "END"))), p["b"]),
        Recipe("c", (Step("Z", "UNION"), Step("Z", "SUBTRACT", end_ref=SAME_AS(0, "END"))), p["c"]),
        Recipe("d", (Step("Z", "UNION"), Step("Z", "UNION", start_ref=SAME_AS(0, "START"))), p["d"]),
        Recipe("e", (Step("Z", "UNION"), Step("X", "SUBTRACT")), p["e"]),
    ]


def recipe_map(recipes=None) -> dict:
    return {r.id: r for r in (recipes if recipes is not None else builtin_recipes())}


def load_recipes(path):
    with open(path) as f:
        data = json.load(f)
    items = data["recipes"] if isinstance(data, dict) else data
    return [Recipe.from_json(d) for d in items]


# --------------------------------------------------------------------------
# axis mapping

# which world axis plays (row, col, extrusion) for each extrusion axis
AXIS_ROLES = {"Z": (1, 0, 2), "X": (1, 2, 0), "Y": (2, 0, 1)}


def to_sketch(axis, point):
    """World point (x, y, z) -> (col, row, w) in the sketch frame of ``axis``."""
    r, c, w = AXIS_ROLES[axis]
    return point[c], point[r], point[w]


def from_sketch(axis, col, row, w):
    r, c, ww = AXIS_ROLES[axis]
    out = [0.0, 0.0, 0.0]
    out[r], out[c], out[ww] = row, col, w
    return tuple(out)


def extrude_numpy(profile, env, axis):
    """Plain-array version of `extrude_part`: profile [row, col] and env [w] to [x, y, z]."""
    # build on axes ordered (row, col, w), then move them to world order
    block = np.maximum(np.asarray(profile)[:, :, None], np.asarray(env)[None, None, :])
    return np.transpose(block, np.argsort(AXIS_ROLES[axis]))


def extrude_part(profile64, start, end, axis):
    """Extruded part logits (N, 64, 64, 64) from a (N, 64, 64) profile and two (N, 64) envelopes."""
    profile64, start, end = ad.as_tensor(profile64), ad.as_tensor(start), ad.as_tensor(end)
    if profile64.data.ndim == 2:
        profile64 = ad.reshape(profile64, (1,) + profile64.shape)
        start = ad.reshape(start, (1,) + start.shape)
        end = ad.reshape(end, (1,) + end.shape)
    n = profile64.shape[1]
    env = ad.maximum(start, end)
    if axis == "Z":
        p = ad.replicate(ad.permute(profile64, (0, 2, 1)), 3, n)
        e = ad.replicate(ad.replicate(env, 1, n), 2, n)
    elif axis == "X":
        p = ad.replicate(profile64, 1, n)
        e = ad.replicate(ad.replicate(env, 2, n), 3, n)
    elif axis == "Y":
        p = ad.replicate(ad.permute(profile64, (0, 2, 1)), 2, n)
        e = ad.replicate(ad.replicate(env, 1, n), 3, n)
    else:
        raise RecipeError(f"unknown axis {axis!r}")
    return ad.maximum(p, e)


def compose(recipe, parts):
    """Fold the parts with min (union), max (intersect) and max(phi, -part) (subtract)."""
    if len(parts) != recipe.n:
        raise RecipeError(f"{recipe.id}: {len(parts)} parts for {recipe.n} steps")
    phi = parts[0]
    for step, part in zip(recipe.steps[1:], parts[1:]):
        if step.boolean == "UNION":
            phi = ad.minimum(phi, part)
        elif step.boolean == "INTERSECT":
            phi = ad.maximum(phi, part)
        else:
            phi = ad.maximum(phi, ad.neg(part))
    return phi


def resolve_envelopes(recipe, own: dict):
    """Per-step (S, E) from the decoded arrays, deriving shared ones by reference."""
    resolved = {}

    def get(i, which):
        key = (i, which)
        if key in resolved:
            return resolved[key]
        step = recipe.steps[i]
        ref = step.start_ref if which == "START" else step.end_ref
        if ref.kind == "OWN":
            if key not in own:
                raise RecipeError(f"{recipe.id}: missing decoded array for step {i} {which}")
            val = own[key]
        elif ref.kind == "SAME_AS":
            val = get(ref.step, ref.which)
        else:
            val = ad.neg(get(ref.step, ref.which))
        resolved[key] = val
        return val

    return [(get(i, "START"), get(i, "END")) for i in range(recipe.n)]


def assemble(recipe, profiles64, own: dict):
    """phi from per-step 64x64 profiles and the recipe's own envelope arrays."""
    envs = resolve_envelopes(recipe, own)
    parts = [extrude_part(p, s, e, step.axis) for p, (s, e), step in zip(profiles64, envs, recipe.steps)]
    return compose(recipe, parts), envs


def assemble_numpy(recipe, profiles64, own: dict):
    """Array-only version of `assemble` for hard logits; returns phi of shape (64, 64, 64)."""
    arr = {k: ad.Tensor(np.asarray(v)[None]) for k, v in own.items()}
    phi, _ = assemble(recipe, [ad.Tensor(np.asarray(p)[None]) for p in profiles64], arr)
    return phi.data[0]


@dataclass
class Decoded:
    phi: object  # Tensor (N, 64, 64, 64)
    profiles: list  # per step, Tensor (N, 128, 128)
    envelopes: list  # per step, (S, E) tensors (N, 64)
    own: dict  # decoded arrays only


def decode_model(net, z, recipe) -> Decoded:
    """Run the decoders of ``net`` for ``recipe`` from voxel embeddings ``z`` (N, 128)."""
    from .nets import downsample_profile

    if recipe.id not in net.op_decoders:
        raise RecipeError(f"network has no operation decoder for recipe {recipe.id!r}")
    embeddings = net.op_decoders[recipe.id](z)
    profiles = [net.profile(e) for e in embeddings]
    own = {}
    for i, which in recipe.own_arrays():
        dec = net.start_decoder if which == "START" else net.end_decoder
        own[(i, which)] = dec(embeddings[i])
    small = [downsample_profile(p, net.params) for p in profiles]
    phi, envs = assemble(recipe, small, own)
    return Decoded(phi, profiles, envs, own)
