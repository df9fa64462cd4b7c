"""Search, retrieve and fit: turn a binary profile image into fitted sketch loops."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage, optimize

from . import autodiff as ad
from .sdf import SdfGrid, cell_centers, iou
from .sketch import (CROP_MARGIN, SketchVariation, even_odd_inside, get_template, pixel_grid,
                     sdf_from_binary, signed_distance, transform_loops)

CROP_RES = 128
MIN_CROP_PX = 8
SDF_GAIN = 8.0  # encoder input = SDF in units of 1/8 of the image side
PIDX_MAGIC = b"PIDX"


@dataclass
class LoopComponent:
    component: np.ndarray  # the 8-connected foreground pixels
    filled: np.ndarray  # component with its holes filled
    holes: list  # one mask per hole


def extract_loops(mask) -> list:
    """8-connected components with their 4-connected holes."""
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    out = []
    for k in range(1, n + 1):
        comp = labels == k
        filled = ndimage.binary_fill_holes(comp)
        hole_labels, nh = ndimage.label(filled & ~comp)
        holes = [hole_labels == j for j in range(1, nh + 1)]
        out.append(LoopComponent(comp, filled, holes))
    return out


@dataclass(frozen=True)
class CropTransform:
    """Maps crop-frame points (unit square) to image world coordinates."""

    offset: tuple
    scale: float

    def to_world(self, loops):
        return transform_loops(loops, self.scale, self.offset)

    def to_crop(self, loops):
        s = 1.0 / self.scale
        return transform_loops(loops, s, (-self.offset[0] * s, -self.offset[1] * s))


def crop_box(mask):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    res = mask.shape[0]
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    x0, x1 = cols[0] / res, (cols[-1] + 1) / res
    y0, y1 = rows[0] / res, (rows[-1] + 1) / res
    side = max(max(x1 - x0, y1 - y0) * (1 + 2 * CROP_MARGIN), MIN_CROP_PX / res)
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    return CropTransform((cx - side / 2, cy - side / 2), side)


def crop_mask(mask, res=CROP_RES):
    """Square crop around the mask resampled to ``res`` pixels, plus its transform."""
    mask = np.asarray(mask, dtype=bool)
    tf = crop_box(mask)
    n = mask.shape[0]
    c = cell_centers(res)
    wx = tf.offset[0] + tf.scale * c
    wy = tf.offset[1] + tf.scale * c
    rr, cc = np.meshgrid(wy * n - 0.5, wx * n - 0.5, indexing="ij")
    vals = ndimage.map_coordinates(mask.astype(float), [rr, cc], order=1, mode="constant", cval=0.0)
    return vals >= 0.5, tf


def crop_square(mask, res=CROP_RES):
    """Crop, resample and convert to an SDF image; returns (SdfGrid, CropTransform)."""
    crop, tf = crop_mask(mask, res)
    if not crop.any():
        # sub-pixel specks vanish under bilinear resampling; keep the center pixel
        crop[res // 2, res // 2] = True
    return sdf_from_binary(crop), tf


def encoder_input(query, mode="sdf") -> np.ndarray:
    """(1, 1, 128, 128) float32 array for the image encoder."""
    if mode == "sdf":
        arr = np.asarray(query.values if isinstance(query, SdfGrid) else query, dtype=np.float64) * SDF_GAIN
    elif mode == "mask":
        arr = (query.binary() if isinstance(query, SdfGrid) else np.asarray(query, dtype=bool)).astype(np.float64)
    else:
        raise ValueError(f"unknown query mode {mode!r}")
    if arr.shape != (CROP_RES, CROP_RES):
        raise ValueError(f"query must be {CROP_RES}x{CROP_RES}, got {arr.shape}")
    return arr.astype(np.float32)[None, None]


def embed(model, query, mode="sdf") -> np.ndarray:
    """64-vector of one query; always batch size 1 so results are bit-stable."""
    x = encoder_input(query, mode).astype(model.params.dtype)
    return model.encode(ad.Tensor(x)).data[0].copy()


@dataclass
class EmbeddingIndex:
    variations: list
    embeddings: np.ndarray  # (N, 64) float32
    checksum: str = ""
    mode: str = "sdf"

    def __len__(self):
        return len(self.variations)

    @classmethod
    def build(cls, model, variations, mode="sdf"):
        embs = []
        for v in variations:
            q = v.sdf(CROP_RES) if mode == "sdf" else v.raster(CROP_RES)
            embs.append(embed(model, q, mode))
        arr = np.array(embs, dtype=np.float32).reshape(-1, 64)
        return cls(list(variations), arr, model.params.digest(), mode)

    def nearest_embedding(self, z):
        if len(self) == 0:
            raise ValueError("empty index")
        d = np.sqrt(((self.embeddings.astype(np.float64) - np.asarray(z, dtype=np.float64)) ** 2).sum(axis=1))
        i = int(np.argmin(d))  # first minimum: lowest position, ids ascend with position
        return self.variations[i], float(d[i])

    def save(self, path):
        path = Path(path)
        manifest = {"checksum": self.checksum, "mode": self.mode, "count": len(self),
                    "variations": [v.to_json() for v in self.variations]}
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=1))
        with open(path, "wb") as f:
            f.write(PIDX_MAGIC + struct.pack("<I", len(self)))
            f.write(np.ascontiguousarray(self.embeddings, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path):
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        raw = path.read_bytes()
        if raw[:4] != PIDX_MAGIC:
            raise ValueError(f"{path}: not an index file")
        (count,) = struct.unpack("<I", raw[4:8])
        emb = np.frombuffer(raw[8:8 + 256 * count], dtype="<f4").reshape(count, 64).copy()
        vars_ = [SketchVariation(d["template"], tuple(d["params"]), d["id"]) for d in manifest["variations"]]
        return cls(vars_, emb, manifest["checksum"], manifest.get("mode", "sdf"))


def nearest(index: EmbeddingIndex, model, query, mode=None):
    """Closest corpus variation to the query image (Euclidean in embedding space)."""
    if len(index) == 0:
        raise ValueError("empty index")
    return index.nearest_embedding(embed(model, query, mode or index.mode))


# --------------------------------------------------------------------------
# fitting


@dataclass
class FitResult:
    variation_id: int
    template: str
    params: tuple
    translation: tuple
    scale: float
    iou: float
    iterations: int
    initial_iou: float = 0.0

    def loops(self):
        local = get_template(self.template).instantiate(self.params)
        return transform_loops(local, self.scale, self.translation)

    def to_json(self):
        return {"variation_id": self.variation_id, "template": self.template, "params": list(self.params),
                "translation": list(self.translation), "scale": self.scale, "iou": self.iou,
                "iterations": self.iterations, "initial_iou": self.initial_iou}

    @classmethod
    def from_json(cls, d):
        return cls(d["variation_id"], d["template"], tuple(d["params"]), tuple(d["translation"]), d["scale"],
                   d["iou"], d["iterations"], d.get("initial_iou", 0.0))


def initial_placement(variation, crop: CropTransform):
    """(scale, tx, ty) placing the variation's template units into image world coordinates."""
    s_n, tx_n, ty_n = variation.placement
    return crop.scale * s_n, crop.offset[0] + crop.scale * tx_n, crop.offset[1] + crop.scale * ty_n


class _Objective:
    """Search on area-weighted IoU (pixel coverage from signed distance), keep the best hard IoU."""

    def __init__(self, template, target):
        self.template = template
        self.target = np.asarray(target, dtype=bool)
        self.res = self.target.shape[0]
        self.px, self.py = pixel_grid(self.res)
        self.calls = 0
        self.best = (-1.0, None)

    def evaluate(self, x):
        k = len(self.template.params)
        params, (s, tx, ty) = tuple(x[:k]), x[k:]
        if s <= 0 or not self.template.in_range(params):
            return 0.0, 0.0
        loops = self.template.instantiate(params)
        if not loops:
            return 0.0, 0.0
        loops = transform_loops(loops, s, (tx, ty))
        hard = iou(even_odd_inside(loops, self.px, self.py), self.target)
        cover = np.clip(0.5 - signed_distance(loops, self.px, self.py) * self.res, 0.0, 1.0)
        tgt = self.target.astype(float)
        soft = np.minimum(cover, tgt).sum() / max(np.maximum(cover, tgt).sum(), 1e-12)
        return hard, soft

    def iou(self, x):
        return self.evaluate(x)[0]

    def __call__(self, x):
        self.calls += 1
        hard, soft = self.evaluate(x)
        if hard > self.best[0]:
            self.best = (hard, np.array(x, dtype=float))
        return -soft


def _simplex(x0, steps):
    return np.vstack([x0] + [x0 + np.eye(len(x0))[i] * steps[i] for i in range(len(x0))])


def fit_parameters(variation, target, crop: CropTransform, max_iter=200, polish=True, x0=None):
    """Nelder-Mead over (template params, scale, tx, ty) maximising IoU with ``target``."""
    template = get_template(variation.template)
    if not template.instantiate(variation.params):
        raise ValueError(f"variation {variation.id} is invalid")
    if x0 is None:
        s0, tx0, ty0 = initial_placement(variation, crop)
        x0 = np.array(list(variation.params) + [s0, tx0, ty0], dtype=float)
    else:
        x0 = np.asarray(x0, dtype=float)
    k = len(template.params)
    steps = [0.05 * (q.hi - q.lo) for q in template.params] + [0.05 * x0[k], 0.05 * crop.scale, 0.05 * crop.scale]
    obj = _Objective(template, target)
    obj(x0)
    init_iou = obj.best[0]
    optimize.minimize(obj, x0, method="Nelder-Mead",
                      options={"initial_simplex": _simplex(x0, steps), "maxiter": max_iter,
                               "xatol": 1e-6, "fatol": 1e-9})
    if polish:
        xb = obj.best[1]
        optimize.minimize(obj, xb, method="Nelder-Mead",
                          options={"initial_simplex": _simplex(xb, [0.2 * s for s in steps]),
                                   "maxiter": max_iter // 2, "xatol": 1e-7, "fatol": 1e-10})
    best_iou, xb = obj.best
    return FitResult(variation.id, template.name, tuple(float(v) for v in xb[:k]), (float(xb[k + 1]), float(xb[k + 2])),
                     float(xb[k]), float(best_iou), obj.calls, float(init_iou))


def fit_vector(fit: FitResult):
    return np.array(list(fit.params) + [fit.scale, *fit.translation], dtype=float)


def retrieve_and_fit(index, model, mask, mode=None, max_iter=200):
    """Crop the mask, retrieve the nearest variation, and fit it to the mask."""
    sdf, tf = crop_square(mask)
    query = sdf if (mode or index.mode) == "sdf" else sdf.binary()
    var, dist = nearest(index, model, query, mode)
    fit = fit_parameters(var, mask, tf, max_iter)
    return fit, dist


# --------------------------------------------------------------------------
# interpolation


def decode_mask(model, z) -> np.ndarray:
    logits = model.decode(ad.Tensor(np.asarray(z, dtype=model.params.dtype)[None])).data[0]
    return logits < 0


def interpolate(z_start, z_end, ts, index, model, max_iter=200):
    """Fit a CAD profile to the decoded shape at each blend weight t."""
    out = []
    prev = None
    for t in ts:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t={t} outside [0, 1]")
        z = (1 - t) * np.asarray(z_start, dtype=np.float64) + t * np.asarray(z_end, dtype=np.float64)
        mask = decode_mask(model, z)
        if not mask.any():
            out.append(None)
            prev = None
            continue
        comps = extract_loops(mask)
        main = max(comps, key=lambda c: c.filled.sum()).filled
        sdf, tf = crop_square(main)
        query = sdf if index.mode == "sdf" else sdf.binary()
        var, dist = index.nearest_embedding(embed(model, query, index.mode))
        x0 = fit_vector(prev) if prev is not None and prev.template == var.template else None
        fit = fit_parameters(var, main, tf, max_iter, x0=x0)
        out.append(fit)
        prev = fit
    return out
