"""Signed distance grids on the unit square/cube.

Conventions used throughout the package:

* values are negative inside the shape;
* cell ``i`` along an axis of an ``N``-cell grid has its center at ``(i + 0.5) / N``;
* 3D grids are indexed ``[x, y, z]``; 2D grids are images indexed ``[row, col]``
  where ``row`` is the ``y`` coordinate and ``col`` is ``x``.
"""

from __future__ import annotations

import heapq
import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

VSDF_MAGIC = b"VSDF"
VSDF_VERSION = 1

# the augmentation radii, as a fraction of the cube edge
ROUNDING_FRACTIONS = (0.025, 0.058, 0.091, 0.125)


class NoInterfaceError(ValueError):
    """The field has a single sign, so there is no zero level set to march from."""

    def __init__(self, msg="no interface"):
        super().__init__(msg)


class ShapeEliminatedError(ValueError):
    def __init__(self, msg="shape eliminated by offset"):
        super().__init__(msg)


@dataclass(frozen=True, eq=False)
class SdfGrid:
    """A 2D or 3D scalar field sampled at cell centers of the unit square/cube."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim not in (2, 3):
            raise ValueError(f"SdfGrid must be 2D or 3D, got rank {v.ndim}")
        if len(set(v.shape)) != 1:
            raise ValueError(f"SdfGrid must be square/cubic, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("SdfGrid values must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def rank(self) -> int:
        return self.values.ndim

    @property
    def dims(self) -> tuple:
        return self.values.shape

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> float:
        return 1.0 / self.n

    def binary(self) -> np.ndarray:
        """Occupancy view, 1 inside."""
        return self.values < 0

    def truncated(self, voxels: float = 4.0) -> "SdfGrid":
        lim = voxels * self.spacing
        return SdfGrid(np.clip(self.values, -lim, lim))

    def __eq__(self, other):
        return isinstance(other, SdfGrid) and np.array_equal(self.values, other.values)


def cell_centers(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


# --------------------------------------------------------------------------
# fast marching


@numba.njit(cache=True)
def _solve_upwind(a, h):
    # a: sorted ascending neighbor values (inf for missing axes)
    u = a[0] + h
    k = 1
    while k < a.shape[0] and u > a[k]:
        k += 1
        s = 0.0
        s2 = 0.0
        for j in range(k):
            s += a[j]
            s2 += a[j] * a[j]
        disc = s * s - k * (s2 - h * h)
        if disc < 0.0:
            disc = 0.0
        u = (s + np.sqrt(disc)) / k
    return u


@numba.njit(cache=True)
def _unravel(i, strides, coord):
    rem = i
    for d in range(strides.shape[0]):
        coord[d] = rem // strides[d]
        rem -= coord[d] * strides[d]


@numba.njit(cache=True)
def _seed(phi, dims, strides, h, dist, frozen, feet):
    # cells adjacent to a sign change get the distance to the plane through the
    # linearly interpolated axis crossings; the foot is that plane's closest point
    ndim = dims.shape[0]
    coord = np.zeros(ndim, dtype=np.int64)
    axis_d = np.empty(ndim)
    axis_s = np.zeros(ndim)
    nband = 0
    for i in range(phi.shape[0]):
        _unravel(i, strides, coord)
        pi = phi[i]
        inside = pi < 0.0
        inv2 = 0.0
        crossed = False
        zero = False
        for d in range(ndim):
            axis_d[d] = np.inf
            axis_s[d] = 0.0
            for sgn in (-1, 1):
                c = coord[d] + sgn
                if c < 0 or c >= dims[d]:
                    continue
                pj = phi[i + sgn * strides[d]]
                if (pj < 0.0) != inside:
                    dd = pi / (pi - pj) * h
                    if dd < axis_d[d]:
                        axis_d[d] = dd
                        axis_s[d] = sgn
            if axis_d[d] < np.inf:
                crossed = True
                if axis_d[d] <= 0.0:
                    zero = True
                else:
                    inv2 += 1.0 / (axis_d[d] * axis_d[d])
        if not crossed:
            continue
        nband += 1
        frozen[i] = True
        dist_i = 0.0 if zero else 1.0 / np.sqrt(inv2)
        dist[i] = dist_i
        for d in range(ndim):
            x = (coord[d] + 0.5) * h
            if axis_d[d] < np.inf and not zero:
                x += axis_s[d] * dist_i * dist_i / axis_d[d]
            feet[i, d] = x
    return nband


@numba.njit(cache=True)
def _march(phi, dims, h, closest_point):
    ndim = dims.shape[0]
    total = phi.shape[0]
    strides = np.ones(ndim, dtype=np.int64)
    for d in range(ndim - 2, -1, -1):
        strides[d] = strides[d + 1] * dims[d + 1]

    dist = np.full(total, np.inf)
    frozen = np.zeros(total, dtype=np.bool_)
    feet = np.zeros((total, ndim))
    trial_foot = np.zeros((total, ndim))
    nband = _seed(phi, dims, strides, h, dist, frozen, feet)
    if nband == 0:
        return dist, nband

    coord = np.zeros(ndim, dtype=np.int64)
    a = np.empty(ndim)
    heap = [(0.0, np.int64(0))]
    heap.pop()
    for i in np.flatnonzero(frozen):
        _relax(i, dims, strides, h, dist, frozen, feet, trial_foot, heap, coord, a, closest_point)
    while len(heap) > 0:
        du, i = heapq.heappop(heap)
        if frozen[i] or du > dist[i]:
            continue
        frozen[i] = True
        feet[i] = trial_foot[i]
        _relax(i, dims, strides, h, dist, frozen, feet, trial_foot, heap, coord, a, closest_point)
    return dist, nband


@numba.njit(cache=True)
def _relax(i, dims, strides, h, dist, frozen, feet, trial_foot, heap, coord, a, closest_point):
    ndim = dims.shape[0]
    _unravel(i, strides, coord)
    if not closest_point:
        for d in range(ndim):
            for sgn in (-1, 1):
                c = coord[d] + sgn
                if c < 0 or c >= dims[d]:
                    continue
                j = i + sgn * strides[d]
                if frozen[j]:
                    continue
                u = _update(j, dist, frozen, dims, strides, h, a)
                if u < dist[j]:
                    dist[j] = u
                    heapq.heappush(heap, (u, j))
        return
    # closest-point mode offers this cell's foot to the whole 3^d neighbourhood
    off = np.zeros(ndim, dtype=np.int64)
    for k in range(3 ** ndim):
        rem = k
        j = i
        inside = True
        for d in range(ndim):
            off[d] = rem % 3 - 1
            rem //= 3
            c = coord[d] + off[d]
            if c < 0 or c >= dims[d]:
                inside = False
                break
            j += off[d] * strides[d]
        if not inside or j == i or frozen[j]:
            continue
        u = 0.0
        for e in range(ndim):
            xe = (coord[e] + off[e] + 0.5) * h
            u += (xe - feet[i, e]) ** 2
        u = np.sqrt(u)
        if u < dist[j]:
            dist[j] = u
            trial_foot[j] = feet[i]
            heapq.heappush(heap, (u, j))


@numba.njit(cache=True)
def _update(j, dist, frozen, dims, strides, h, a):
    ndim = dims.shape[0]
    rem = j
    for d in range(ndim):
        c = rem // strides[d]
        rem -= c * strides[d]
        best = np.inf
        if c > 0 and frozen[j - strides[d]]:
            best = dist[j - strides[d]]
        if c < dims[d] - 1 and frozen[j + strides[d]]:
            v = dist[j + strides[d]]
            if v < best:
                best = v
        a[d] = best
    a.sort()
    return _solve_upwind(a, h)


def fast_march_reinit(grid: SdfGrid, method: str = "closest_point") -> SdfGrid:
    """Rebuild a signed distance field with the same zero level set.

    Cells next to a sign change are seeded from a linear interpolation of the
    crossing along each axis. The rest is filled in heap order, either carrying
    the nearest interface point along (``"closest_point"``) or with the
    first-order upwind Eikonal update (``"upwind"``), which overestimates
    distances around sharp corners by a cell or two. Signs are kept as they
    are in the input.
    """
    if method not in ("closest_point", "upwind"):
        raise ValueError(f"unknown method {method!r}")
    phi = np.ascontiguousarray(grid.values, dtype=np.float64)
    dims = np.array(phi.shape, dtype=np.int64)
    dist, nband = _march(phi.ravel(), dims, grid.spacing, method == "closest_point")
    if nband == 0:
        raise NoInterfaceError()
    dist = dist.reshape(phi.shape)
    return SdfGrid(np.where(phi < 0, -dist, dist))


def round_offset(grid: SdfGrid, radius: float) -> SdfGrid:
    """Morphological opening by a ball: offset inward, reinit, offset outward, reinit."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    eroded = grid.values + radius
    if not np.any(eroded < 0):
        raise ShapeEliminatedError()
    inner = fast_march_reinit(SdfGrid(eroded))
    return fast_march_reinit(SdfGrid(inner.values - radius))


def rounding_radii_voxels(n: int = 64) -> tuple:
    return tuple(f * n for f in ROUNDING_FRACTIONS)


# --------------------------------------------------------------------------
# cube symmetries


@dataclass(frozen=True)
class Rotation24:
    """Orientation-preserving cube symmetry as a signed axis permutation.

    Maps a point ``p`` (relative to the cube center) to ``q`` with
    ``q[i] = signs[i] * p[perm[i]]``.
    """

    perm: tuple = (0, 1, 2)
    signs: tuple = (1, 1, 1)

    def __post_init__(self):
        if sorted(self.perm) != [0, 1, 2] or any(s not in (1, -1) for s in self.signs):
            raise ValueError(f"not a signed permutation: {self.perm}, {self.signs}")
        if round(np.linalg.det(self.matrix())) != 1:
            raise ValueError("rotation must have determinant +1")

    def matrix(self) -> np.ndarray:
        m = np.zeros((3, 3), dtype=int)
        for i, (p, s) in enumerate(zip(self.perm, self.signs)):
            m[i, p] = s
        return m

    @classmethod
    def from_matrix(cls, m) -> "Rotation24":
        m = np.asarray(m)
        perm = tuple(int(np.flatnonzero(m[i])[0]) for i in range(3))
        signs = tuple(int(m[i, perm[i]]) for i in range(3))
        return cls(perm, signs)

    def compose(self, other: "Rotation24") -> "Rotation24":
        """``self ∘ other``: apply ``other`` first."""
        return Rotation24.from_matrix(self.matrix() @ other.matrix())

    def inverse(self) -> "Rotation24":
        return Rotation24.from_matrix(self.matrix().T)

    def is_identity(self) -> bool:
        return self.perm == (0, 1, 2) and self.signs == (1, 1, 1)

    def apply_point(self, p):
        p = np.asarray(p, dtype=float) - 0.5
        return self.matrix() @ p + 0.5

    def to_json(self):
        return {"perm": list(self.perm), "signs": list(self.signs)}

    @classmethod
    def from_json(cls, d):
        return cls(tuple(d["perm"]), tuple(d["signs"]))


IDENTITY = Rotation24()
ROT90_X = Rotation24((0, 2, 1), (1, -1, 1))  # (x, y, z) -> (x, -z, y)
ROT90_Y = Rotation24((2, 1, 0), (1, 1, -1))  # (x, y, z) -> (z, y, -x)


def all_rotations() -> list:
    """The 24 rotations in a fixed enumeration order, identity first."""
    out = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            m = np.zeros((3, 3), dtype=int)
            for i in range(3):
                m[i, perm[i]] = signs[i]
            if round(np.linalg.det(m)) == 1:
                out.append(Rotation24(perm, signs))
    return out


def rotate_array(values: np.ndarray, rot: Rotation24) -> np.ndarray:
    if values.ndim != 3 or len(set(values.shape)) != 1:
        raise ValueError("rotation needs a cubic 3D grid")
    out = np.transpose(values, rot.perm)
    flip = tuple(i for i, s in enumerate(rot.signs) if s < 0)
    if flip:
        out = np.flip(out, axis=flip)
    return np.ascontiguousarray(out)


def rotate_grid(grid, rot: Rotation24):
    """Rotate an SdfGrid or a boolean array by a cube symmetry."""
    if isinstance(grid, SdfGrid):
        return SdfGrid(rotate_array(grid.values, rot))
    return rotate_array(np.asarray(grid), rot)


# --------------------------------------------------------------------------
# metrics


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Jaccard index of two occupancy grids; 1.0 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"dim mismatch: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def iou_best_rotation(target: np.ndarray, candidate: np.ndarray):
    """Best IoU over the 24 rotations of the target; first maximum wins ties."""
    target = np.asarray(target, dtype=bool)
    candidate = np.asarray(candidate, dtype=bool)
    if target.shape != candidate.shape:
        raise ValueError(f"dim mismatch: {target.shape} vs {candidate.shape}")
    best, best_rot = -1.0, None
    for rot in all_rotations():
        v = iou(rotate_array(target, rot), candidate)
        if v > best:
            best, best_rot = v, rot
    return best, best_rot


# --------------------------------------------------------------------------
# meshing


@dataclass
class Mesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=int))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def area(self) -> float:
        if self.is_empty:
            return 0.0
        v = self.vertices[self.faces]
        return 0.5 * float(np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1).sum())

    def to_obj(self) -> str:
        lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in self.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in self.faces]
        return "\n".join(lines) + "\n"

    def save_obj(self, path):
        Path(path).write_text(self.to_obj())


def marching_cubes(grid, level: float = 0.0) -> Mesh:
    """Triangulate the level set in world coordinates (classic 256-case table)."""
    from skimage.measure import marching_cubes as _mc

    values = grid.values if isinstance(grid, SdfGrid) else np.asarray(grid, dtype=float)
    if not (values.min() < level < values.max()):
        return Mesh()
    h = 1.0 / values.shape[0]
    verts, faces, _, _ = _mc(values, level=level, spacing=(h, h, h), method="lorensen")
    return Mesh(verts + 0.5 * h, faces.astype(int))


# --------------------------------------------------------------------------
# .vsdf files


def save_vsdf(path, grid) -> None:
    values = grid.values if isinstance(grid, SdfGrid) else np.asarray(grid, dtype=np.float32)
    rank = values.ndim
    if rank == 2:
        dims = (values.shape[1], values.shape[0])
        flat = np.ascontiguousarray(values, dtype="<f4").ravel(order="C")
    elif rank == 3:
        dims = values.shape
        flat = np.asarray(values, dtype="<f4").ravel(order="F")
    else:
        raise ValueError("rank must be 2 or 3")
    header = VSDF_MAGIC + struct.pack(f"<IB{rank}I", VSDF_VERSION, rank, *dims)
    Path(path).write_bytes(header + flat.tobytes())


def load_vsdf_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != VSDF_MAGIC:
        raise ValueError(f"{path}: not a VSDF file")
    version, rank = struct.unpack_from("<IB", raw, 4)
    if version != VSDF_VERSION or rank not in (2, 3):
        raise ValueError(f"{path}: unsupported version {version} / rank {rank}")
    dims = struct.unpack_from(f"<{rank}I", raw, 9)
    off = 9 + 4 * rank
    flat = np.frombuffer(raw, dtype="<f4", offset=off, count=int(np.prod(dims)))
    if rank == 2:
        return flat.reshape(dims[1], dims[0]).astype(np.float64)
    return flat.reshape(dims, order="F").astype(np.float64)


def load_vsdf(path) -> SdfGrid:
    return SdfGrid(load_vsdf_array(path))
