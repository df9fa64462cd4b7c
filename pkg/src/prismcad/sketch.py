"""Parametric sketch templates built from lines and arcs.

A loop is a tuple of curves where each curve ends where the next one starts.
A profile is a list of loops filled with the even-odd rule, so holes are just
extra loops. Template geometry lives in its own units; `normalize` places it
into the unit square the way `retrieval.crop_square` frames a mask.
"""

from __future__ import annotations

import heapq
import json
import math
import re
from dataclasses import dataclass
from functools import cached_property

import networkx as nx
import numpy as np

from .sdf import NoInterfaceError, SdfGrid, cell_centers, fast_march_reinit

CLOSURE_TOL = 1e-9
ANGLE_TOL = 1e-6
CROP_MARGIN = 0.1
TAU = 2 * math.pi


@dataclass(frozen=True)
class Line:
    p0: tuple
    p1: tuple

    @property
    def start(self):
        return self.p0

    @property
    def end(self):
        return self.p1

    def direction(self):
        d = np.subtract(self.p1, self.p0)
        return d / np.linalg.norm(d)

    def start_tangent(self):
        return self.direction()

    def end_tangent(self):
        return self.direction()

    def length(self):
        return float(np.hypot(*np.subtract(self.p1, self.p0)))

    def is_axis_aligned(self, tol=ANGLE_TOL):
        dx, dy = np.subtract(self.p1, self.p0)
        ang = math.atan2(dy, dx) % (math.pi / 2)
        return min(ang, math.pi / 2 - ang) < tol

    def reversed(self):
        return Line(self.p1, self.p0)

    def to_json(self):
        return {"type": "line", "p0": list(self.p0), "p1": list(self.p1)}


@dataclass(frozen=True)
class Arc:
    """Circular arc; ``sweep`` is signed (positive counter-clockwise)."""

    center: tuple
    radius: float
    start_angle: float
    sweep: float

    def point(self, theta):
        return (self.center[0] + self.radius * math.cos(theta), self.center[1] + self.radius * math.sin(theta))

    @property
    def start(self):
        return self.point(self.start_angle)

    @property
    def end(self):
        return self.point(self.start_angle + self.sweep)

    @property
    def end_angle(self):
        return self.start_angle + self.sweep

    def _tangent(self, theta):
        s = 1.0 if self.sweep > 0 else -1.0
        return np.array([-math.sin(theta), math.cos(theta)]) * s

    def start_tangent(self):
        return self._tangent(self.start_angle)

    def end_tangent(self):
        return self._tangent(self.end_angle)

    def length(self):
        return abs(self.sweep) * self.radius

    def is_full(self):
        return abs(abs(self.sweep) - TAU) < 1e-12

    def contains_angle(self, phi, tol=1e-9):
        """Whether the angle ``phi`` lies on the arc (vectorised)."""
        if self.is_full():
            return np.ones_like(np.asarray(phi, dtype=float), dtype=bool)
        if self.sweep > 0:
            t = np.mod(np.asarray(phi) - self.start_angle, TAU)
        else:
            t = np.mod(self.start_angle - np.asarray(phi), TAU)
        tol_ang = tol / max(self.radius, 1e-12)
        return (t <= abs(self.sweep) + tol_ang) | (t >= TAU - tol_ang)

    def reversed(self):
        return Arc(self.center, self.radius, self.end_angle, -self.sweep)

    def to_json(self):
        return {"type": "arc", "center": list(self.center), "radius": self.radius,
                "start_angle": self.start_angle, "sweep": self.sweep}


def curve_from_json(d):
    if d["type"] == "line":
        return Line(tuple(d["p0"]), tuple(d["p1"]))
    return Arc(tuple(d["center"]), d["radius"], d["start_angle"], d["sweep"])


def loops_to_json(loops):
    return [[c.to_json() for c in loop] for loop in loops]


def loops_from_json(data):
    return [tuple(curve_from_json(c) for c in loop) for loop in data]


class OpenLoopError(ValueError):
    pass


def is_closed(loop, tol=CLOSURE_TOL) -> bool:
    if not loop:
        return False
    for a, b in zip(loop, loop[1:] + loop[:1]):
        if math.dist(a.end, b.start) > tol:
            return False
    return True


def check_closed(loops):
    for i, loop in enumerate(loops):
        if not is_closed(tuple(loop)):
            raise OpenLoopError(f"loop {i} is not closed")


# --------------------------------------------------------------------------
# transforms


def transform_curve(c, scale=1.0, offset=(0.0, 0.0), mat=((1, 0), (0, 1))):
    """Apply ``p -> scale * mat @ p + offset`` with ``mat`` a signed permutation/rotation."""
    m = np.asarray(mat, dtype=float)

    def f(p):
        q = scale * (m @ np.asarray(p, dtype=float)) + np.asarray(offset, dtype=float)
        return (float(q[0]), float(q[1]))

    if isinstance(c, Line):
        return Line(f(c.p0), f(c.p1))
    det = round(np.linalg.det(m))
    center = f(c.center)
    s = f(c.start)
    theta = math.atan2(s[1] - center[1], s[0] - center[0])
    return Arc(center, c.radius * scale, theta, c.sweep * det)


def transform_loops(loops, scale=1.0, offset=(0.0, 0.0), mat=((1, 0), (0, 1))):
    return [tuple(transform_curve(c, scale, offset, mat) for c in loop) for loop in loops]


def bbox(loops):
    xs, ys = [], []
    for loop in loops:
        for c in loop:
            xs += [c.start[0], c.end[0]]
            ys += [c.start[1], c.end[1]]
            if isinstance(c, Arc):
                for k in range(4):
                    phi = k * math.pi / 2
                    if c.contains_angle(phi, 0.0):
                        p = c.point(phi)
                        xs.append(p[0])
                        ys.append(p[1])
    return min(xs), min(ys), max(xs), max(ys)


def normalize(loops, margin=CROP_MARGIN):
    """Center the loops in the unit square with the longest side at 1/(1 + 2*margin)."""
    x0, y0, x1, y1 = bbox(loops)
    side = max(x1 - x0, y1 - y0)
    s = 1.0 / ((1 + 2 * margin) * side)
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    return transform_loops(loops, s, (0.5 - s * cx, 0.5 - s * cy)), (s, 0.5 - s * cx, 0.5 - s * cy)


# --------------------------------------------------------------------------
# point membership


def _monotone_pieces(loops):
    """Split every curve into pieces monotone in y (lines stay whole)."""
    lines, arcs = [], []
    for loop in loops:
        for c in loop:
            if isinstance(c, Line):
                lines.append((*c.p0, *c.p1))
                continue
            a0, a1 = sorted((c.start_angle, c.end_angle))
            k0 = math.floor((a0 - math.pi / 2) / math.pi) + 1
            cuts = [a0]
            k = k0
            while math.pi / 2 + k * math.pi < a1:
                cuts.append(math.pi / 2 + k * math.pi)
                k += 1
            cuts.append(a1)
            for ta, tb in zip(cuts[:-1], cuts[1:]):
                if tb - ta <= 0:
                    continue
                mid = 0.5 * (ta + tb)
                arcs.append((c.center[0], c.center[1], c.radius, ta, tb, 1.0 if math.cos(mid) >= 0 else -1.0))
    return np.array(lines, dtype=float).reshape(-1, 4), np.array(arcs, dtype=float).reshape(-1, 6)


def even_odd_inside(loops, px, py):
    """Even-odd rule from crossings of a ray towards +x (half-open in y at vertices)."""
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    lines, arcs = _monotone_pieces(loops)
    parity = np.zeros(np.broadcast(px, py).shape, dtype=bool)
    for x0, y0, x1, y1 in lines:
        if y0 == y1:
            continue
        cross = (y0 > py) != (y1 > py)
        xi = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        parity ^= cross & (px < xi)
    for cx, cy, r, ta, tb, side in arcs:
        ya = cy + r * math.sin(ta)
        yb = cy + r * math.sin(tb)
        cross = (ya > py) != (yb > py)
        dy = np.clip(py - cy, -r, r)
        xi = cx + side * np.sqrt(np.maximum(r * r - dy * dy, 0.0))
        parity ^= cross & (px < xi)
    return parity


def _wrap(a):
    return (a + math.pi) % TAU - math.pi


def winding_numbers(loop, px, py):
    """Winding number of one loop around each point, by summing subtended angles."""
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    total = np.zeros(np.broadcast(px, py).shape)
    for c in loop:
        ax, ay = c.start
        bx, by = c.end
        chord = _wrap(np.arctan2(by - py, bx - px) - np.arctan2(ay - py, ax - px))
        if isinstance(c, Line):
            total += chord
            continue
        cx, cy = c.center
        in_circle = (px - cx) ** 2 + (py - cy) ** 2 < c.radius ** 2
        if c.is_full():
            seg = in_circle
        else:
            mx, my = c.point(c.start_angle + c.sweep / 2)
            side_arc = (bx - ax) * (my - ay) - (by - ay) * (mx - ax)
            side_p = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
            seg = in_circle & (side_p * side_arc > 0)
        total += chord + np.where(seg, math.copysign(TAU, c.sweep), 0.0)
    return np.rint(total / TAU).astype(int)


def winding_inside(loops, px, py):
    """Inside test from per-loop winding numbers combined with the even-odd rule."""
    inside = np.zeros(np.broadcast(np.asarray(px), np.asarray(py)).shape, dtype=bool)
    for loop in loops:
        inside ^= winding_numbers(loop, px, py) != 0
    return inside


def distance_to_curves(loops, px, py):
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    best = np.full(np.broadcast(px, py).shape, np.inf)
    for loop in loops:
        for c in loop:
            if isinstance(c, Line):
                (x0, y0), (x1, y1) = c.p0, c.p1
                dx, dy = x1 - x0, y1 - y0
                t = np.clip(((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
                d = np.hypot(px - x0 - t * dx, py - y0 - t * dy)
            else:
                cx, cy = c.center
                phi = np.arctan2(py - cy, px - cx)
                on = c.contains_angle(phi, 0.0)
                d_circ = np.abs(np.hypot(px - cx, py - cy) - c.radius)
                d_end = np.minimum(np.hypot(px - c.start[0], py - c.start[1]), np.hypot(px - c.end[0], py - c.end[1]))
                d = np.where(on, d_circ, d_end)
            best = np.minimum(best, d)
    return best


def signed_distance(loops, px, py):
    d = distance_to_curves(loops, px, py)
    return np.where(winding_inside(loops, px, py), -d, d)


def pixel_grid(res):
    c = cell_centers(res)
    return np.meshgrid(c, c)  # (px[row, col], py[row, col])


def rasterize(loops, res=128) -> np.ndarray:
    """Binary image [row, col] of pixel centers inside the loops (even-odd)."""
    check_closed(loops)
    px, py = pixel_grid(res)
    return even_odd_inside(loops, px, py)


def sdf_from_binary(mask) -> SdfGrid:
    """Signed distance image whose zero level set follows the mask's pixel edges."""
    mask = np.asarray(mask, dtype=bool)
    if mask.all() or not mask.any():
        raise NoInterfaceError()
    h = 1.0 / mask.shape[0]
    return fast_march_reinit(SdfGrid(np.where(mask, -0.5 * h, 0.5 * h)))


# --------------------------------------------------------------------------
# intersections


def _seg_seg(p1, p2, q1, q2, tol):
    p1, p2, q1, q2 = map(np.asarray, (p1, p2, q1, q2))
    r, s = p2 - p1, q2 - q1
    denom = r[0] * s[1] - r[1] * s[0]
    qp = q1 - p1
    if abs(denom) < tol * max(np.linalg.norm(r) * np.linalg.norm(s), tol):
        if abs(qp[0] * r[1] - qp[1] * r[0]) > tol * max(np.linalg.norm(r), tol):
            return []
        rr = r @ r
        t0, t1 = sorted(((q1 - p1) @ r / rr, (q2 - p1) @ r / rr))
        lo, hi = max(t0, 0.0), min(t1, 1.0)
        if lo > hi + tol:
            return []
        return [p1 + lo * r, p1 + hi * r]
    t = (qp[0] * s[1] - qp[1] * s[0]) / denom
    u = (qp[0] * r[1] - qp[1] * r[0]) / denom
    lr, ls = np.linalg.norm(r), np.linalg.norm(s)
    if -tol / lr <= t <= 1 + tol / lr and -tol / ls <= u <= 1 + tol / ls:
        return [p1 + t * r]
    return []


def _seg_circle(p1, p2, c, r, tol):
    p1, p2, c = map(np.asarray, (p1, p2, c))
    d = p2 - p1
    f = p1 - c
    a = d @ d
    b = 2 * f @ d
    cc = f @ f - r * r
    disc = b * b - 4 * a * cc
    # tangency within tol counts as contact
    if disc < 0:
        if disc > -4 * a * (2 * r * tol):
            disc = 0.0
        else:
            return []
    sq = math.sqrt(disc)
    out = []
    ld = math.sqrt(a)
    for t in {(-b - sq) / (2 * a), (-b + sq) / (2 * a)}:
        if -tol / ld <= t <= 1 + tol / ld:
            out.append(p1 + t * d)
    return out


def _circle_circle(c1, r1, c2, r2, tol):
    c1, c2 = np.asarray(c1), np.asarray(c2)
    d = float(np.linalg.norm(c2 - c1))
    if d < tol:
        return None if abs(r1 - r2) < tol else []
    if d > r1 + r2 + tol or d < abs(r1 - r2) - tol:
        return []
    a = (r1 * r1 - r2 * r2 + d * d) / (2 * d)
    h2 = r1 * r1 - a * a
    h = math.sqrt(max(h2, 0.0))
    base = c1 + a * (c2 - c1) / d
    perp = np.array([-(c2 - c1)[1], (c2 - c1)[0]]) / d
    if h < tol:
        return [base]
    return [base + h * perp, base - h * perp]


def _on_arc(arc, p, tol):
    phi = math.atan2(p[1] - arc.center[1], p[0] - arc.center[0])
    return bool(arc.contains_angle(phi, tol))


def curve_intersections(a, b, tol=1e-9):
    """Contact points between two curves; overlapping pieces yield their end points."""
    if isinstance(a, Line) and isinstance(b, Line):
        return _seg_seg(a.p0, a.p1, b.p0, b.p1, tol)
    if isinstance(a, Arc) and isinstance(b, Line):
        a, b = b, a
    if isinstance(a, Line):
        pts = _seg_circle(a.p0, a.p1, b.center, b.radius, tol)
        return [p for p in pts if _on_arc(b, p, tol)]
    pts = _circle_circle(a.center, a.radius, b.center, b.radius, tol)
    if pts is None:
        # same circle: report arc end points lying on the other arc
        cand = [np.asarray(p) for p in (a.start, a.end, b.start, b.end)]
        pts = [p for p in cand if _on_arc(a, p, tol) and _on_arc(b, p, tol)]
        if not a.is_full() and not b.is_full():
            mid_a = np.asarray(a.point(a.start_angle + a.sweep / 2))
            mid_b = np.asarray(b.point(b.start_angle + b.sweep / 2))
            if _on_arc(b, mid_a, tol):
                pts.append(mid_a)
            if _on_arc(a, mid_b, tol):
                pts.append(mid_b)
        else:
            pts.append(np.asarray(a.start))
        return pts
    return [p for p in pts if _on_arc(a, p, tol) and _on_arc(b, p, tol)]


def _shared_points(a, b, tol):
    pts = []
    for p in (a.start, a.end):
        for q in (b.start, b.end):
            if math.dist(p, q) <= tol:
                pts.append(np.asarray(p))
    return pts


def _contacts(a, b, adjacent, tol):
    pts = curve_intersections(a, b, tol)
    if not adjacent:
        return bool(pts)
    shared = _shared_points(a, b, 1e3 * tol)
    return any(all(np.linalg.norm(p - s) > 1e3 * tol for s in shared) for p in pts)


def loop_self_intersects(loop, tol=1e-9) -> bool:
    n = len(loop)
    for i in range(n):
        for j in range(i + 1, n):
            adjacent = j == i + 1 or (i == 0 and j == n - 1)
            if _contacts(loop[i], loop[j], adjacent, tol):
                return True
    return False


def loops_touch(a, b, tol=1e-9) -> bool:
    return any(curve_intersections(ca, cb, tol) for ca in a for cb in b)


def self_intersects(loops, tol=1e-9) -> bool:
    """True if a loop crosses itself or any two loops cross or touch."""
    for loop in loops:
        if loop_self_intersects(loop, tol):
            return True
    for i in range(len(loops)):
        for j in range(i + 1, len(loops)):
            if loops_touch(loops[i], loops[j], tol):
                return True
    return False


# --------------------------------------------------------------------------
# loop graphs and hashing


class DegenerateLoopError(ValueError):
    pass


def loop_graph(loop, tol=ANGLE_TOL) -> nx.Graph:
    """Cycle graph: curves as nodes, adjacency as edges, labelled for hashing."""
    n = len(loop)
    if n < 3 and all(isinstance(c, Line) for c in loop):
        raise DegenerateLoopError(f"a loop of {n} lines is degenerate")
    g = nx.Graph()
    for i, c in enumerate(loop):
        if isinstance(c, Line):
            label = "line-axis" if c.is_axis_aligned(tol) else "line"
        else:
            label = "arc"
        g.add_node(i, label=label)
    for i in range(n):
        a, b = loop[i], loop[(i + 1) % n]
        cos = float(np.clip(a.end_tangent() @ b.start_tangent(), -1.0, 1.0))
        g.add_edge(i, (i + 1) % n, label="tangent" if math.acos(cos) < tol else "corner")
    return g


def wl_hash(loops, iterations=3) -> str:
    """64-bit Weisfeiler-Lehman digest of the loop graphs (hex string)."""
    if loops and isinstance(loops[0], (Line, Arc)):
        loops = [tuple(loops)]
    hashes = sorted(nx.weisfeiler_lehman_graph_hash(loop_graph(loop), edge_attr="label", node_attr="label",
                                                    iterations=iterations, digest_size=8)
                    for loop in loops)
    if len(hashes) == 1:
        return hashes[0]
    import hashlib
    return hashlib.blake2b("|".join(hashes).encode(), digest_size=8).hexdigest()


# --------------------------------------------------------------------------
# templates


@dataclass(frozen=True)
class Param:
    name: str
    lo: float
    hi: float
    step: float
    seed: float


@dataclass(frozen=True)
class Invalid:
    reason: str  # "self-intersection" | "constraint failure"
    detail: str = ""

    def __bool__(self):
        return False


class Template:
    name = ""
    params: tuple = ()

    def build(self, p: dict):
        raise NotImplementedError

    def check(self, p: dict):
        """Return an `Invalid` for parameter sets the constraints cannot realise."""
        return None

    @property
    def seed(self):
        return tuple(q.seed for q in self.params)

    def in_range(self, values, tol=1e-9) -> bool:
        return len(values) == len(self.params) and all(q.lo - tol <= v <= q.hi + tol for q, v in zip(self.params, values))

    def instantiate(self, values):
        values = tuple(float(v) for v in values)
        if not self.in_range(values):
            raise ValueError(f"{self.name}: parameters {values} out of range")
        p = {q.name: v for q, v in zip(self.params, values)}
        bad = self.check(p)
        if bad is not None:
            return bad
        loops = self.build(p)
        if self_intersects(loops):
            return Invalid("self-intersection")
        return loops


def _poly(points):
    pts = [tuple(map(float, p)) for p in points]
    return tuple(Line(a, b) for a, b in zip(pts, pts[1:] + pts[:1]))


class Circle(Template):
    name = "circle"
    params = ()

    def build(self, p):
        return [(Arc((0.0, 0.0), 0.5, 0.0, TAU),)]


class Rectangle(Template):
    name = "rectangle"
    params = (Param("w", 0.1, 1.0, 0.02, 0.5), Param("h", 0.1, 1.0, 0.02, 0.3))

    def build(self, p):
        w, h = p["w"] / 2, p["h"] / 2
        return [_poly([(-w, -h), (w, -h), (w, h), (-w, h)])]


class RoundedRectangle(Template):
    name = "rounded_rectangle"
    params = (Param("w", 0.1, 1.0, 0.05, 0.6), Param("h", 0.1, 1.0, 0.05, 0.4), Param("r", 0.02, 0.5, 0.02, 0.08))

    def check(self, p):
        if 2 * p["r"] >= min(p["w"], p["h"]) - 1e-9:
            return Invalid("constraint failure", "corner radius leaves no straight edge")

    def build(self, p):
        w, h, r = p["w"] / 2, p["h"] / 2, p["r"]
        q = math.pi / 2
        return [(
            Line((-w + r, -h), (w - r, -h)), Arc((w - r, -h + r), r, -q, q),
            Line((w, -h + r), (w, h - r)), Arc((w - r, h - r), r, 0.0, q),
            Line((w - r, h), (-w + r, h)), Arc((-w + r, h - r), r, q, q),
            Line((-w, h - r), (-w, -h + r)), Arc((-w + r, -h + r), r, math.pi, q),
        )]


class LShape(Template):
    name = "l_shape"
    params = (Param("w", 0.2, 1.0, 0.05, 0.6), Param("h", 0.2, 1.0, 0.05, 0.8),
              Param("tw", 0.05, 0.95, 0.05, 0.2), Param("th", 0.05, 0.95, 0.05, 0.2))

    def check(self, p):
        if p["tw"] >= p["w"] - 1e-9 or p["th"] >= p["h"] - 1e-9:
            return Invalid("self-intersection", "inner leg exceeds the outer edge")

    def build(self, p):
        w, h, tw, th = p["w"], p["h"], p["tw"], p["th"]
        return [_poly([(0, 0), (w, 0), (w, th), (tw, th), (tw, h), (0, h)])]


class Slot(Template):
    name = "slot"
    params = (Param("length", 0.1, 1.0, 0.05, 0.8), Param("width", 0.1, 0.6, 0.05, 0.3))

    def check(self, p):
        if p["length"] <= p["width"] + 1e-9:
            return Invalid("constraint failure", "arcs overlap")

    def build(self, p):
        r = p["width"] / 2
        a = (p["length"] - p["width"]) / 2
        q = math.pi / 2
        return [(Line((-a, -r), (a, -r)), Arc((a, 0.0), r, -q, math.pi),
                 Line((a, r), (-a, r)), Arc((-a, 0.0), r, q, math.pi))]


class Hexagon(Template):
    name = "hexagon"
    params = (Param("w", 0.3, 1.2, 0.05, 1.0), Param("h", 0.2, 1.2, 0.05, math.sqrt(3) / 2),
              Param("t", 0.05, 1.15, 0.05, 0.5))

    def check(self, p):
        if p["t"] >= p["w"] - 1e-9:
            return Invalid("constraint failure", "top edge longer than the width")

    def build(self, p):
        w, h, t = p["w"] / 2, p["h"] / 2, p["t"] / 2
        return [_poly([(-w, 0), (-t, -h), (t, -h), (w, 0), (t, h), (-t, h)])]


class UShape(Template):
    name = "u_shape"
    params = (Param("w", 0.2, 1.0, 0.05, 0.8), Param("h", 0.2, 1.0, 0.05, 0.6),
              Param("gw", 0.05, 0.95, 0.05, 0.4), Param("gh", 0.05, 0.95, 0.05, 0.4))

    def check(self, p):
        if p["gw"] >= p["w"] - 1e-9 or p["gh"] >= p["h"] - 1e-9:
            return Invalid("self-intersection", "gap exceeds the outline")

    def build(self, p):
        w, h, gw, gh = p["w"], p["h"], p["gw"], p["gh"]
        a, b = (w - gw) / 2, (w + gw) / 2
        return [_poly([(0, 0), (w, 0), (w, h), (b, h), (b, h - gh), (a, h - gh), (a, h), (0, h)])]


class DShape(Template):
    name = "d_shape"
    params = (Param("length", 0.05, 1.0, 0.05, 0.4), Param("h", 0.1, 1.0, 0.05, 0.6))

    def build(self, p):
        L, r = p["length"], p["h"] / 2
        q = math.pi / 2
        return [(Line((0.0, -r), (L, -r)), Arc((L, 0.0), r, -q, math.pi),
                 Line((L, r), (0.0, r)), Line((0.0, r), (0.0, -r)))]


TEMPLATES = {t.name: t for t in (Circle(), Rectangle(), RoundedRectangle(), LShape(), Slot(), Hexagon(),
                                 UShape(), DShape())}

# templates whose variations keep one graph hash
HASH_STABLE = ("rectangle", "rounded_rectangle", "l_shape", "slot", "hexagon", "u_shape", "d_shape")


def get_template(name) -> Template:
    try:
        return TEMPLATES[name]
    except KeyError:
        raise KeyError(f"unknown template {name!r}; known: {sorted(TEMPLATES)}") from None


def instantiate(template, params):
    if isinstance(template, str):
        template = get_template(template)
    return template.instantiate(params)


@dataclass(frozen=True)
class SketchVariation:
    template: str
    params: tuple
    id: int = -1

    @cached_property
    def loops(self):
        loops = instantiate(self.template, self.params)
        if not loops:
            raise ValueError(f"{self.template}{self.params}: {loops.reason}")
        return loops

    @cached_property
    def placement(self):
        return normalize(self.loops)[1]

    @cached_property
    def normalized_loops(self):
        return normalize(self.loops)[0]

    def raster(self, res=128):
        return rasterize(self.normalized_loops, res)

    def sdf(self, res=128) -> SdfGrid:
        return sdf_from_binary(self.raster(res))

    def hash(self):
        return wl_hash(self.loops)

    def to_json(self):
        return {"id": self.id, "template": self.template, "params": list(self.params)}


def flood_variations(template, seed_params=None, max_n=30):
    """Dijkstra-style flood over the parameter increment lattice.

    Priority is the L1 step distance from the seed, ties broken by the
    lexicographic order of the lattice offset. Invalid parameter sets are
    dropped and do not expand further.
    """
    if isinstance(template, str):
        template = get_template(template)
    seed = tuple(seed_params) if seed_params is not None else template.seed
    first = template.instantiate(seed)
    if not first:
        raise ValueError(f"{template.name}: invalid seed ({first.reason})")
    dim = len(template.params)
    start = (0,) * dim
    heap = [(0, start)]
    seen = {start}
    out = []
    while heap and len(out) < max_n:
        dist, k = heapq.heappop(heap)
        values = tuple(round(s + ki * q.step, 10) for s, ki, q in zip(seed, k, template.params))
        if k != start and not template.instantiate(values):
            continue
        out.append(SketchVariation(template.name, values))
        for i in range(dim):
            for d in (-1, 1):
                nk = k[:i] + (k[i] + d,) + k[i + 1:]
                if nk in seen:
                    continue
                nv = seed[i] + nk[i] * template.params[i].step
                if not (template.params[i].lo - 1e-9 <= nv <= template.params[i].hi + 1e-9):
                    continue
                seen.add(nk)
                heapq.heappush(heap, (dist + 1, nk))
    return out


PAPER_COUNTS = {"rectangle": 1000, "circle": 1}  # others: 30
DEFAULT_COUNTS = {"circle": 1, "rectangle": 61, "rounded_rectangle": 23, "l_shape": 23, "slot": 23,
                  "hexagon": 23, "u_shape": 23, "d_shape": 23}


def build_corpus(counts=None, templates=None):
    """Flood every template and number the variations consecutively."""
    counts = dict(DEFAULT_COUNTS if counts is None else counts)
    names = templates or list(counts)
    out = []
    for name in names:
        for v in flood_variations(name, max_n=counts.get(name, 30)):
            out.append(SketchVariation(v.template, v.params, len(out)))
    return out


def paper_counts(templates=tuple(TEMPLATES)):
    return {t: PAPER_COUNTS.get(t, 30) for t in templates}


# --------------------------------------------------------------------------
# SVG


def _fmt(v):
    return f"{v:.12g}"


def loops_to_svg(loops, size=128) -> str:
    """SVG with one path per loop in a unit viewBox (y flipped so +y is up)."""
    paths = []
    for loop in loops:
        d = [f"M {_fmt(loop[0].start[0])} {_fmt(1 - loop[0].start[1])}"]
        for c in loop:
            if isinstance(c, Line):
                d.append(f"L {_fmt(c.p1[0])} {_fmt(1 - c.p1[1])}")
                continue
            pieces = [c] if not c.is_full() else [Arc(c.center, c.radius, c.start_angle, c.sweep / 2),
                                                  Arc(c.center, c.radius, c.start_angle + c.sweep / 2, c.sweep / 2)]
            for a in pieces:
                large = 1 if abs(a.sweep) > math.pi else 0
                sweep_flag = 0 if a.sweep > 0 else 1  # y flip reverses orientation
                d.append(f"A {_fmt(a.radius)} {_fmt(a.radius)} 0 {large} {sweep_flag} {_fmt(a.end[0])} {_fmt(1 - a.end[1])}")
        d.append("Z")
        paths.append(f'  <path d="{" ".join(d)}" fill="black" fill-rule="evenodd" stroke="none"/>')
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 1 1">\n'
            + "\n".join(paths) + "\n</svg>\n")


def _arc_from_endpoints(p0, p1, r, large, sweep_ccw):
    (x0, y0), (x1, y1) = p0, p1
    mx, my = (x0 + x1) / 2, (y0 + y1) / 2
    dx, dy = x1 - x0, y1 - y0
    half = math.hypot(dx, dy) / 2
    r = max(r, half)
    h = math.sqrt(max(r * r - half * half, 0.0))
    if h < 1e-6 * r:
        h = 0.0
    nx_, ny_ = -dy / (2 * half), dx / (2 * half)
    # center to the left of p0->p1 gives a ccw minor arc
    sgn = 1.0 if (large == 0) == sweep_ccw else -1.0
    cx, cy = mx + sgn * h * nx_, my + sgn * h * ny_
    a0 = math.atan2(y0 - cy, x0 - cx)
    a1 = math.atan2(y1 - cy, x1 - cx)
    sweep = (a1 - a0) % TAU if sweep_ccw else -((a0 - a1) % TAU)
    return Arc((cx, cy), r, a0, sweep)


def svg_to_loops(text: str):
    """Parse the paths written by `loops_to_svg` (M/L/A/Z, absolute only)."""
    loops = []
    for d in re.findall(r'<path[^>]*\sd="([^"]*)"', text):
        toks = d.replace(",", " ").split()
        i, cur, loop = 0, None, []
        while i < len(toks):
            cmd = toks[i]
            if cmd == "M":
                cur = (float(toks[i + 1]), 1 - float(toks[i + 2]))
                i += 3
            elif cmd == "L":
                nxt = (float(toks[i + 1]), 1 - float(toks[i + 2]))
                loop.append(Line(cur, nxt))
                cur = nxt
                i += 3
            elif cmd == "A":
                r = float(toks[i + 1])
                large, sweep_flag = int(toks[i + 4]), int(toks[i + 5])
                nxt = (float(toks[i + 6]), 1 - float(toks[i + 7]))
                arc = _arc_from_endpoints(cur, nxt, r, large, sweep_flag == 0)
                prev = loop[-1] if loop else None
                if (isinstance(prev, Arc) and math.dist(prev.center, arc.center) < 1e-6
                        and abs(prev.radius - arc.radius) < 1e-6 and prev.sweep * arc.sweep > 0):
                    arc = Arc(prev.center, prev.radius, prev.start_angle, prev.sweep + arc.sweep)
                    loop[-1] = arc
                else:
                    loop.append(arc)
                cur = nxt
                i += 8
            elif cmd == "Z":
                i += 1
            else:
                raise ValueError(f"unsupported SVG path command {cmd!r}")
        if loop and math.dist(loop[-1].end, loop[0].start) > 1e-7:
            loop.append(Line(loop[-1].end, loop[0].start))
        loops.append(tuple(loop))
    return loops


def corpus_manifest(variations) -> str:
    return json.dumps({"variations": [dict(v.to_json(), hash=v.hash()) for v in variations]}, indent=1)
