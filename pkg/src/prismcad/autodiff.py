"""A minimal reverse-mode autodiff engine on numpy arrays.

Graphs are recorded as they are evaluated: every op returns a new `Tensor`
holding its parents and a closure mapping the output adjoint to parent
adjoints. Only the operators the networks and the extrusion compositor need
are provided. Broadcasting is limited to scalar operands and the explicit
`replicate` op.

Subgradient conventions: `minimum`/`maximum` send the whole adjoint to the
first argument on exact ties; `relu` has zero slope at 0.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

_next_id = itertools.count()

# while not None, branch masks of kinked ops are appended here (see grad_check)
_branch_trace = None


class ShapeError(ValueError):
    def __init__(self, op, node_id, msg):
        super().__init__(f"{op} (node {node_id}): {msg}")
        self.op = op
        self.node_id = node_id


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "id", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf", name=None):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.id = next(_next_id)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, id={self.id})"

    def __neg__(self):
        return neg(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn, op):
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def _check(cond, op, msg):
    if not cond:
        raise ShapeError(op, next(_next_id), msg)


def _record(mask):
    if _branch_trace is not None:
        _branch_trace.append(np.packbits(mask).tobytes())


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + c, (a,), lambda g: (g,), "add")
    _check(a.shape == b.shape, "add", f"shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def neg(a) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "negate")


def scale(a, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a) -> Tensor:
    mask = a.data > 0
    _record(mask)
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    mask = a.data > 0
    _record(mask)
    k = np.where(mask, 1.0, slope).astype(a.dtype)
    return _make(a.data * k, (a,), lambda g: (g * k,), "leaky_relu")


def minimum(a, b) -> Tensor:
    return _minmax(a, b, np.less_equal, "elementwise_min")


def maximum(a, b) -> Tensor:
    return _minmax(a, b, np.greater_equal, "elementwise_max")


def _minmax(a, b, first_wins, op):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        mask = first_wins(a.data, c)
        _record(mask)
        return _make(np.where(mask, a.data, c).astype(a.dtype), (a,), lambda g: (g * mask,), op)
    _check(a.shape == b.shape, op, f"shape mismatch {a.shape} vs {b.shape}")
    mask = first_wins(a.data, b.data)
    _record(mask)
    out = np.where(mask, a.data, b.data)
    return _make(out, (a, b), lambda g: (g * mask, g * ~mask), op)


# --------------------------------------------------------------------------
# shape ops


def mean(a) -> Tensor:
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),), "mean")


def reshape(a, shape) -> Tensor:
    shape = tuple(shape)
    _check(int(np.prod(shape)) == a.data.size, "reshape", f"cannot reshape {a.shape} to {shape}")
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def permute(a, axes) -> Tensor:
    axes = tuple(axes)
    _check(sorted(axes) == list(range(a.data.ndim)), "permute", f"bad axes {axes} for rank {a.data.ndim}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "permute")


def replicate(a, axis: int, n: int) -> Tensor:
    """Insert a new axis at `axis` holding `n` copies of `a`."""
    shape = list(a.shape)
    _check(0 <= axis <= len(shape), "replicate_along_axis", f"axis {axis} out of range")
    expanded = np.expand_dims(a.data, axis)
    shape.insert(axis, n)
    out = np.broadcast_to(expanded, shape)
    return _make(out, (a,), lambda g: (g.sum(axis=axis),), "replicate_along_axis")


def take(a, index, axis: int = 1) -> Tensor:
    """Select ``index`` (an int, slice or integer array) along ``axis``."""
    sl = [slice(None)] * a.data.ndim
    sl[axis] = index
    sl = tuple(sl)

    def back(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, sl, g)  # repeated indices accumulate
        return (full,)

    return _make(a.data[sl], (a,), back, "take")


def split(a, n: int, axis: int = 1) -> list:
    size = a.shape[axis]
    _check(n >= 1 and size % n == 0, "split", f"cannot split axis of size {size} into {n}")
    k = size // n
    return [take(a, slice(i * k, (i + 1) * k), axis) for i in range(n)]


# --------------------------------------------------------------------------
# layers


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` with ``x`` of shape (N, in) and ``w`` of shape (out, in)."""
    _check(x.data.ndim == 2 and w.data.ndim == 2 and x.shape[1] == w.shape[1], "linear",
           f"input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        _check(b.shape == (w.shape[0],), "linear", f"bias {b.shape} vs weight {w.shape}")
        out = out + b.data
        parents = (x, w, b)
    else:
        parents = (x, w)

    def back(g):
        grads = (g @ w.data, g.T @ x.data)
        return grads + ((g.sum(axis=0),) if b is not None else ())

    return _make(out, parents, back, "linear")


def _offsets(k):
    return itertools.product(*[range(kk) for kk in k])


def _window(off, s, n):
    return tuple(slice(o, o + s * (m - 1) + 1, s) for o, m in zip(off, n))


def _im2col(xp, k, s, out_sp):
    cols = np.empty(xp.shape[:2] + tuple(k) + tuple(out_sp), dtype=xp.dtype)
    head = (slice(None), slice(None))
    for off in _offsets(k):
        cols[head + off] = xp[head + _window(off, s, out_sp)]
    return cols


def _col2im(cols, k, s, out_sp, padded_shape):
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    head = (slice(None), slice(None))
    for off in _offsets(k):
        xp[head + _window(off, s, out_sp)] += cols[head + off]
    return xp


def _crop(xp, p, nd):
    if p == 0:
        return xp
    return xp[(slice(None), slice(None)) + (slice(p, -p),) * nd]


def _pad(x, p, nd):
    if p == 0:
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(p, p)] * nd)


def conv_nd(x, w, b=None, stride=1, padding=0, op="conv") -> Tensor:
    """Cross-correlation with ``x`` (N, C, *S) and ``w`` (O, C, *K)."""
    nd = w.data.ndim - 2
    _check(x.data.ndim == nd + 2, op, f"input rank {x.data.ndim} vs weight rank {w.data.ndim}")
    _check(x.shape[1] == w.shape[1], op, f"input channels {x.shape[1]} vs weight {w.shape}")
    k = w.shape[2:]
    s, p = stride, padding
    n, c = x.shape[:2]
    o = w.shape[0]
    out_sp = tuple((sz + 2 * p - kk) // s + 1 for sz, kk in zip(x.shape[2:], k))
    _check(all(m >= 1 for m in out_sp), op, f"input {x.shape} too small for kernel {k}")
    xp = _pad(x.data, p, nd)
    cols = _im2col(xp, k, s, out_sp).reshape(n, c * int(np.prod(k)), -1)
    w2 = w.data.reshape(o, -1)
    out = np.matmul(w2, cols).reshape((n, o) + out_sp)
    if b is not None:
        out = out + b.data.reshape((1, o) + (1,) * nd)
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(n, o, -1)
        dw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2).reshape((n, c) + tuple(k) + out_sp)
            gx = _crop(_col2im(dcols, k, s, out_sp, xp.shape), p, nd)
        grads = (gx, dw)
        if b is not None:
            grads += (g.sum(axis=(0,) + tuple(range(2, 2 + nd))),)
        return grads

    return _make(out, parents, back, op)


def conv_transpose_nd(x, w, b=None, stride=1, padding=0, op="conv_transpose") -> Tensor:
    """Adjoint of `conv_nd` with ``x`` (N, Cin, *S) and ``w`` (Cin, Cout, *K); no output padding."""
    nd = w.data.ndim - 2
    _check(x.data.ndim == nd + 2, op, f"input rank {x.data.ndim} vs weight rank {w.data.ndim}")
    _check(x.shape[1] == w.shape[0], op, f"input channels {x.shape[1]} vs weight {w.shape}")
    k = w.shape[2:]
    s, p = stride, padding
    n, cin = x.shape[:2]
    cout = w.shape[1]
    in_sp = x.shape[2:]
    padded = tuple((sz - 1) * s + kk for sz, kk in zip(in_sp, k))
    _check(all(m - 2 * p >= 1 for m in padded), op, f"padding {p} too large")
    w2 = w.data.reshape(cin, -1)
    x2 = x.data.reshape(n, cin, -1)
    cols = np.matmul(w2.T, x2).reshape((n, cout) + tuple(k) + tuple(in_sp))
    out = _crop(_col2im(cols, k, s, in_sp, (n, cout) + padded), p, nd)
    if b is not None:
        out = out + b.data.reshape((1, cout) + (1,) * nd)
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        gcols = _im2col(_pad(g, p, nd), k, s, in_sp).reshape(n, cout * int(np.prod(k)), -1)
        dw = np.tensordot(x2, gcols, axes=([0, 2], [0, 2])).reshape(w.shape) if w.requires_grad else None
        gx = np.matmul(w2, gcols).reshape(x.shape) if x.requires_grad else None
        grads = (gx, dw)
        if b is not None:
            grads += (g.sum(axis=(0,) + tuple(range(2, 2 + nd))),)
        return grads

    return _make(out, parents, back, op)


def conv2d(x, w, b=None, stride=1, padding=0):
    _check(w.data.ndim == 4, "conv2d", f"weight must be rank 4, got {w.shape}")
    return conv_nd(x, w, b, stride, padding, "conv2d")


def conv3d(x, w, b=None, stride=1, padding=0):
    _check(w.data.ndim == 5, "conv3d", f"weight must be rank 5, got {w.shape}")
    return conv_nd(x, w, b, stride, padding, "conv3d")


def conv_transpose1d(x, w, b=None, stride=1, padding=0):
    _check(w.data.ndim == 3, "conv_transpose1d", f"weight must be rank 3, got {w.shape}")
    return conv_transpose_nd(x, w, b, stride, padding, "conv_transpose1d")


def conv_transpose2d(x, w, b=None, stride=1, padding=0):
    _check(w.data.ndim == 4, "conv_transpose2d", f"weight must be rank 4, got {w.shape}")
    return conv_transpose_nd(x, w, b, stride, padding, "conv_transpose2d")


# --------------------------------------------------------------------------
# loss


def bce_with_logits_values(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))


def bce_with_logits(x, y) -> Tensor:
    """Mean binary cross entropy on logits, in the overflow-free form."""
    yd = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=x.dtype)
    _check(x.shape == yd.shape, "bce_with_logits_mean", f"shape mismatch {x.shape} vs {yd.shape}")
    n = x.data.size
    val = bce_with_logits_values(x.data, yd).mean()
    return _make(np.asarray(val, dtype=x.dtype), (x,), lambda g: ((expit(x.data) - yd) * (g / n),), "bce_with_logits_mean")


# --------------------------------------------------------------------------
# reverse pass


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads = {loss.id: np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg


def gradients(loss: Tensor, wrt) -> list:
    """Adjoints of a scalar `loss` with respect to each tensor in `wrt`."""
    for t in wrt:
        t.grad = None
    backward(loss)
    out = [np.zeros_like(t.data) if t.grad is None else t.grad for t in wrt]
    for t in wrt:
        t.grad = None
    return out


# --------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    checked: int
    skipped: int

    @property
    def note(self):
        return "tie-adjacent, skipped" if self.skipped else ""


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.max_rel_error < self.tolerance for e in self.entries)

    @property
    def skipped(self) -> int:
        return sum(e.skipped for e in self.entries)

    def max_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)


def _evaluate_traced(fn):
    global _branch_trace
    _branch_trace = []
    try:
        val = float(fn().data)
        trace = _branch_trace
    finally:
        _branch_trace = None
    return val, trace


def grad_check(fn, tensors, tolerance=1e-4, h=1e-5, max_elements=None, seed=0, floor=1e-6):
    """Compare reverse-mode adjoints with central differences.

    `fn` rebuilds the scalar loss from `tensors` (perturbed in place). An
    element whose +h and -h evaluations take different branches of any
    min/max/relu is counted as tie-adjacent and skipped rather than failed.
    At most `max_elements` randomly chosen elements per tensor are probed.
    """
    rng = np.random.default_rng(seed)
    analytic = gradients(fn(), tensors)
    report = GradCheckReport(tolerance)
    for idx, (t, ga) in enumerate(zip(tensors, analytic)):
        flat = t.data.reshape(-1)
        if not flat.flags.writeable or not np.shares_memory(flat, t.data):
            raise ValueError("grad_check needs writable contiguous tensors")
        elems = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            elems = np.sort(rng.choice(flat.size, max_elements, replace=False))
        worst, checked, skipped = 0.0, 0, 0
        ga_flat = ga.reshape(-1)
        for e in elems:
            orig = flat[e]
            flat[e] = orig + h
            fp, tp = _evaluate_traced(fn)
            flat[e] = orig - h
            fm, tm = _evaluate_traced(fn)
            flat[e] = orig
            if tp != tm:
                skipped += 1
                continue
            num = (fp - fm) / (2 * h)
            a = float(ga_flat[e])
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, rel)
            checked += 1
        report.entries.append(GradCheckEntry(t.name or f"tensor{idx}", worst, checked, skipped))
    return report


# --------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"PRCK"
CKPT_VERSION = 1


def save_checkpoint(path, arrays: dict, seed: int = 0) -> None:
    """Write named f32 arrays: magic, u32 version, u64 seed, u32 count, entries."""
    parts = [CKPT_MAGIC, struct.pack("<IQI", CKPT_VERSION, seed, len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack(f"<I{len(nb)}sI", len(nb), nb, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Return ``(arrays, seed)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, seed, count = struct.unpack_from("<IQI", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<IQI")
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    return arrays, seed
