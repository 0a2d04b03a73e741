"""Minimal float32 numeric kernels with reproducible semantics.

Every kernel here is bit-deterministic: the same inputs produce the same
output bits on every call, and each output element is computed by a fixed
sequence of float32 operations that does not depend on how many other rows
are in the batch.  The matmul accumulates strictly left to right over the
contraction axis (no pairwise/tree reductions, no FMA contraction), which is
what makes batched and sequential execution of the same rows bit-identical.

The module also provides:

  * bilinear_sample  edge-clamped bilinear lookup; exact gather on lattice
  * attention_block  softmax(Q K^T / sqrt(d)) V with residual + layer norm
  * Tape / Var       a small reverse-mode gradient tape over these kernels
  * FSB1 array files little-endian float32 tensors with a 'FSB1' header

Array convention: C-order float32 ndarrays.  Kernels reject NaN/Inf at their
boundaries unless an op explicitly permits them.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
from numba import njit

DTYPE = np.float32


class ShapeError(ValueError):
    """Operand dimensions do not match the kernel contract."""


class NumericError(ArithmeticError):
    """Non-finite values reached a kernel boundary."""


class UsageError(RuntimeError):
    """API misuse: foreign tape handles, malformed files, bad arguments."""


def _init_threads():
    # FSB_THREADS caps kernel worker threads; single-threaded when unset.
    want = os.environ.get("FSB_THREADS")
    if not want:
        return
    try:
        from numba import config as _nbconf, set_num_threads

        set_num_threads(max(1, min(int(want), _nbconf.NUMBA_NUM_THREADS)))
    except (ValueError, ImportError):
        pass


_init_threads()


def asarray(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=DTYPE)


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite values in operand")


# ---------------------------------------------------------------------------
# matmul


@njit("void(float32[:, ::1], float32[:, ::1], float32[:, ::1])", cache=True)
def _mm_kernel(a, b, out):  # pragma: no cover - exercised through matmul
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for j in range(n):
            out[i, j] = 0.0
        # k outer / j inner keeps each out[i, j] accumulating in fixed
        # left-to-right k order while reading b rows contiguously
        for kk in range(k):
            aik = a[i, kk]
            for j in range(n):
                out[i, j] += aik * b[kk, j]


def matmul(a, b, out=None):
    """C = A @ B for 2-D float32 operands.

    Each C[i, j] is the strict left-to-right sum of A[i, k] * B[k, j]; the
    result for a given row never depends on what other rows were stacked
    with it.
    """
    if isinstance(a, Var) or isinstance(b, Var):
        return _tape_matmul(a, b)
    a = asarray(a)
    b = asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    _check_finite(a, "matmul")
    _check_finite(b, "matmul")
    if out is None:
        out = np.empty((a.shape[0], b.shape[1]), dtype=DTYPE)
    else:
        if out.shape != (a.shape[0], b.shape[1]) or out.dtype != DTYPE or not out.flags.c_contiguous:
            raise ShapeError("matmul out buffer has wrong shape/dtype/layout")
    _mm_kernel(a, b, out)
    return out


# ---------------------------------------------------------------------------
# bilinear sampling


def _bilinear_parts(image, grid):
    h, w = image.shape[:2]
    x = np.clip(grid[..., 0], 0.0, np.float32(w - 1))
    y = np.clip(grid[..., 1], 0.0, np.float32(h - 1))
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0.astype(DTYPE))[..., None]
    fy = (y - y0.astype(DTYPE))[..., None]
    return x, y, x0, y0, x1, y1, fx, fy


def bilinear_sample(image, grid):
    """Sample image (H, W, C) at grid (..., 2) of (x, y) pixel coordinates.

    Out-of-bounds coordinates clamp to the nearest edge pixel.  Grids that
    land exactly on the integer lattice reduce to an exact gather.
    """
    if isinstance(image, Var) or isinstance(grid, Var):
        return _tape_bilinear(image, grid)
    image = asarray(image)
    grid = asarray(grid)
    if image.ndim != 3 or grid.ndim < 1 or grid.shape[-1] != 2 or grid.size == 0:
        raise ShapeError(f"bilinear_sample: image {image.shape}, grid {grid.shape}")
    _check_finite(image, "bilinear_sample")
    _check_finite(grid, "bilinear_sample")
    _, _, x0, y0, x1, y1, fx, fy = _bilinear_parts(image, grid)
    one = np.float32(1.0)
    top = image[y0, x0] * (one - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (one - fx) + image[y1, x1] * fx
    return top * (one - fy) + bot * fy


# ---------------------------------------------------------------------------
# attention block


@dataclass
class AttentionWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    bo: np.ndarray
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    heads: int = 1


def init_attention_weights(rng, dim, heads=1, scale=0.5) -> AttentionWeights:
    if dim % heads != 0:
        raise ShapeError(f"dim {dim} not divisible by heads {heads}")
    sd = np.float32(scale / np.sqrt(dim))

    def mat():
        return (rng.standard_normal((dim, dim)) * sd).astype(DTYPE)

    zeros = np.zeros(dim, dtype=DTYPE)
    return AttentionWeights(
        wq=mat(), wk=mat(), wv=mat(), wo=mat(),
        bq=zeros.copy(), bk=zeros.copy(), bv=zeros.copy(), bo=zeros.copy(),
        ln_gamma=np.ones(dim, dtype=DTYPE), ln_beta=zeros.copy(), heads=heads,
    )


def softmax(x, axis=-1):
    shift = np.max(value_of(x), axis=axis, keepdims=True)  # constant shift
    e = exp(x - shift)
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=-1, keepdims=True)
    return d / sqrt(var + np.float32(eps)) * gamma + beta


def attention_block(x, weights, context=None):
    """Multi-head attention with residual connection and layer norm.

    x: (T, D) query tokens.  context: optional (S, D) key/value tokens for
    cross attention; defaults to x (self attention).  Works on plain arrays
    and on tape variables.
    """
    xv = value_of(x)
    if xv.ndim != 2:
        raise ShapeError(f"attention_block expects (T, D) tokens, got {xv.shape}")
    dim = xv.shape[1]
    if dim != weights.wq.shape[0]:
        raise ShapeError(f"token dim {dim} vs weights dim {weights.wq.shape[0]}")
    if dim % weights.heads != 0:
        raise ShapeError(f"dim {dim} not divisible by heads {weights.heads}")
    if not isinstance(x, Var):
        _check_finite(xv, "attention_block")
    c = x if context is None else context
    if context is not None and not isinstance(context, Var):
        _check_finite(value_of(context), "attention_block")

    q = matmul(x, weights.wq) + weights.bq
    k = matmul(c, weights.wk) + weights.bk
    v = matmul(c, weights.wv) + weights.bv
    dh = dim // weights.heads
    inv_sqrt = np.float32(1.0 / np.sqrt(dh))
    outs = []
    for h in range(weights.heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = matmul(q[:, sl], transpose(k[:, sl])) * inv_sqrt
        if not np.all(np.isfinite(value_of(logits))):
            raise NumericError("attention_block: non-finite logits")
        outs.append(matmul(softmax(logits, axis=-1), v[:, sl]))
    o = outs[0] if len(outs) == 1 else concat(outs, axis=1)
    y = x + (matmul(o, weights.wo) + weights.bo)
    return layer_norm(y, weights.ln_gamma, weights.ln_beta)


# ---------------------------------------------------------------------------
# FSB1 array files: b'FSB1' | u32 rank | u32 dims... | float32 payload (LE)


FSB1_MAGIC = b"FSB1"


def write_fsb1(path, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FSB1_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        if arr.ndim:
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_fsb1(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8 or data[:4] != FSB1_MAGIC:
        raise UsageError(f"{path}: not an FSB1 file")
    rank = struct.unpack_from("<I", data, 4)[0]
    if rank > 32:
        raise UsageError(f"{path}: implausible rank {rank}")
    header = 8 + 4 * rank
    if len(data) < header:
        raise UsageError(f"{path}: truncated FSB1 header")
    dims = struct.unpack_from(f"<{rank}I", data, 8) if rank else ()
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(data) != header + 4 * count:
        raise UsageError(f"{path}: payload size mismatch")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=header)
    return arr.reshape(dims).astype(DTYPE, copy=True)


# ---------------------------------------------------------------------------
# reverse-mode tape


def _unbroadcast(g, shape):
    # reduce a broadcast gradient back to the operand's shape
    g = np.asarray(g, dtype=DTYPE)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Var:
    """Handle for a value recorded on a Tape."""

    __slots__ = ("tape", "value", "_parents")
    __array_ufunc__ = None  # force numpy to defer to our reflected operators

    def __init__(self, tape, value, parents=()):
        self.tape = tape
        self.value = np.asarray(value, dtype=DTYPE)
        self._parents = parents

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return _binary(self, other, np.add, lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, np.subtract, lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return _binary(other, self, np.subtract, lambda g, a, b: g, lambda g, a, b: -g)

    def __mul__(self, other):
        return _binary(self, other, np.multiply, lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(
            self, other, np.divide,
            lambda g, a, b: g / b,
            lambda g, a, b: -g * a / (b * b),
        )

    def __rtruediv__(self, other):
        return _binary(
            other, self, np.divide,
            lambda g, a, b: g / b,
            lambda g, a, b: -g * a / (b * b),
        )

    def __neg__(self):
        return _unary(self, np.negative, lambda g, a: -g)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        val = self.value[key]

        def vjp(g):
            buf = np.zeros_like(self.value)
            _scatter_add(buf, key, g)
            return buf

        return _record(self.tape, val, [(self, vjp)])

    # -- shape ops ----------------------------------------------------------

    def reshape(self, shape):
        old = self.value.shape
        return _record(
            self.tape,
            self.value.reshape(shape),
            [(self, lambda g: np.ascontiguousarray(g).reshape(old))],
        )

    def transpose(self, axes=None):
        axes = tuple(axes) if axes is not None else tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return _record(
            self.tape,
            np.ascontiguousarray(self.value.transpose(axes)),
            [(self, lambda g: np.ascontiguousarray(np.asarray(g).transpose(inv)))],
        )

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        val = self.value.sum(axis=axis, keepdims=keepdims)
        shape = self.value.shape

        def vjp(g):
            g = np.asarray(g, dtype=DTYPE)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).astype(DTYPE, copy=True)

        return _record(self.tape, val, [(self, vjp)])

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * np.float32(1.0 / n)


def _scatter_add(buf, key, g):
    parts = key if isinstance(key, tuple) else (key,)
    fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)
    if fancy:
        np.add.at(buf, key, np.asarray(g, dtype=DTYPE))
    else:
        buf[key] += np.asarray(g, dtype=DTYPE)


def _record(tape, value, parents):
    if tape is None:
        raise UsageError("operation on a Var without a tape")
    v = Var(tape, value, tuple(parents))
    tape._nodes.append(v)
    return v


def _tape_of(*xs):
    tapes = {x.tape for x in xs if isinstance(x, Var)}
    if len(tapes) > 1:
        raise UsageError("operands belong to different tapes")
    return tapes.pop() if tapes else None


def _binary(a, b, fwd, vjp_a, vjp_b):
    tape = _tape_of(a, b)
    av = value_of(a)
    bv = value_of(b)
    val = fwd(av, bv)
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(vjp_a(np.asarray(g, DTYPE), av, bv), av.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(vjp_b(np.asarray(g, DTYPE), av, bv), bv.shape)))
    return _record(tape, val, parents)


def _unary(a, fwd, vjp):
    val = fwd(a.value)
    return _record(a.tape, val, [(a, lambda g: vjp(np.asarray(g, DTYPE), a.value))])


def sin(x):
    if isinstance(x, Var):
        return _unary(x, np.sin, lambda g, a: g * np.cos(a))
    return np.sin(x)


def cos(x):
    if isinstance(x, Var):
        return _unary(x, np.cos, lambda g, a: -g * np.sin(a))
    return np.cos(x)


def exp(x):
    if isinstance(x, Var):
        return _unary(x, np.exp, lambda g, a: g * np.exp(a))
    return np.exp(x)


def log(x):
    if isinstance(x, Var):
        return _unary(x, np.log, lambda g, a: g / a)
    return np.log(x)


def sqrt(x):
    if isinstance(x, Var):
        v = _unary(x, np.sqrt, lambda g, a: g * np.float32(0.5) / np.sqrt(a))
        return v
    return np.sqrt(x)


def absval(x):
    if isinstance(x, Var):
        return _unary(x, np.abs, lambda g, a: g * np.sign(a))
    return np.abs(x)


def relu(x):
    if isinstance(x, Var):
        return _unary(x, lambda a: np.maximum(a, np.float32(0.0)), lambda g, a: g * (a > 0))
    return np.maximum(x, np.float32(0.0))


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    tape = _tape_of(a, b)
    if tape is None:
        return np.where(cond, a, b).astype(DTYPE)
    av = value_of(a)
    bv = value_of(b)
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(np.asarray(g, DTYPE) * cond, av.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(np.asarray(g, DTYPE) * ~cond, bv.shape)))
    return _record(tape, np.where(cond, av, bv).astype(DTYPE), parents)


def concat(xs, axis=0):
    tape = _tape_of(*xs)
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    parents = []
    offset = 0
    for x, v in zip(xs, vals):
        n = v.shape[axis]
        if isinstance(x, Var):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(offset, offset + n)
            parents.append((x, lambda g, sl=tuple(sl): np.ascontiguousarray(np.asarray(g)[sl], dtype=DTYPE)))
        offset += n
    return _record(tape, out, parents)


def stack(xs, axis=0):
    tape = _tape_of(*xs)
    vals = [value_of(x) for x in xs]
    out = np.stack(vals, axis=axis)
    if tape is None:
        return out
    parents = []
    for i, x in enumerate(xs):
        if isinstance(x, Var):
            parents.append((x, lambda g, i=i: np.ascontiguousarray(np.take(np.asarray(g), i, axis=axis), dtype=DTYPE)))
    return _record(tape, out, parents)


def transpose(x, axes=None):
    if isinstance(x, Var):
        return x.transpose(axes)
    return np.ascontiguousarray(np.transpose(x, axes))


def _tape_matmul(a, b):
    tape = _tape_of(a, b)
    av = value_of(a)
    bv = value_of(b)
    val = matmul(av, bv)
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: matmul(np.ascontiguousarray(g, DTYPE), transpose(bv))))
    if isinstance(b, Var):
        parents.append((b, lambda g: matmul(transpose(av), np.ascontiguousarray(g, DTYPE))))
    return _record(tape, val, parents)


def _tape_bilinear(image, grid):
    tape = _tape_of(image, grid)
    iv = value_of(image)
    gv = value_of(grid)
    val = bilinear_sample(iv, gv)
    h, w = iv.shape[:2]
    x, y, x0, y0, x1, y1, fx, fy = _bilinear_parts(iv, gv)
    one = np.float32(1.0)
    parents = []
    if isinstance(image, Var):

        def vjp_image(g):
            g = np.asarray(g, dtype=DTYPE)
            buf = np.zeros_like(iv)
            np.add.at(buf, (y0, x0), g * (one - fx) * (one - fy))
            np.add.at(buf, (y0, x1), g * fx * (one - fy))
            np.add.at(buf, (y1, x0), g * (one - fx) * fy)
            np.add.at(buf, (y1, x1), g * fx * fy)
            return buf

        parents.append((image, vjp_image))
    if isinstance(grid, Var):
        # derivative of the lerp; zero where the coordinate clamped
        in_x = ((gv[..., 0] > 0) & (gv[..., 0] < w - 1)).astype(DTYPE)[..., None]
        in_y = ((gv[..., 1] > 0) & (gv[..., 1] < h - 1)).astype(DTYPE)[..., None]
        dx = ((iv[y0, x1] - iv[y0, x0]) * (one - fy) + (iv[y1, x1] - iv[y1, x0]) * fy) * in_x
        dy = ((iv[y1, x0] - iv[y0, x0]) * (one - fx) + (iv[y1, x1] - iv[y0, x1]) * fx) * in_y

        def vjp_grid(g):
            g = np.asarray(g, dtype=DTYPE)
            return np.stack([(g * dx).sum(axis=-1), (g * dy).sum(axis=-1)], axis=-1)

        parents.append((grid, vjp_grid))
    return _record(tape, val, parents)


class Tape:
    """Records operations on Vars; replays them in exact reverse order."""

    def __init__(self):
        self._nodes = []
        self._leaves = []

    def var(self, value) -> Var:
        v = Var(self, asarray(value))
        self._nodes.append(v)
        self._leaves.append(v)
        return v

    def grad(self, loss, wrt=None):
        """Gradient of a scalar loss w.r.t. the requested Vars.

        Returns {Var: ndarray}; Vars that do not influence the loss get
        zero gradients.
        """
        if not isinstance(loss, Var) or loss.tape is not self:
            raise UsageError("loss is not a Var on this tape")
        if loss.value.size != 1:
            raise UsageError(f"loss must be scalar, got shape {loss.value.shape}")
        targets = self._leaves if wrt is None else list(wrt)
        for t in targets:
            if not isinstance(t, Var) or t.tape is not self:
                raise UsageError("gradient requested for a handle not on this tape")

        grads = {id(loss): np.ones_like(loss.value)}
        for v in reversed(self._nodes):
            g = grads.get(id(v))
            if g is None or not v._parents:
                continue
            for parent, vjp in v._parents:
                pg = vjp(g)
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
        return {t: grads.get(id(t), np.zeros_like(t.value)) for t in targets}
