"""Cross-topology conversion: barycentric bridge, fit oracle, projector, denoiser.

A detailed source body and a coarse target body are linked by a precomputed
barycentric attachment (each target vertex rides on one source face).  With
the attachment in hand, source geometry converts to target parameters two
ways: a per-mesh iterative fit, which is slow but serves as the accuracy
reference, and a trained feedforward projector that amortizes the whole fit
into one small matmul stack.  A residual pose denoiser cleans up projected
poses by nudging them toward the training manifold.
"""

import csv
import json
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import bodymodel as bm
from . import numkit as nk
from .bodymodel import BaryMap, PoseState
from .numkit import DTYPE, NumericError, ShapeError, UsageError, value_of

# body_pose slices (within the full 76-vector) of the two wrist-child joints;
# the projector never predicts these, they belong to the hand path
_WRIST_CHILD_SLOTS = (
    slice(3 * bm.LEFT_HAND, 3 * bm.LEFT_HAND + 3),
    slice(3 * bm.RIGHT_HAND, 3 * bm.RIGHT_HAND + 3),
)


# ---------------------------------------------------------------------------
# closest-point attachment
# ---------------------------------------------------------------------------


def _tri_regions(a, b, c, p):
    """Closest point on triangle(s), returned as barycentric weights.

    Region-by-region case analysis over the six Voronoi zones of a triangle
    (vertices, edges, interior), vectorized so a, b, c broadcast against p.
    All float64.  Degenerate triangles land in the interior branch with a
    zero denominator; callers must route those through _segment_bary.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d4 * d5
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
    conds = [
        (d1 <= 0) & (d2 <= 0),                # vertex A
        (d3 >= 0) & (d4 <= d3),               # vertex B
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),    # edge AB
        (d6 >= 0) & (d5 <= d6),               # vertex C
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),    # edge AC
        (va <= 0) & (d4 >= d3) & (d5 >= d6),  # edge BC
    ]
    zero = np.zeros_like(d1)
    one = np.ones_like(d1)
    w0 = np.select(conds, [one, zero, 1.0 - t_ab, zero, 1.0 - t_ac, zero],
                   default=1.0 - v_in - w_in)
    w1 = np.select(conds, [zero, one, t_ab, zero, zero, 1.0 - t_bc], default=v_in)
    w2 = np.select(conds, [zero, zero, zero, one, t_ac, t_bc], default=w_in)
    return np.stack([w0, w1, w2], axis=-1)


def _segment_bary(u, v, p):
    # closest point on segment u-v as a clamped interpolation fraction
    d = v - u
    den = (d * d).sum(-1)
    safe = np.where(den > 0, den, 1.0)
    t = np.where(den > 0, ((p - u) * d).sum(-1) / safe, 0.0)
    return np.clip(t, 0.0, 1.0)


def closest_point_bary(tri, points):
    """Barycentric closest points on one non-degenerate triangle.

    tri    : (3, 3) corner rows
    points : (P, 3)
    Returns (weights (P, 3) float64, squared distances (P,) float64).
    """
    tri = np.asarray(tri, np.float64)
    p = np.asarray(points, np.float64)
    if tri.shape != (3, 3) or p.ndim != 2 or p.shape[1] != 3:
        raise ShapeError("closest_point_bary expects a (3,3) triangle and (P,3) points")
    bary = _tri_regions(tri[0][None], tri[1][None], tri[2][None], p)
    pos = bary @ tri
    d2 = ((p - pos) ** 2).sum(axis=-1)
    return bary, d2


def bary_map_from_arrays(src_verts, src_faces, tgt_verts, chunk=64):
    """Attach each target point to the closest point on the source surface.

    The search runs in float64 over every (target, face) pair, chunked over
    targets.  Ties resolve to the lowest face index (argmin keeps the first
    minimum).  Zero-area faces are projected onto their longest edge instead;
    any target whose winning face is one of those is listed in the returned
    diagnostics.
    """
    verts = np.asarray(src_verts, np.float64)
    faces = np.asarray(src_faces, np.int64)
    tgts = np.asarray(tgt_verts, np.float64)
    if verts.ndim != 2 or verts.shape[1] != 3:
        raise ShapeError("source vertices must be (Nv, 3)")
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise ShapeError("source faces must be (F, 3)")
    if tgts.ndim != 2 or tgts.shape[1] != 3:
        raise ShapeError("target vertices must be (Nt, 3)")

    tri = verts[faces]  # (F, 3, 3)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac = b - a, c - a
    normal = np.cross(ab, ac)
    area2 = (normal * normal).sum(-1)
    scale2 = (ab * ab).sum(-1) * (ac * ac).sum(-1)
    degenerate = area2 <= 1e-12 * np.maximum(scale2, 1e-300)
    deg_ids = np.nonzero(degenerate)[0]
    if deg_ids.size:
        # slot indices of the longest edge per degenerate face
        e2 = np.stack([
            ((b - a) ** 2).sum(-1),
            ((c - b) ** 2).sum(-1),
            ((a - c) ** 2).sum(-1),
        ], axis=-1)[deg_ids]
        longest = np.argmax(e2, axis=-1)
        slot_u = np.array([0, 1, 2])[longest]
        slot_v = np.array([1, 2, 0])[longest]
        seg_u = tri[deg_ids, slot_u]  # (Fd, 3)
        seg_v = tri[deg_ids, slot_v]

    nt = len(tgts)
    face_out = np.empty(nt, np.int64)
    w_out = np.empty((nt, 3), np.float64)
    for lo in range(0, nt, chunk):
        p = tgts[lo:lo + chunk][:, None, :]  # (T, 1, 3)
        bary = _tri_regions(a[None], b[None], c[None], p)  # (T, F, 3)
        if deg_ids.size:
            t = _segment_bary(seg_u[None], seg_v[None], p)  # (T, Fd)
            wd = np.zeros(t.shape + (3,))
            cols = np.arange(len(deg_ids))
            wd[:, cols, slot_u] = 1.0 - t
            wd[:, cols, slot_v] = t
            bary[:, deg_ids, :] = wd
        pos = (bary[..., None] * tri[None]).sum(axis=-2)  # (T, F, 3)
        d2 = ((p - pos) ** 2).sum(axis=-1)
        win = np.argmin(d2, axis=1)
        face_out[lo:lo + len(win)] = win
        w_out[lo:lo + len(win)] = bary[np.arange(len(win)), win]

    w = np.clip(w_out, 0.0, None)
    w /= w.sum(axis=1, keepdims=True)
    flagged = np.nonzero(degenerate[face_out])[0].astype(np.int64)
    return BaryMap(
        face_index=face_out,
        weights=w.astype(DTYPE),
        corners=faces[face_out],
        degenerate_targets=flagged,
    )


def precompute_bary(source, target, chunk=64):
    """Rest-pose attachment of every target vertex onto the source surface."""
    return bary_map_from_arrays(
        source.vertices_rest, source.faces, target.vertices_rest, chunk=chunk
    )


def bridge(v_src, bmap):
    """Resample source vertices onto the target vertex set.

    v_src: (..., Nv_src, 3).  The attachment acts as a sparse linear operator:
    gather the three stored corners per target vertex, weight, sum.  Batched
    inputs share the gather, so rows come out bit-identical to single calls.
    """
    if bmap.corners is None:
        raise UsageError("BaryMap has no corner table; rebuild it with precompute_bary")
    v = np.asarray(v_src, DTYPE)
    if v.ndim < 2 or v.shape[-1] != 3:
        raise ShapeError(f"bridge expects (..., Nv, 3) vertices, got {v.shape}")
    need = int(bmap.corners.max()) + 1
    if v.shape[-2] < need:
        raise ShapeError(f"bridge needs at least {need} source vertices, got {v.shape[-2]}")
    gathered = v[..., bmap.corners, :]  # (..., Nt, 3 corners, 3)
    return (gathered * bmap.weights[:, :, None]).sum(axis=-2)


# ---------------------------------------------------------------------------
# iterative fit
# ---------------------------------------------------------------------------


@dataclass
class FitConfig:
    steps: int = 300
    lr: float = 0.05
    lambda_pose: float = 1e-3
    lambda_shape: float = 1e-2

    def __post_init__(self):
        if self.steps < 1:
            raise UsageError("FitConfig.steps must be at least 1")


@dataclass
class FitBatchResult:
    params: np.ndarray        # (B, 76) best-so-far parameters
    vertex_error: np.ndarray  # (B,) float64 mean per-vertex gap
    curve: np.ndarray         # (steps + 1,) running mean best error


@dataclass
class FitResult:
    pose: PoseState
    vertex_error: float
    curve: np.ndarray


class _Adam:
    """Adaptive-moment updates, float32 state, applied in place.

    Everything is elementwise, so batched parameter rows update exactly as
    they would in isolation; the fit relies on that for its batching.
    """

    def __init__(self, arrays, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.arrays = list(arrays)
        self.lr = float(lr)
        self.b1 = np.float32(beta1)
        self.b2 = np.float32(beta2)
        self.eps = np.float32(eps)
        self.m = [np.zeros_like(x) for x in self.arrays]
        self.v = [np.zeros_like(x) for x in self.arrays]
        self.t = 0

    def step(self, grads, lr=None):
        step_lr = np.float32(self.lr if lr is None else lr)
        self.t += 1
        c1 = np.float32(1.0 - float(self.b1) ** self.t)
        c2 = np.float32(1.0 - float(self.b2) ** self.t)
        one = np.float32(1.0)
        for x, g, m, v in zip(self.arrays, grads, self.m, self.v):
            g = np.asarray(g, DTYPE)
            m *= self.b1
            m += (one - self.b1) * g
            v *= self.b2
            v += (one - self.b2) * (g * g)
            x -= step_lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _fit_terms(theta, template, v_target, cfg):
    """Fit objective: per-item mean squared vertex gap plus pose/shape penalties.

    theta may be an ndarray or a tape Var; the skinning call and all the
    arithmetic dispatch the same way on either, which keeps the evaluation
    path and the gradient path numerically identical.
    """
    b = v_target.shape[0]
    v_hat = bm.skin_batch(template, theta)
    diff = v_hat - v_target
    # raw squared norm, not a per-coordinate mean: the penalty weights are
    # calibrated against the unnormalized gap, and a mean would let them
    # overpower the data term and drag pose and shape toward rest
    per_item = (diff * diff).reshape((b, -1)).sum(axis=1)
    body = theta[:, 3:66]
    shape = theta[:, 66:]
    reg = (body * body).reshape((b, -1)).sum(axis=1) * np.float32(cfg.lambda_pose) \
        + (shape * shape).reshape((b, -1)).sum(axis=1) * np.float32(cfg.lambda_shape)
    return (per_item + reg).sum(), v_hat


def _vertex_gap(v_hat, v_target):
    # mean Euclidean per-vertex gap for each batch item, float64
    d = np.asarray(value_of(v_hat), np.float64) - np.asarray(v_target, np.float64)
    return np.linalg.norm(d, axis=-1).mean(axis=-1)


def fit_objective_value(theta, template, v_target, cfg=None):
    """Objective at theta (B, 76); returns (loss, per-item vertex errors)."""
    cfg = cfg or FitConfig()
    theta = np.asarray(theta, DTYPE)
    total, v_hat = _fit_terms(theta, template, np.asarray(v_target, DTYPE), cfg)
    return float(total), _vertex_gap(v_hat, v_target)


def fit_objective_grad(theta, template, v_target, cfg=None):
    """Analytic gradient of the fit objective w.r.t. theta, shape (B, 76)."""
    cfg = cfg or FitConfig()
    tape = nk.Tape()
    tv = tape.var(np.asarray(theta, DTYPE))
    total, _ = _fit_terms(tv, template, np.asarray(v_target, DTYPE), cfg)
    return tape.grad(total, [tv])[tv]


def _track_best(best_err, best, err, theta):
    if best_err is None:
        return err.copy(), theta.copy()
    gain = err < best_err
    if gain.any():
        best_err = np.where(gain, err, best_err)
        best[gain] = theta[gain]
    return best_err, best


def fit_batch(v_src, bmap, target, cfg=None, init=None):
    """Fit target-body parameters to bridged source meshes, batched.

    v_src : (B, Nv_src, 3) source meshes
    init  : optional (B, 76) starting parameters (default rest pose)

    Descends the squared-gap objective with per-element adaptive moments and
    keeps the best iterate per item, so the reported error never increases.
    curve[k] is the running mean best error after evaluating iterate k
    (k = 0 is the init); the final iterate is evaluated through the compiled
    skinning path, which matches the taped path bit for bit.
    """
    cfg = cfg or FitConfig()
    v_src = np.asarray(v_src, DTYPE)
    if v_src.ndim != 3 or v_src.shape[-1] != 3:
        raise ShapeError(f"fit_batch expects (B, Nv, 3) meshes, got {v_src.shape}")
    v_t = bridge(v_src, bmap)
    if not np.isfinite(v_t).all():
        raise NumericError("fit target meshes contain non-finite values")
    b = v_src.shape[0]
    if init is None:
        theta = np.zeros((b, bm.PARAM_DIM), dtype=DTYPE)
    else:
        theta = np.array(init, dtype=DTYPE, copy=True)
        if theta.shape != (b, bm.PARAM_DIM):
            raise ShapeError(f"init must be (B, {bm.PARAM_DIM}), got {theta.shape}")

    opt = _Adam([theta], lr=cfg.lr)
    best = theta.copy()
    best_err = None
    curve = []
    for step in range(cfg.steps):
        tape = nk.Tape()
        tv = tape.var(theta)
        loss, v_hat = _fit_terms(tv, target, v_t, cfg)
        if not np.isfinite(loss.value):
            raise NumericError(f"fit loss went non-finite at step {step}")
        err = _vertex_gap(v_hat, v_t)
        best_err, best = _track_best(best_err, best, err, theta)
        curve.append(float(best_err.mean()))
        grad = tape.grad(loss, [tv])[tv]
        # cosine decay: full steps early for basin finding, tiny steps late so
        # the iterate actually settles instead of orbiting the minimum
        opt.step([grad], lr=cfg.lr * 0.5 * (1.0 + np.cos(np.pi * step / cfg.steps)))
    err = _vertex_gap(bm.skin_batch(target, theta), v_t)
    best_err, best = _track_best(best_err, best, err, theta)
    curve.append(float(best_err.mean()))
    return FitBatchResult(params=best, vertex_error=best_err, curve=np.asarray(curve))


def iterative_fit(v_src, bmap, target, cfg=None, init=None):
    """Single-mesh fit; init may be a PoseState or a 76-vector."""
    v = np.asarray(v_src, DTYPE)
    if v.ndim != 2:
        raise ShapeError("iterative_fit expects one (Nv, 3) mesh; use fit_batch for batches")
    init_vec = None
    if init is not None:
        vec = init.as_vector() if isinstance(init, PoseState) else np.asarray(init, DTYPE)
        init_vec = vec[None]
    res = fit_batch(v[None], bmap, target, cfg=cfg, init=init_vec)
    return FitResult(
        pose=PoseState.from_vector(res.params[0]),
        vertex_error=float(res.vertex_error[0]),
        curve=res.curve,
    )


# ---------------------------------------------------------------------------
# feedforward projector
# ---------------------------------------------------------------------------


@dataclass
class ProjectorWeights:
    """Three affine layers 3*V_sub -> h1 -> h2 -> 76 plus attachment metadata."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    subsample: np.ndarray  # (V_sub,) target vertex picks
    mask: np.ndarray       # (76,) zeros at the wrist-child slots


def _output_mask():
    mask = np.ones(bm.PARAM_DIM, dtype=DTYPE)
    for sl in _WRIST_CHILD_SLOTS:
        mask[sl] = 0.0
    return mask


def make_subsample(n_target, v_sub):
    """Deterministic uniform-stride vertex picks over the target mesh."""
    if v_sub < 1 or v_sub > n_target:
        raise UsageError(f"cannot pick {v_sub} of {n_target} vertices")
    stride = n_target // v_sub
    return np.arange(0, stride * v_sub, stride, dtype=np.int64)


def init_projector(subsample, hidden=(512, 256), seed=0):
    idx = np.asarray(subsample, np.int64)
    rng = np.random.default_rng(seed)
    h1, h2 = hidden
    n_in = 3 * len(idx)

    def dense(fan_in, fan_out, scale):
        w = rng.normal(0.0, 1.0, size=(fan_in, fan_out)) * (scale / np.sqrt(fan_in))
        return w.astype(DTYPE)

    return ProjectorWeights(
        w1=dense(n_in, h1, 1.4),
        b1=np.zeros(h1, DTYPE),
        w2=dense(h1, h2, 1.4),
        b2=np.zeros(h2, DTYPE),
        # small head so untrained outputs start near the rest pose
        w3=dense(h2, bm.PARAM_DIM, 0.05),
        b3=np.zeros(bm.PARAM_DIM, DTYPE),
        subsample=idx,
        mask=_output_mask(),
    )


def _projector_inputs(v, bmap, idx):
    """Bridge, subsample, center, flatten; returns (x (B, 3*V_sub), was_single).

    A fixed source vertex is subtracted before bridging.  A rigid translation
    of the input then cancels inside that one exact subtraction instead of
    being smeared through the weighted corner sums, which is what makes the
    invariance bit-exact whenever the translated coordinates round losslessly.
    The centroid of the subsampled set is removed afterwards as usual.
    """
    v = np.asarray(v, DTYPE)
    single = v.ndim == 2
    if single:
        v = v[None]
    if v.ndim != 3 or v.shape[-1] != 3:
        raise ShapeError(f"expected (B, Nv, 3) source vertices, got {v.shape}")
    centered = v - v[:, :1, :]
    sub = bridge(centered, bmap)[:, idx, :]  # (B, V_sub, 3)
    x = sub - sub.mean(axis=1, keepdims=True)
    return x.reshape(v.shape[0], -1), single


def _projector_mlp(x, w1, b1, w2, b2, w3, b3, mask):
    h = nk.relu(nk.matmul(x, w1) + b1)
    h = nk.relu(nk.matmul(h, w2) + b2)
    # the mask zeroes the wrist-child outputs without branching on Var/ndarray
    return (nk.matmul(h, w3) + b3) * mask


def project_batch(v, bmap, weights):
    """Feedforward conversion of (B, Nv, 3) source meshes to (B, 76) parameters."""
    x, single = _projector_inputs(v, bmap, weights.subsample)
    if single:
        raise ShapeError("project_batch expects a batch; use project_forward for one mesh")
    if x.shape[1] != weights.w1.shape[0]:
        raise ShapeError(f"input width {x.shape[1]} does not match the first layer {weights.w1.shape[0]}")
    return _projector_mlp(x, weights.w1, weights.b1, weights.w2, weights.b2,
                          weights.w3, weights.b3, weights.mask)


def project_forward(v, bmap, weights, subsample=None):
    """Convert one (Nv, 3) source mesh to a 76-vector of target parameters."""
    v = np.asarray(v, DTYPE)
    if v.ndim != 2:
        raise ShapeError("project_forward expects one (Nv, 3) mesh")
    idx = weights.subsample if subsample is None else np.asarray(subsample, np.int64)
    x, _ = _projector_inputs(v, bmap, idx)
    if x.shape[1] != weights.w1.shape[0]:
        raise ShapeError(f"input width {x.shape[1]} does not match the first layer {weights.w1.shape[0]}")
    out = _projector_mlp(x, weights.w1, weights.b1, weights.w2, weights.b2,
                         weights.w3, weights.b3, weights.mask)
    return out[0]


# ---------------------------------------------------------------------------
# projector training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 200
    batch: int = 64
    lr: float = 1e-3
    lambda_v: float = 1.0
    lambda_reg: float = 0.1
    heldout_frac: float = 0.1
    hidden: tuple = (512, 256)
    v_sub: int = 300
    seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 100


@dataclass
class TrainResult:
    weights: ProjectorWeights
    history: dict
    best_epoch: int


def _split_heldout(n, frac):
    n_held = int(round(frac * n))
    if n_held <= 0 or n_held >= n:
        # degenerate datasets (single pair, or no split requested) evaluate
        # on themselves so the bookkeeping stays uniform
        return np.arange(n), np.arange(n)
    return np.arange(n - n_held), np.arange(n - n_held, n)


def train_projector(v_src, theta_star, bmap, target, cfg=None):
    """Distill the iterative fit into the projector MLP.

    v_src      : (N, Nv_src, 3) source meshes
    theta_star : (N, 76) fitted parameters for those meshes
    Minibatch loss: lambda_v * mean|skin(theta_hat) - bridged target|
                  + lambda_reg * mean((theta_hat - theta_star)^2),
    with the vertex term running through differentiable skinning.  Cosine
    learning-rate decay; the returned weights are the best held-out snapshot.
    Aborts if the loss goes non-finite or stays above divergence_factor times
    the initial value for divergence_patience consecutive steps.
    """
    cfg = cfg or TrainConfig()
    v_src = np.asarray(v_src, DTYPE)
    theta_star = np.asarray(theta_star, DTYPE)
    n = len(v_src)
    if n < 1:
        raise UsageError("training needs at least one (mesh, parameters) pair")
    if v_src.ndim != 3 or theta_star.shape != (n, bm.PARAM_DIM):
        raise ShapeError("dataset arrays disagree: meshes (N, Nv, 3), parameters (N, 76)")

    idx = make_subsample(target.num_vertices, cfg.v_sub)
    weights = init_projector(idx, hidden=cfg.hidden, seed=cfg.seed)
    x_all, _ = _projector_inputs(v_src, bmap, idx)
    v_t_all = bridge(v_src, bmap)
    train_idx, held_idx = _split_heldout(n, cfg.heldout_frac)

    arrays = [weights.w1, weights.b1, weights.w2, weights.b2, weights.w3, weights.b3]
    opt = _Adam(arrays, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 101)
    steps_per_epoch = int(np.ceil(len(train_idx) / cfg.batch))
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    history = {"epoch": [], "train_loss": [], "heldout_vertex_err": [], "heldout_param_mse": []}
    best_snapshot = None
    best_err = np.inf
    best_epoch = -1
    initial_loss = None
    bad_streak = 0
    step_no = 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        losses = []
        for lo in range(0, len(order), cfg.batch):
            sel = order[lo:lo + cfg.batch]
            tape = nk.Tape()
            tvars = [tape.var(arr) for arr in arrays]
            theta_hat = _projector_mlp(x_all[sel], *tvars, weights.mask)
            dtheta = theta_hat - theta_star[sel]
            loss = (dtheta * dtheta).mean() * np.float32(cfg.lambda_reg)
            if cfg.lambda_v != 0.0:
                v_hat = bm.skin_batch(target, theta_hat)
                loss = nk.absval(v_hat - v_t_all[sel]).mean() * np.float32(cfg.lambda_v) + loss
            lv = float(loss.value)
            if not np.isfinite(lv):
                raise NumericError(f"training loss went non-finite at step {step_no}")
            if initial_loss is None:
                initial_loss = lv
            bad_streak = bad_streak + 1 if lv > cfg.divergence_factor * initial_loss else 0
            if bad_streak >= cfg.divergence_patience:
                raise NumericError(
                    f"training diverged: loss {lv:.3e} stayed above {cfg.divergence_factor:g}x "
                    f"the initial {initial_loss:.3e} for {cfg.divergence_patience} steps")
            grads = tape.grad(loss, tvars)
            lr_t = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * step_no / total_steps))
            opt.step([grads[t] for t in tvars], lr=lr_t)
            losses.append(lv)
            step_no += 1

        theta_h = _projector_mlp(x_all[held_idx], *arrays, weights.mask)
        v_err = float(_vertex_gap(bm.skin_batch(target, theta_h), v_t_all[held_idx]).mean())
        p_mse = float(np.mean((theta_h - theta_star[held_idx]) ** 2))
        history["epoch"].append(epoch)
        history["train_loss"].append(float(np.mean(losses)))
        history["heldout_vertex_err"].append(v_err)
        history["heldout_param_mse"].append(p_mse)
        if v_err < best_err:
            best_err = v_err
            best_epoch = epoch
            best_snapshot = [arr.copy() for arr in arrays]

    w1, b1, w2, b2, w3, b3 = best_snapshot
    final = ProjectorWeights(w1=w1, b1=b1, w2=w2, b2=b2, w3=w3, b3=b3,
                             subsample=idx, mask=weights.mask.copy())
    return TrainResult(weights=final, history=history, best_epoch=best_epoch)


def save_curve(path, history, fields=("epoch", "train_loss", "heldout_vertex_err")):
    """Write training-history columns as a CSV with the given header."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(fields))
        for row in zip(*[history[f] for f in fields]):
            writer.writerow([row[0]] + [f"{v:.8g}" for v in row[1:]])


# ---------------------------------------------------------------------------
# pose denoiser
# ---------------------------------------------------------------------------


def pose_walk(seed, n, latent=12, sigma=0.2, smooth=0.95):
    """Smooth low-rank random walk over body poses (motion-capture stand-in).

    A stationary AR(1) walk in a small latent space pushed through a fixed
    linear embedding: poses wander smoothly over a latent-dimensional sheet
    with per-coordinate spread around sigma, which is the structure the
    denoiser is supposed to exploit.
    """
    rng = np.random.default_rng(seed)
    width = 3 * bm.NUM_BODY_JOINTS
    emb = rng.normal(0.0, 1.0, size=(latent, width)) * (sigma / np.sqrt(latent))
    z = rng.normal(0.0, 1.0, size=latent)
    kick = np.sqrt(1.0 - smooth * smooth)
    out = np.empty((n, width), dtype=DTYPE)
    for i in range(n):
        out[i] = (z @ emb).astype(DTYPE)
        z = smooth * z + kick * rng.normal(0.0, 1.0, size=latent)
    return out


@dataclass
class DenoiseConfig:
    epochs: int = 200
    batch: int = 128
    lr: float = 3e-3
    hidden: int = 32
    heldout_frac: float = 0.1
    seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 100


@dataclass
class DenoiserWeights:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class DenoiserResult:
    weights: DenoiserWeights
    history: dict
    best_epoch: int


def _denoise_forward(x, w1, b1, w2, b2):
    # residual correction: the zero-noise limit then sits next to identity
    return x + (nk.matmul(nk.relu(nk.matmul(x, w1) + b1), w2) + b2)


def denoise(weights, pose):
    """Nudge a (possibly noisy) body pose toward the training manifold."""
    p = np.asarray(pose, DTYPE)
    single = p.ndim == 1
    x = p[None] if single else p
    if x.ndim != 2 or x.shape[1] != 3 * bm.NUM_BODY_JOINTS:
        raise ShapeError(f"denoise expects (..., {3 * bm.NUM_BODY_JOINTS}) body poses")
    out = _denoise_forward(x, weights.w1, weights.b1, weights.w2, weights.b2)
    return out[0] if single else out


def train_denoiser(poses, noise_sigma, cfg=None):
    """Fit the residual denoiser on (clean + noise -> clean) pairs.

    Fresh noise is drawn per minibatch; the held-out evaluation reuses one
    fixed noise draw so the tracked metric is deterministic.  Divergence and
    non-finite handling mirror train_projector.
    """
    cfg = cfg or DenoiseConfig()
    poses = np.asarray(poses, DTYPE)
    if poses.ndim != 2 or poses.shape[1] != 3 * bm.NUM_BODY_JOINTS:
        raise ShapeError("denoiser training expects (N, 63) body poses")
    n = len(poses)
    if n < 1:
        raise UsageError("denoiser training needs at least one pose")

    rng = np.random.default_rng(cfg.seed + 55)
    width = poses.shape[1]
    w1 = (rng.normal(0.0, 1.0, size=(width, cfg.hidden)) / np.sqrt(width)).astype(DTYPE)
    b1 = np.zeros(cfg.hidden, DTYPE)
    w2 = (rng.normal(0.0, 1.0, size=(cfg.hidden, width)) * (0.1 / np.sqrt(cfg.hidden))).astype(DTYPE)
    b2 = np.zeros(width, DTYPE)
    arrays = [w1, b1, w2, b2]

    train_idx, held_idx = _split_heldout(n, cfg.heldout_frac)
    train_p = poses[train_idx]
    held_p = poses[held_idx]
    eval_rng = np.random.default_rng(cfg.seed + 56)
    if noise_sigma > 0:
        held_noise = eval_rng.normal(0.0, noise_sigma, size=held_p.shape).astype(DTYPE)
    else:
        held_noise = np.zeros_like(held_p)

    opt = _Adam(arrays, lr=cfg.lr)
    total_steps = max(1, cfg.epochs * int(np.ceil(len(train_p) / cfg.batch)))
    history = {"epoch": [], "train_loss": [], "heldout_mse": []}
    best_snapshot = None
    best_mse = np.inf
    best_epoch = -1
    initial_loss = None
    bad_streak = 0
    step_no = 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_p))
        losses = []
        for lo in range(0, len(order), cfg.batch):
            clean = train_p[order[lo:lo + cfg.batch]]
            if noise_sigma > 0:
                noisy = clean + rng.normal(0.0, noise_sigma, size=clean.shape).astype(DTYPE)
            else:
                noisy = clean
            tape = nk.Tape()
            tvars = [tape.var(arr) for arr in arrays]
            out = _denoise_forward(noisy, *tvars)
            diff = out - clean
            loss = (diff * diff).mean()
            lv = float(loss.value)
            if not np.isfinite(lv):
                raise NumericError(f"denoiser loss went non-finite at step {step_no}")
            if initial_loss is None:
                initial_loss = lv
            bad_streak = bad_streak + 1 if lv > cfg.divergence_factor * initial_loss else 0
            if bad_streak >= cfg.divergence_patience:
                raise NumericError(
                    f"denoiser training diverged: loss {lv:.3e} stayed above "
                    f"{cfg.divergence_factor:g}x the initial {initial_loss:.3e}")
            grads = tape.grad(loss, tvars)
            lr_t = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * step_no / total_steps))
            opt.step([grads[t] for t in tvars], lr=lr_t)
            losses.append(lv)
            step_no += 1

        out_h = _denoise_forward(held_p + held_noise, *arrays)
        mse = float(np.mean((out_h - held_p) ** 2))
        history["epoch"].append(epoch)
        history["train_loss"].append(float(np.mean(losses)))
        history["heldout_mse"].append(mse)
        if mse < best_mse:
            best_mse = mse
            best_epoch = epoch
            best_snapshot = [arr.copy() for arr in arrays]

    return DenoiserResult(
        weights=DenoiserWeights(*best_snapshot),
        history=history,
        best_epoch=best_epoch,
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_PROJECTOR_ARRAYS = ("w1", "b1", "w2", "b2", "w3", "b3")
_DENOISER_ARRAYS = ("w1", "b1", "w2", "b2")


def save_projector(path, weights):
    os.makedirs(path, exist_ok=True)
    for name in _PROJECTOR_ARRAYS:
        nk.write_fsb1(os.path.join(path, name + ".fsb1"), getattr(weights, name))
    manifest = {
        "kind": "projector",
        "hidden": [int(weights.w1.shape[1]), int(weights.w2.shape[1])],
        "subsample": [int(i) for i in weights.subsample],
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_projector(path):
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != "projector":
        raise UsageError(f"{path} does not hold projector weights")
    arrs = {name: nk.read_fsb1(os.path.join(path, name + ".fsb1")) for name in _PROJECTOR_ARRAYS}
    return ProjectorWeights(
        subsample=np.asarray(manifest["subsample"], np.int64),
        mask=_output_mask(),
        **arrs,
    )


def save_denoiser(path, weights):
    os.makedirs(path, exist_ok=True)
    for name in _DENOISER_ARRAYS:
        nk.write_fsb1(os.path.join(path, name + ".fsb1"), getattr(weights, name))
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump({"kind": "denoiser", "hidden": int(weights.w1.shape[1])}, fh, indent=1)


def load_denoiser(path):
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != "denoiser":
        raise UsageError(f"{path} does not hold denoiser weights")
    return DenoiserWeights(
        **{name: nk.read_fsb1(os.path.join(path, name + ".fsb1")) for name in _DENOISER_ARRAYS}
    )


def save_bary_map(path, bmap):
    if bmap.corners is None:
        raise UsageError("refusing to store a BaryMap without corner indices")
    os.makedirs(path, exist_ok=True)
    nk.write_fsb1(os.path.join(path, "face_index.fsb1"),
                  bmap.face_index.astype(np.int64))
    nk.write_fsb1(os.path.join(path, "weights.fsb1"), bmap.weights)
    nk.write_fsb1(os.path.join(path, "corners.fsb1"),
                  bmap.corners.astype(np.int64))
    manifest = {
        "kind": "bary_map",
        "targets": int(bmap.face_index.shape[0]),
        "degenerate_targets": [int(i) for i in bmap.degenerate_targets],
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_bary_map(path):
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != "bary_map":
        raise UsageError(f"{path} does not hold a barycentric map")
    # FSB1 carries float32; index payloads are exact there (< 2^24) and only
    # need the cast back
    return bm.BaryMap(
        face_index=nk.read_fsb1(
            os.path.join(path, "face_index.fsb1")).astype(np.int64),
        weights=nk.read_fsb1(os.path.join(path, "weights.fsb1")),
        corners=nk.read_fsb1(
            os.path.join(path, "corners.fsb1")).astype(np.int64),
        degenerate_targets=np.asarray(manifest["degenerate_targets"],
                                      dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# conversion benchmark
# ---------------------------------------------------------------------------


@dataclass
class ConversionReport:
    n_meshes: int
    fit_steps: int
    fit_ms: float          # mean wall time per mesh, iterative path
    project_ms: float      # mean wall time per mesh, feedforward path
    fit_step_ms: float
    ratio: float
    fit_vertex_err: float
    project_vertex_err: float

    def as_dict(self):
        return asdict(self)


def bench_conversion(meshes, bmap, target, fit_cfg, weights):
    """Wall-clock comparison of the two conversion paths on the same meshes.

    Each mesh is fitted individually (that is how the iterative path runs in
    practice) and projected individually.  One throwaway call per path warms
    compiled kernels before the clocks start.
    """
    meshes = np.asarray(meshes, DTYPE)
    if meshes.ndim != 3:
        raise ShapeError("bench_conversion expects (M, Nv, 3) meshes")
    m = len(meshes)
    fit_cfg = fit_cfg or FitConfig()

    fit_batch(meshes[:1], bmap, target, cfg=FitConfig(steps=1))  # warm-up
    fit_errs = np.empty(m)
    t0 = time.perf_counter()
    for i in range(m):
        res = fit_batch(meshes[i:i + 1], bmap, target, cfg=fit_cfg)
        fit_errs[i] = res.vertex_error[0]
    fit_s = time.perf_counter() - t0

    project_forward(meshes[0], bmap, weights)  # warm-up
    repeats = max(1, int(np.ceil(20 / m)))
    t0 = time.perf_counter()
    for _ in range(repeats):
        preds = [project_forward(meshes[i], bmap, weights) for i in range(m)]
    proj_s = (time.perf_counter() - t0) / repeats

    theta_hat = np.stack(preds)
    v_t = bridge(meshes, bmap)
    proj_err = _vertex_gap(bm.skin_batch(target, theta_hat), v_t)

    fit_ms = 1e3 * fit_s / m
    project_ms = max(1e-6, 1e3 * proj_s / m)
    return ConversionReport(
        n_meshes=m,
        fit_steps=fit_cfg.steps,
        fit_ms=fit_ms,
        project_ms=project_ms,
        fit_step_ms=fit_ms / fit_cfg.steps,
        ratio=fit_ms / project_ms,
        fit_vertex_err=float(fit_errs.mean()),
        project_vertex_err=float(proj_err.mean()),
    )
