"""Toy articulated body models: kinematic tree, LBS skinning, synthetic meshes.

Two parametric templates share a 22-joint tree and a 76-dim pose/shape vector
(66 rotation params as per-joint axis-angle, 10 shape coefficients).  The
"mhr" template is a tube-body mesh built procedurally; the "smpl" template is
sampled directly on mhr faces so that a ground-truth barycentric
correspondence between them is known by construction.

All skinning paths (single, batched, taped) share the same accumulation
order, so batched evaluation is bit-identical to per-pose evaluation.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import numkit as nk
from .numkit import DTYPE, ShapeError, UsageError

NUM_JOINTS = 22
NUM_BODY_JOINTS = 21  # all joints except the root
SHAPE_DIM = 10
PARAM_DIM = NUM_JOINTS * 3 + SHAPE_DIM  # 76

# Kinematic tree: parents[j] < j, root is the pelvis.
PARENTS = np.array(
    [-1, 0, 1, 2, 3, 4, 0, 6, 7, 8, 0, 10, 11, 12, 3, 14, 15, 16, 3, 18, 19, 20],
    dtype=np.int64,
)

JOINT_NAMES = [
    "pelvis", "spine1", "spine2", "chest", "neck", "head",
    "l_hip", "l_knee", "l_ankle", "l_foot",
    "r_hip", "r_knee", "r_ankle", "r_foot",
    "l_shoulder", "l_elbow", "l_wrist", "l_hand",
    "r_shoulder", "r_elbow", "r_wrist", "r_hand",
]

PELVIS = 0
LEFT_WRIST, LEFT_HAND = 16, 17
RIGHT_WRIST, RIGHT_HAND = 20, 21

# Slices into the 63-dim body_pose vector (joint j occupies (j-1)*3:(j)*3).
LEFT_HAND_POSE = slice(48, 51)
RIGHT_HAND_POSE = slice(60, 63)

# Rest joint layout before per-seed jitter: x points left, y up, z forward.
_BASE_JOINTS = np.array([
    [0.00, 0.00, 0.00],    # pelvis
    [0.00, 0.10, 0.01],    # spine1
    [0.00, 0.22, 0.015],   # spine2
    [0.00, 0.34, 0.01],    # chest
    [0.00, 0.48, 0.00],    # neck
    [0.00, 0.60, 0.02],    # head
    [0.09, -0.04, 0.00],   # l_hip
    [0.10, -0.46, 0.01],   # l_knee
    [0.11, -0.86, -0.02],  # l_ankle
    [0.12, -0.92, 0.10],   # l_foot
    [-0.09, -0.04, 0.00],  # r_hip
    [-0.10, -0.46, 0.01],  # r_knee
    [-0.11, -0.86, -0.02], # r_ankle
    [-0.12, -0.92, 0.10],  # r_foot
    [0.17, 0.42, 0.00],    # l_shoulder
    [0.44, 0.40, -0.02],   # l_elbow
    [0.69, 0.39, -0.01],   # l_wrist
    [0.80, 0.385, 0.00],   # l_hand
    [-0.17, 0.42, 0.00],   # r_shoulder
    [-0.44, 0.40, -0.02],  # r_elbow
    [-0.69, 0.39, -0.01],  # r_wrist
    [-0.80, 0.385, 0.00],  # r_hand
], dtype=np.float64)

# Tube radius for the bone ending at each child joint.
_RADIUS_BY_CHILD = {
    1: 0.115, 2: 0.125, 3: 0.12, 4: 0.05, 5: 0.085,
    6: 0.08, 7: 0.065, 8: 0.05, 9: 0.04,
    10: 0.08, 11: 0.065, 12: 0.05, 13: 0.04,
    14: 0.06, 15: 0.05, 16: 0.042, 17: 0.038,
    18: 0.06, 19: 0.05, 20: 0.042, 21: 0.038,
}


class ProjectionError(ValueError):
    """Raised when a point cannot be projected (non-positive depth)."""


@dataclass
class BodyTemplate:
    name: str
    vertices_rest: np.ndarray    # (Nv, 3) float32
    faces: np.ndarray            # (F, 3) int64
    joints_rest: np.ndarray      # (22, 3) float32
    parents: np.ndarray          # (22,) int64
    skin_weights: np.ndarray     # (Nv, 22) float32, rows sum to 1
    shape_basis: np.ndarray      # (Nv, 3, 10) float32
    corrective_basis: np.ndarray  # (Nv, 3, 8) float32
    corrective_gate: np.ndarray  # (8, 21) float32, pose-magnitude gating

    @property
    def num_vertices(self):
        return self.vertices_rest.shape[0]


@dataclass
class BaryMap:
    """Barycentric attachment of target vertices onto source faces."""

    face_index: np.ndarray  # (Nt,) int64
    weights: np.ndarray     # (Nt, 3) float32, nonneg, rows sum to 1
    corners: np.ndarray = None  # (Nt, 3) int64 source vertex ids per target
    degenerate_targets: np.ndarray = field(
        default_factory=lambda: np.zeros(0, dtype=np.int64)
    )


@dataclass
class PoseState:
    global_orient: np.ndarray  # (3,)
    body_pose: np.ndarray      # (63,)
    shape: np.ndarray          # (10,)

    @classmethod
    def zero(cls):
        return cls(
            global_orient=np.zeros(3, dtype=DTYPE),
            body_pose=np.zeros(63, dtype=DTYPE),
            shape=np.zeros(SHAPE_DIM, dtype=DTYPE),
        )

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=DTYPE).reshape(-1)
        if vec.shape[0] != PARAM_DIM:
            raise ShapeError("pose vector must have %d entries, got %d"
                             % (PARAM_DIM, vec.shape[0]))
        return cls(
            global_orient=vec[0:3].copy(),
            body_pose=vec[3:66].copy(),
            shape=vec[66:].copy(),
        )

    def as_vector(self):
        # (76,)
        return np.concatenate([
            np.asarray(self.global_orient, dtype=DTYPE).reshape(3),
            np.asarray(self.body_pose, dtype=DTYPE).reshape(63),
            np.asarray(self.shape, dtype=DTYPE).reshape(SHAPE_DIM),
        ]).astype(DTYPE, copy=False)

    def copy(self):
        return PoseState(self.global_orient.copy(), self.body_pose.copy(),
                         self.shape.copy())


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float


@dataclass
class FKResult:
    joints: np.ndarray          # (22, 3) world joint positions
    rel_transforms: np.ndarray  # (22, 3, 4) rest-relative [R | t] per joint


def rodrigues(omega):
    """Axis-angle vectors to rotation matrices, (..., 3) -> (..., 3, 3).

    Works on plain arrays and on tape variables.  A second-order Taylor
    branch handles near-zero angles so gradients stay finite there.
    """
    wx = omega[..., 0]
    wy = omega[..., 1]
    wz = omega[..., 2]
    theta2 = wx * wx + wy * wy + wz * wz
    small = nk.value_of(theta2) < np.float32(1e-12)
    one = np.float32(1.0)
    # guard the divisor; the guarded lanes take the Taylor branch anyway
    safe = nk.where(small, np.ones_like(nk.value_of(theta2)), theta2)
    theta = nk.sqrt(safe)
    s = nk.where(small, one - theta2 * np.float32(1.0 / 6.0),
                 nk.sin(theta) / theta)
    c = nk.where(small, np.float32(0.5) - theta2 * np.float32(1.0 / 24.0),
                 (one - nk.cos(theta)) / safe)
    r00 = one - (wy * wy + wz * wz) * c
    r01 = wx * wy * c - wz * s
    r02 = wx * wz * c + wy * s
    r10 = wx * wy * c + wz * s
    r11 = one - (wx * wx + wz * wz) * c
    r12 = wy * wz * c - wx * s
    r20 = wx * wz * c - wy * s
    r21 = wy * wz * c + wx * s
    r22 = one - (wx * wx + wy * wy) * c
    rows = [
        nk.stack([r00, r01, r02], axis=-1),
        nk.stack([r10, r11, r12], axis=-1),
        nk.stack([r20, r21, r22], axis=-1),
    ]
    return nk.stack(rows, axis=-2)


@njit(
    "void(float32[:, :, ::1], float32[:, ::1], int64[::1], float32[:, ::1],"
    " float32[:, :, ::1], float32[:, ::1], float32[:, ::1])",
    cache=True,
)
def _fk_compose(rot_local, t_local, parents, rest_joints, out_rot, out_t, out_at):
    # Chain composition with a fixed accumulation order so the python-loop
    # path can reproduce it bit for bit.
    nj = rot_local.shape[0]
    for j in range(nj):
        p = parents[j]
        if p < 0:
            for a in range(3):
                for b in range(3):
                    out_rot[j, a, b] = rot_local[j, a, b]
                out_t[j, a] = t_local[j, a]
        else:
            for a in range(3):
                for b in range(3):
                    acc = out_rot[p, a, 0] * rot_local[j, 0, b]
                    acc += out_rot[p, a, 1] * rot_local[j, 1, b]
                    acc += out_rot[p, a, 2] * rot_local[j, 2, b]
                    out_rot[j, a, b] = acc
                acc2 = out_rot[p, a, 0] * t_local[j, 0]
                acc2 += out_rot[p, a, 1] * t_local[j, 1]
                acc2 += out_rot[p, a, 2] * t_local[j, 2]
                out_t[j, a] = acc2 + out_t[p, a]
        # rest-relative translation: t_world - R_world @ g_rest
        for a in range(3):
            acc3 = out_rot[j, a, 0] * rest_joints[j, 0]
            acc3 += out_rot[j, a, 1] * rest_joints[j, 1]
            acc3 += out_rot[j, a, 2] * rest_joints[j, 2]
            out_at[j, a] = out_t[j, a] - acc3


def _mat3(a, b):
    # (..., 3, 3) x (..., 3, 3), left-to-right accumulation
    return (a[..., :, 0:1] * b[..., 0:1, :]
            + a[..., :, 1:2] * b[..., 1:2, :]
            + a[..., :, 2:3] * b[..., 2:3, :])


def _matvec3(r, v):
    # (..., 3, 3) x (..., 3) -> (..., 3)
    vv = v.reshape(v.shape[:-1] + (1, 3)) if isinstance(v, nk.Var) \
        else np.reshape(v, np.shape(v)[:-1] + (1, 3))
    return (r * vv).sum(axis=-1)


def _local_translations(template):
    # (22, 3): offset of each joint from its parent at rest
    g = template.joints_rest
    t = g.copy()
    for j in range(1, NUM_JOINTS):
        t[j] = g[j] - g[template.parents[j]]
    return np.ascontiguousarray(t, dtype=DTYPE)


def fk_batch(template, pose_vecs, use_kernel=None):
    """Forward kinematics over stacked pose vectors.

    pose_vecs: (B, 76) array or tape Var.  Returns (joints, rel) with
    joints (B, 22, 3) and rel (B, 22, 3, 4).  The compiled and loop paths
    produce bit-identical results.
    """
    is_var = isinstance(pose_vecs, nk.Var)
    vals = nk.value_of(pose_vecs)
    if vals.ndim != 2 or vals.shape[1] != PARAM_DIM:
        raise ShapeError("pose_vecs must be (B, %d), got %r"
                         % (PARAM_DIM, vals.shape))
    if use_kernel is None:
        use_kernel = not is_var
    if use_kernel and is_var:
        raise UsageError("compiled forward kinematics path does not record gradients")
    bsz = vals.shape[0]
    t_local = _local_translations(template)
    rest = np.ascontiguousarray(template.joints_rest, dtype=DTYPE)
    parents = np.ascontiguousarray(template.parents, dtype=np.int64)

    if use_kernel:
        rotm = rodrigues(np.ascontiguousarray(vals[:, :66]).reshape(bsz, 22, 3))
        joints = np.empty((bsz, NUM_JOINTS, 3), dtype=DTYPE)
        rel = np.empty((bsz, NUM_JOINTS, 3, 4), dtype=DTYPE)
        out_rot = np.empty((NUM_JOINTS, 3, 3), dtype=DTYPE)
        at = np.empty((NUM_JOINTS, 3), dtype=DTYPE)
        for b in range(bsz):
            _fk_compose(rotm[b], t_local, parents, rest, out_rot, joints[b], at)
            rel[b, :, :, :3] = out_rot
            rel[b, :, :, 3] = at
        return joints, rel

    # generic path: explicit per-joint loop, shared by the taped variant
    # and the unconsolidated reference evaluation
    rots = pose_vecs[:, :66].reshape((bsz, 22, 3))
    world_rot = [None] * NUM_JOINTS
    world_t = [None] * NUM_JOINTS
    rel_t = [None] * NUM_JOINTS
    for j in range(NUM_JOINTS):
        rj = rodrigues(rots[:, j])  # (B, 3, 3)
        p = int(parents[j])
        if p < 0:
            world_rot[j] = rj
            world_t[j] = np.broadcast_to(t_local[j], (bsz, 3)).astype(DTYPE)
        else:
            world_rot[j] = _mat3(world_rot[p], rj)
            world_t[j] = _matvec3(world_rot[p],
                                  np.broadcast_to(t_local[j], (bsz, 3)).astype(DTYPE)
                                  ) + world_t[p]
        rel_t[j] = world_t[j] - _matvec3(
            world_rot[j], np.broadcast_to(rest[j], (bsz, 3)).astype(DTYPE))
    joints = nk.stack(world_t, axis=1)            # (B, 22, 3)
    rot_all = nk.stack(world_rot, axis=1)         # (B, 22, 3, 3)
    at_all = nk.stack(rel_t, axis=1)              # (B, 22, 3)
    rel = nk.concat(
        [rot_all, at_all.reshape((bsz, NUM_JOINTS, 3, 1))], axis=3)
    return joints, rel


def forward_kinematics(template, pose, use_kernel=True):
    """Single-pose FK.  Returns an FKResult with world joints and per-joint
    rest-relative transforms."""
    vec = pose.as_vector()[None, :]
    joints, rel = fk_batch(template, vec, use_kernel=use_kernel)
    return FKResult(joints=joints[0], rel_transforms=rel[0])


def skin_batch(template, pose_vecs, correctives=False, use_kernel=None):
    """Linear blend skinning over stacked pose vectors: (B, 76) -> (B, Nv, 3).

    Accepts plain arrays or tape Vars.  Batched output rows are bit-identical
    to independent single-pose calls.
    """
    is_var = isinstance(pose_vecs, nk.Var)
    vals = nk.value_of(pose_vecs)
    bsz = vals.shape[0]
    nv = template.num_vertices
    _, rel = fk_batch(template, pose_vecs, use_kernel=use_kernel)

    # blend rest-relative transforms with skin weights in one matmul
    a_flat = rel.reshape((bsz, NUM_JOINTS, 12)).transpose((1, 0, 2)) \
        .reshape((NUM_JOINTS, bsz * 12))
    blended = nk.matmul(template.skin_weights, a_flat)  # (Nv, B*12)
    t_mats = blended.reshape((nv, bsz, 3, 4)).transpose((1, 0, 2, 3))

    coeffs = pose_vecs[:, 66:]  # (B, 10)
    basis_t = np.ascontiguousarray(
        template.shape_basis.reshape(nv * 3, SHAPE_DIM).T)
    offs = nk.matmul(coeffs, basis_t)  # (B, Nv*3)
    v_shaped = offs.reshape((bsz, nv, 3)) + template.vertices_rest[None, :, :]

    if correctives:
        omega = pose_vecs[:, 3:66].reshape((bsz, NUM_BODY_JOINTS, 3))
        mag2 = (omega * omega).sum(axis=-1)  # (B, 21) squared angles
        gate_t = np.ascontiguousarray(template.corrective_gate.T)  # (21, 8)
        gates = nk.matmul(mag2, gate_t)  # (B, 8)
        corr_t = np.ascontiguousarray(
            template.corrective_basis.reshape(nv * 3, 8).T)
        v_shaped = v_shaped + nk.matmul(gates, corr_t).reshape((bsz, nv, 3))

    applied = (t_mats[..., 0:3] * v_shaped.reshape((bsz, nv, 1, 3))).sum(axis=-1)
    return applied + t_mats[..., 3]


def skin(template, pose, correctives=False, use_kernel=True):
    """Skin a single PoseState.  Returns (Nv, 3) float32."""
    vec = pose.as_vector()[None, :]
    return skin_batch(template, vec, correctives=correctives,
                      use_kernel=use_kernel)[0]


def project(points, cam):
    """Pinhole projection, (..., 3) -> (..., 2).  Raises ProjectionError on
    non-positive depth."""
    pts = np.asarray(points, dtype=DTYPE)
    if pts.shape[-1] != 3:
        raise ShapeError("expected (..., 3) points, got %r" % (pts.shape,))
    z = pts[..., 2]
    if np.any(z <= 0.0):
        raise ProjectionError("point depth must be positive for projection")
    u = pts[..., 0] / z * np.float32(cam.fx) + np.float32(cam.cx)
    v = pts[..., 1] / z * np.float32(cam.fy) + np.float32(cam.cy)
    return np.stack([u, v], axis=-1).astype(DTYPE)


# ---------------------------------------------------------------------------
# synthetic template construction


def _split_counts(total, parts):
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def _ring_layout(quota):
    """Choose (rings, segments) with rings*segments <= quota, preferring an
    exact fit, then a roughly tube-like aspect."""
    if quota < 6:
        raise UsageError("per-bone vertex quota too small: %d" % quota)
    best = None
    ideal = np.sqrt(quota / 3.0)
    for rings in range(2, min(9, quota // 3 + 1)):
        segs = quota // rings
        if segs < 3:
            continue
        used = rings * segs
        score = (used, -abs(rings - ideal))
        if best is None or score > best[0]:
            best = (score, rings, segs)
    _, rings, segs = best
    return rings, segs


def _frame_for_axis(u):
    # two unit vectors orthogonal to u
    pick = np.argmin(np.abs(u))
    e = np.zeros(3)
    e[pick] = 1.0
    n1 = np.cross(u, e)
    n1 /= np.linalg.norm(n1)
    n2 = np.cross(u, n1)
    return n1, n2


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _build_tube_body(name, joints, rng, total_vertices):
    """Procedural tube-per-bone body mesh around a rest skeleton.

    Returns (template, bone_meta) where bone_meta[b] records the vertex and
    face layout of bone b for later surface sampling.
    """
    quotas = _split_counts(total_vertices, NUM_BODY_JOINTS)
    verts = []
    faces = []
    weights = []
    bone_meta = []
    for b in range(NUM_BODY_JOINTS):
        child = b + 1
        parent = int(PARENTS[child])
        a = joints[parent]
        c = joints[child]
        axis = c - a
        length = np.linalg.norm(axis)
        u = axis / length
        n1, n2 = _frame_for_axis(u)
        rings, segs = _ring_layout(quotas[b])
        v_off = len(verts)
        f_off = len(faces)
        r0 = _RADIUS_BY_CHILD[child]
        ts = np.linspace(0.12, 0.88, rings)
        for t in ts:
            center = a + axis * t
            w_child = 0.5 * _smoothstep((t - 0.25) / 0.75)
            for s in range(segs):
                ang = 2.0 * np.pi * s / segs
                rad = r0 * (1.06 - 0.18 * t) * (1.0 + rng.uniform(-0.04, 0.04))
                verts.append(center + rad * (np.cos(ang) * n1 + np.sin(ang) * n2))
                row = np.zeros(NUM_JOINTS)
                row[parent] = 1.0 - w_child
                row[child] = w_child
                weights.append(row)
        for r in range(rings - 1):
            for s in range(segs):
                s2 = (s + 1) % segs
                i00 = v_off + r * segs + s
                i01 = v_off + r * segs + s2
                i10 = v_off + (r + 1) * segs + s
                i11 = v_off + (r + 1) * segs + s2
                faces.append((i00, i01, i10))
                faces.append((i01, i11, i10))
        bone_meta.append({
            "v_off": v_off, "rings": rings, "segs": segs,
            "f_off": f_off, "cells": (rings - 1) * segs,
        })

    # pad to the exact vertex budget with small "stud" vertices welded onto
    # existing edges; each stud carries one sliver face so every vertex is
    # referenced by the mesh
    studs = total_vertices - len(verts)
    for k in range(studs):
        meta = bone_meta[k % NUM_BODY_JOINTS]
        segs = meta["segs"]
        s = (k // NUM_BODY_JOINTS) % segs
        ia = meta["v_off"] + s
        ib = meta["v_off"] + (s + 1) % segs
        pa, pb = verts[ia], verts[ib]
        edge = pb - pa
        n1, n2 = _frame_for_axis(edge / np.linalg.norm(edge))
        pos = 0.5 * (pa + pb) + 0.01 * n1
        verts.append(pos)
        weights.append(np.array(weights[ia]))
        faces.append((ia, ib, len(verts) - 1))

    verts = np.asarray(verts, dtype=np.float64)
    nv = verts.shape[0]

    # smooth low-frequency displacement fields for the shape space
    basis = np.zeros((nv, 3, SHAPE_DIM))
    for k in range(SHAPE_DIM):
        f1 = rng.normal(size=3) * (2.0 + 0.3 * k)
        f2 = rng.normal(size=3) * (2.0 + 0.3 * k)
        d1 = rng.normal(size=3)
        d1 /= np.linalg.norm(d1)
        d2 = rng.normal(size=3)
        d2 /= np.linalg.norm(d2)
        ph1, ph2 = rng.uniform(0.0, 2.0 * np.pi, size=2)
        basis[:, :, k] = 0.03 * (
            np.sin(verts @ f1 + ph1)[:, None] * d1
            + np.cos(verts @ f2 + ph2)[:, None] * d2
        )

    # orthonormal corrective displacement directions, gated by pose magnitude
    q, _ = np.linalg.qr(rng.standard_normal((nv * 3, 8)))
    corrective = (0.02 * q).reshape(nv, 3, 8)
    gate = rng.uniform(0.2, 1.0, size=(8, NUM_BODY_JOINTS)) * (0.5 / NUM_BODY_JOINTS)

    template = BodyTemplate(
        name=name,
        vertices_rest=verts.astype(DTYPE),
        faces=np.asarray(faces, dtype=np.int64),
        joints_rest=joints.astype(DTYPE),
        parents=PARENTS.copy(),
        skin_weights=np.asarray(weights, dtype=DTYPE),
        shape_basis=basis.astype(DTYPE),
        corrective_basis=corrective.astype(DTYPE),
        corrective_gate=gate.astype(DTYPE),
    )
    return template, bone_meta


def _sample_template_on_faces(source, bone_meta, rng, total_vertices, name):
    """Build a second template whose rest vertices sit on source faces at
    known interior barycentric coordinates."""
    quotas = _split_counts(total_vertices, NUM_BODY_JOINTS)
    face_ids = []
    barys = []
    faces = []
    v_count = 0
    for b in range(NUM_BODY_JOINTS):
        meta = bone_meta[b]
        rings_m, segs_m = meta["rings"], meta["segs"]
        rings_s, segs_s = _ring_layout(quotas[b])
        v_off = v_count
        for rr in range(rings_s):
            r = min(int(rr * (rings_m - 1) / rings_s), rings_m - 2)
            for ss in range(segs_s):
                s = int(ss * segs_m / segs_s) % segs_m
                fid = meta["f_off"] + (r * segs_m + s) * 2
                w = rng.uniform(0.15, 0.75, size=3)
                w /= w.sum()
                face_ids.append(fid)
                barys.append(w)
                v_count += 1
        for r in range(rings_s - 1):
            for s in range(segs_s):
                s2 = (s + 1) % segs_s
                i00 = v_off + r * segs_s + s
                i01 = v_off + r * segs_s + s2
                i10 = v_off + (r + 1) * segs_s + s
                i11 = v_off + (r + 1) * segs_s + s2
                faces.append((i00, i01, i10))
                faces.append((i01, i11, i10))

    studs = total_vertices - v_count
    tube_faces = sum(m["cells"] for m in bone_meta) * 2
    for k in range(studs):
        fid = int(rng.integers(0, tube_faces))
        w = rng.uniform(0.15, 0.75, size=3)
        w /= w.sum()
        face_ids.append(fid)
        barys.append(w)
        v_count += 1
        faces.append((v_count - 1, v_count - 2, v_count - 3))

    face_ids = np.asarray(face_ids, dtype=np.int64)
    barys = np.asarray(barys, dtype=np.float64)  # (Nt, 3)

    corners = source.vertices_rest.astype(np.float64)[source.faces[face_ids]]
    verts = np.einsum("tc,tcx->tx", barys, corners)

    def combine(attr):
        flat = attr.reshape(source.num_vertices, -1).astype(np.float64)
        out = np.einsum("tc,tcd->td", barys, flat[source.faces[face_ids]])
        return out.reshape((total_vertices,) + attr.shape[1:]).astype(DTYPE)

    template = BodyTemplate(
        name=name,
        vertices_rest=verts.astype(DTYPE),
        faces=np.asarray(faces, dtype=np.int64),
        joints_rest=source.joints_rest.copy(),
        parents=source.parents.copy(),
        skin_weights=combine(source.skin_weights),
        shape_basis=combine(source.shape_basis),
        corrective_basis=combine(source.corrective_basis),
        corrective_gate=source.corrective_gate.copy(),
    )
    gt = BaryMap(
        face_index=face_ids,
        weights=barys.astype(DTYPE),
        corners=source.faces[face_ids].astype(np.int64),
    )
    return template, gt


def validate_template(template):
    """Cheap structural checks; raises on malformed templates."""
    nv = template.num_vertices
    if template.skin_weights.shape != (nv, NUM_JOINTS):
        raise ShapeError("skin_weights must be (Nv, %d)" % NUM_JOINTS)
    if template.shape_basis.shape != (nv, 3, SHAPE_DIM):
        raise ShapeError("shape_basis must be (Nv, 3, %d)" % SHAPE_DIM)
    if template.parents[0] != -1 or np.any(
            template.parents[1:] >= np.arange(1, NUM_JOINTS)):
        raise UsageError("parents must define a forward-ordered tree")
    sums = template.skin_weights.sum(axis=1)
    if np.max(np.abs(sums - 1.0)) > 1e-4 or np.min(template.skin_weights) < -1e-6:
        raise UsageError("skin weight rows must be a convex combination")
    if template.faces.min() < 0 or template.faces.max() >= nv:
        raise UsageError("face indices out of range")
    used = np.zeros(nv, dtype=bool)
    used[template.faces.reshape(-1)] = True
    if not used.all():
        raise UsageError("every vertex must appear in at least one face")


def make_toy_models(seed=0, mhr_vertices=1200, smpl_vertices=600):
    """Construct the (mhr, smpl) toy template pair plus the ground-truth
    barycentric correspondence of smpl vertices onto mhr faces.

    Deterministic per seed; exact vertex counts are honored.
    """
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(-0.01, 0.01, size=(NUM_JOINTS, 3))
    jitter[0] = 0.0
    joints = _BASE_JOINTS + jitter
    mhr, bone_meta = _build_tube_body("mhr_toy", joints, rng, mhr_vertices)
    smpl, gt = _sample_template_on_faces(mhr, bone_meta, rng, smpl_vertices,
                                         "smpl_toy")
    validate_template(mhr)
    validate_template(smpl)
    return mhr, smpl, gt


# ---------------------------------------------------------------------------
# template serialization: float arrays as .fsb1, integers and name in a
# json sidecar

_FLOAT_FIELDS = ("vertices_rest", "joints_rest", "skin_weights",
                 "shape_basis", "corrective_basis", "corrective_gate")


def save_template(template, dirpath):
    os.makedirs(dirpath, exist_ok=True)
    for name in _FLOAT_FIELDS:
        nk.write_fsb1(os.path.join(dirpath, name + ".fsb1"),
                      getattr(template, name))
    meta = {
        "name": template.name,
        "parents": template.parents.tolist(),
        "faces": template.faces.tolist(),
    }
    with open(os.path.join(dirpath, "meta.json"), "w") as fh:
        json.dump(meta, fh)


def load_template(dirpath):
    with open(os.path.join(dirpath, "meta.json")) as fh:
        meta = json.load(fh)
    arrays = {name: nk.read_fsb1(os.path.join(dirpath, name + ".fsb1"))
              for name in _FLOAT_FIELDS}
    template = BodyTemplate(
        name=meta["name"],
        faces=np.asarray(meta["faces"], dtype=np.int64),
        parents=np.asarray(meta["parents"], dtype=np.int64),
        **arrays,
    )
    validate_template(template)
    return template
