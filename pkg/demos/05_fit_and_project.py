"""Mesh conversion two ways: iterative fitting vs the trained projector.

Converting a dense-template mesh into the coarse template's parameters is
classically a few hundred steps of gradient descent per mesh.  Distilling
those fits into a small MLP turns conversion into one matrix pass, a
measured per-mesh speedup of several orders of magnitude.  The accuracy gap
is the honest cost: on exactly-skinnable synthetic meshes the iterative fit
converges near the correspondence floor, and with a few hundred training
pairs the MLP lands several multiples above it.

Sizes here are trimmed so the whole script runs in about two minutes; the
acceptance suite runs the full-scale version of this study.

Run from the repository root:  python3 demos/05_fit_and_project.py
"""

import time

import numpy as np

from fsb import bodymodel as bm
from fsb import projection as pj

# -- 1. a small world and a training set ---------------------------------------

mhr, smpl, gt = bm.make_toy_models(seed=0, mhr_vertices=480, smpl_vertices=240)
rng = np.random.default_rng(30)


def draw_poses(n):
    v = np.zeros((n, bm.PARAM_DIM), dtype=np.float32)
    v[:, :66] = rng.normal(0.0, 0.2, size=(n, 66)).astype(np.float32)
    v[:, 66:] = rng.normal(0.0, 0.45, size=(n, 10)).astype(np.float32)
    # the projector's output mask pins the wrist-child slots to rest, so the
    # study data keeps the same convention
    for sl in (bm.LEFT_HAND_POSE, bm.RIGHT_HAND_POSE):
        v[:, 3 + sl.start:3 + sl.stop] = 0.0
    return v


train_meshes = bm.skin_batch(mhr, draw_poses(300))
held_meshes = bm.skin_batch(mhr, draw_poses(20))

# -- 2. the iterative oracle ----------------------------------------------------

fit_cfg = pj.FitConfig(steps=300)
t0 = time.time()
held_fit = pj.fit_batch(held_meshes, gt, smpl, fit_cfg)
print("fit 20 held-out meshes: %.0fs, mean vertex error %.4f"
      % (time.time() - t0, held_fit.vertex_error.mean()))

t0 = time.time()
theta_star = pj.fit_batch(train_meshes, gt, smpl, fit_cfg).params
print("fit 300 training meshes: %.0fs" % (time.time() - t0))

# -- 3. distill into the projector ----------------------------------------------

t0 = time.time()
train_cfg = pj.TrainConfig(epochs=120, v_sub=60, hidden=(128, 96), lr=3e-3)
res = pj.train_projector(train_meshes, theta_star, gt, smpl, train_cfg)
hist = res.history["heldout_vertex_err"]
print("train projector: %.0fs, internal held-out %.4f -> %.4f (best epoch %d)"
      % (time.time() - t0, hist[0], hist[res.best_epoch], res.best_epoch))

# -- 4. parity and speed ----------------------------------------------------------

theta_hat = pj.project_batch(held_meshes, gt, res.weights)
v_t = pj.bridge(held_meshes, gt)
proj_err = np.linalg.norm(
    bm.skin_batch(smpl, theta_hat).astype(np.float64)
    - v_t.astype(np.float64), axis=-1).mean()
print("\nprojector held-out vertex error %.4f (iterative %.4f, ratio %.1fx)"
      % (proj_err, held_fit.vertex_error.mean(),
         proj_err / held_fit.vertex_error.mean()))

bench = pj.bench_conversion(held_meshes[:4], gt, smpl, fit_cfg, res.weights)
print("per-mesh wall time: fit %.0f ms vs project %.3f ms -> %.0fx"
      % (bench.fit_ms, bench.project_ms, bench.ratio))

# -- 5. the kinematic denoising prior --------------------------------------------
# a tiny autoencoder over plausible body poses; it pulls noisy parameter
# vectors back toward the walk manifold

poses = pj.pose_walk(seed=5, n=1500)
den = pj.train_denoiser(poses, noise_sigma=0.1,
                        cfg=pj.DenoiseConfig(epochs=80))
noisy = poses[100] + rng.normal(0, 0.1, size=poses.shape[1]).astype(np.float32)
cleaned = pj.denoise(den.weights, noisy)
print("\ndenoiser: noisy gap %.4f -> cleaned gap %.4f"
      % (np.linalg.norm(noisy - poses[100]),
         np.linalg.norm(cleaned - poses[100])))
