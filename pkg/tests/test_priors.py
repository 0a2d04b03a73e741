"""Tests for the decoupled spatial priors: keypoint stub, hand-box formula,
crop grids, scene synthesis and rendering."""

import numpy as np
import pytest

import fsb.bodymodel as bm
import fsb.numkit as nk
import fsb.priors as pr
from conftest import random_pose_vector


def _default_scene(template, seed=3):
    rng = np.random.default_rng(seed)
    return pr.random_scene(rng, template, image_size=(256, 256))


# ---------------------------------------------------------------------------
# BBox / Keypoints2D invariants


def test_bbox_rejects_inverted():
    with pytest.raises(nk.UsageError):
        pr.BBox(10.0, 0.0, 5.0, 20.0)
    with pytest.raises(nk.UsageError):
        pr.BBox(0.0, 20.0, 5.0, 20.0)
    box = pr.BBox(1.0, 2.0, 4.0, 8.0)
    assert box.width == 3.0 and box.height == 6.0


def test_keypoints_confidence_range():
    xy = np.zeros((22, 2), dtype=np.float32)
    with pytest.raises(nk.UsageError):
        pr.Keypoints2D(xy, np.full(22, 1.5, dtype=np.float32))
    kp = pr.Keypoints2D(xy, np.ones(22, dtype=np.float32))
    assert kp.xy.shape == (22, 2)


# ---------------------------------------------------------------------------
# detect_stub


def test_detect_stub_zero_sigma_exact(toy_pair):
    mhr, _, _ = toy_pair
    scene = _default_scene(mhr)
    box, kp = pr.detect_stub(scene, noise_sigma=0.0, seed=11)
    assert np.array_equal(kp.xy, scene.keypoints2d)
    assert np.all(kp.confidence >= 0.0) and np.all(kp.confidence <= 1.0)
    # box covers every keypoint
    assert np.all(kp.xy[:, 0] >= box.x_min) and np.all(kp.xy[:, 0] <= box.x_max)
    assert np.all(kp.xy[:, 1] >= box.y_min) and np.all(kp.xy[:, 1] <= box.y_max)


def test_detect_stub_deterministic_in_seed(toy_pair):
    mhr, _, _ = toy_pair
    scene = _default_scene(mhr)
    box_a, kp_a = pr.detect_stub(scene, noise_sigma=4.0, seed=5)
    box_b, kp_b = pr.detect_stub(scene, noise_sigma=4.0, seed=5)
    assert np.array_equal(kp_a.xy, kp_b.xy)
    assert (box_a.x_min, box_a.y_min, box_a.x_max, box_a.y_max) == \
        (box_b.x_min, box_b.y_min, box_b.x_max, box_b.y_max)
    _, kp_c = pr.detect_stub(scene, noise_sigma=4.0, seed=6)
    assert not np.array_equal(kp_a.xy, kp_c.xy)


def test_detect_stub_noise_statistics(toy_pair):
    # empirical per-coordinate std over many draws within 10% of sigma
    mhr, _, _ = toy_pair
    scene = _default_scene(mhr)
    sigma = 4.0
    deltas = []
    for s in range(1000):
        _, kp = pr.detect_stub(scene, noise_sigma=sigma, seed=s)
        deltas.append(kp.xy - scene.keypoints2d)
    deltas = np.stack(deltas)
    measured = deltas.std()
    assert abs(measured - sigma) <= 0.1 * sigma


def test_detect_stub_box_padded_under_noise(toy_pair):
    # the box still covers the true keypoints when estimated from noisy ones
    mhr, _, _ = toy_pair
    scene = _default_scene(mhr)
    for s in range(50):
        box, _ = pr.detect_stub(scene, noise_sigma=8.0, seed=s)
        kp = scene.keypoints2d
        assert np.all(kp[:, 0] >= box.x_min - 1e-3)
        assert np.all(kp[:, 0] <= box.x_max + 1e-3)
        assert np.all(kp[:, 1] >= box.y_min - 1e-3)
        assert np.all(kp[:, 1] <= box.y_max + 1e-3)


# ---------------------------------------------------------------------------
# hand_box


def test_hand_box_formula():
    body = pr.BBox(0.0, 0.0, 300.0, 400.0)
    box = pr.hand_box((100.0, 200.0), body, alpha=3.0)
    assert np.allclose(
        [box.x_min, box.y_min, box.x_max, box.y_max], [50.0, 150.0, 150.0, 250.0])


def test_hand_box_corner_clamp_positive_area():
    body = pr.BBox(0.0, 0.0, 300.0, 240.0)
    box = pr.hand_box((0.0, 0.0), body, alpha=3.0, image_size=(320, 240))
    assert box.width > 0 and box.height > 0
    assert box.x_min >= 0.0 and box.y_min >= 0.0
    assert box.x_max <= 319.0 and box.y_max <= 239.0
    # side preserved when it fits
    assert abs(box.width - 80.0) <= 1e-6


def test_hand_box_degenerate_alpha():
    body = pr.BBox(0.0, 0.0, 50.0, 80.0)
    box = pr.hand_box((25.0, 40.0), body, alpha=50.0)
    assert abs(box.width - 1.0) <= 1e-6
    assert abs(box.height - 1.0) <= 1e-6


def test_hand_box_translation_equivariance():
    rng = np.random.default_rng(0)
    for _ in range(100):
        x0, y0 = rng.uniform(0, 50, 2)
        w, h = rng.uniform(40, 300, 2)
        body = pr.BBox(x0, y0, x0 + w, y0 + h)
        wrist = (x0 + rng.uniform(0, w), y0 + rng.uniform(0, h))
        dx, dy = rng.uniform(-30, 30, 2)
        shifted = pr.BBox(x0 + dx, y0 + dy, x0 + w + dx, y0 + h + dy)
        a = pr.hand_box(wrist, body, alpha=3.0)
        b = pr.hand_box((wrist[0] + dx, wrist[1] + dy), shifted, alpha=3.0)
        assert abs(b.x_min - a.x_min - dx) <= 1e-6
        assert abs(b.y_min - a.y_min - dy) <= 1e-6
        assert abs(b.x_max - a.x_max - dx) <= 1e-6
        assert abs(b.y_max - a.y_max - dy) <= 1e-6


# ---------------------------------------------------------------------------
# crop_grid


def test_crop_grid_identity_gather():
    rng = np.random.default_rng(1)
    img = rng.random((16, 16, 3)).astype(np.float32)
    grid = pr.crop_grid(pr.BBox(0.0, 0.0, 15.0, 15.0), 16)
    out = nk.bilinear_sample(img, grid)
    assert np.array_equal(out, img)


def test_crop_grid_unit_box_corners():
    grid = pr.crop_grid(pr.BBox(3.0, 5.0, 4.0, 6.0), 2)
    assert np.allclose(grid[0, 0], [3.0, 5.0])
    assert np.allclose(grid[0, 1], [4.0, 5.0])
    assert np.allclose(grid[1, 0], [3.0, 6.0])
    assert np.allclose(grid[1, 1], [4.0, 6.0])


def test_crop_grid_constant_image():
    img = np.full((20, 30, 3), 0.37, dtype=np.float32)
    grid = pr.crop_grid(pr.BBox(2.5, 3.25, 17.75, 11.5), 8)
    out = nk.bilinear_sample(img, grid)
    assert np.max(np.abs(out - 0.37)) <= 1e-6


def test_crop_grid_errors():
    with pytest.raises(nk.UsageError):
        pr.crop_grid(pr.BBox(0.0, 0.0, 10.0, 10.0), 1)
    box = pr.BBox(0.0, 0.0, 10.0, 10.0)
    box.x_max = -5.0  # mutate to dodge the constructor check
    with pytest.raises(nk.UsageError):
        pr.crop_grid(box, 4)


def test_crop_grid_uniform_spacing():
    grid = pr.crop_grid(pr.BBox(10.0, 20.0, 40.0, 50.0), 7)
    dx = np.diff(grid[0, :, 0])
    dy = np.diff(grid[:, 0, 1])
    assert np.max(np.abs(dx - dx[0])) <= 1e-4
    assert np.max(np.abs(dy - dy[0])) <= 1e-4
    assert grid.shape == (7, 7, 2)


# ---------------------------------------------------------------------------
# scenes


def test_scene_json_round_trip(toy_pair, tmp_path):
    mhr, _, _ = toy_pair
    scene = _default_scene(mhr)
    path = tmp_path / "scene.json"
    pr.save_scene(scene, path)
    loaded = pr.load_scene(path, mhr)
    assert np.array_equal(loaded.pose, scene.pose)
    assert np.array_equal(loaded.translation, scene.translation)
    assert loaded.image_size == scene.image_size
    assert loaded.camera == scene.camera
    assert np.array_equal(loaded.keypoints2d, scene.keypoints2d)


def test_scene_keypoints_consistent(toy_pair):
    mhr, _, _ = toy_pair
    scene = _default_scene(mhr)
    fk = bm.forward_kinematics(mhr, bm.PoseState.from_vector(scene.pose))
    pts = fk.joints + scene.translation
    kp = bm.project(pts, scene.camera)
    assert np.array_equal(kp, scene.keypoints2d)


def test_random_scene_keypoints_in_frame(toy_pair):
    mhr, _, _ = toy_pair
    rng = np.random.default_rng(7)
    for _ in range(30):
        scene = pr.random_scene(rng, mhr, image_size=(256, 256))
        kp = scene.keypoints2d
        assert np.all(kp[:, 0] >= 8.0) and np.all(kp[:, 0] <= 247.0)
        assert np.all(kp[:, 1] >= 8.0) and np.all(kp[:, 1] <= 247.0)


def test_render_deterministic_and_bounded(toy_pair):
    mhr, _, _ = toy_pair
    scene = _default_scene(mhr)
    img_a = pr.render_scene(scene, mhr)
    img_b = pr.render_scene(scene, mhr)
    assert np.array_equal(img_a, img_b)
    assert img_a.shape == (256, 256, 3)
    assert img_a.dtype == np.float32
    assert np.all(np.isfinite(img_a))
    assert img_a.min() >= 0.0 and img_a.max() <= 1.0


def test_render_blobs_brighter_than_background(toy_pair):
    mhr, _, _ = toy_pair
    scene = _default_scene(mhr)
    img = pr.render_scene(scene, mhr)
    lum = img.mean(axis=2)
    kp = scene.keypoints2d
    at_joints = []
    for j in range(kp.shape[0]):
        x = int(round(float(kp[j, 0])))
        y = int(round(float(kp[j, 1])))
        at_joints.append(lum[y, x])
    # darkest joint still brighter than the background median
    assert min(at_joints) > np.median(lum)


# ---------------------------------------------------------------------------
# dense detector (the heavyweight baseline stage)


def test_detect_dense_deterministic(toy_pair):
    mhr, _, _ = toy_pair
    scene = _default_scene(mhr)
    img = pr.render_scene(scene, mhr)
    box_a, kp_a = pr.detect_dense(img)
    box_b, kp_b = pr.detect_dense(img)
    assert (box_a.x_min, box_a.y_min, box_a.x_max, box_a.y_max) == \
        (box_b.x_min, box_b.y_min, box_b.x_max, box_b.y_max)
    assert np.array_equal(kp_a.xy, kp_b.xy)


def test_detect_dense_covers_person(toy_pair):
    mhr, _, _ = toy_pair
    rng = np.random.default_rng(21)
    for _ in range(5):
        scene = pr.random_scene(rng, mhr, image_size=(256, 256))
        img = pr.render_scene(scene, mhr)
        box, _ = pr.detect_dense(img)
        kp = scene.keypoints2d
        inside = (
            (kp[:, 0] >= box.x_min) & (kp[:, 0] <= box.x_max)
            & (kp[:, 1] >= box.y_min) & (kp[:, 1] <= box.y_max)
        )
        assert inside.mean() >= 0.85
        assert 0.0 <= box.x_min < box.x_max <= 255.0
        assert 0.0 <= box.y_min < box.y_max <= 255.0
