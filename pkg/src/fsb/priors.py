"""Decoupled spatial priors.

The fast pathway never runs a detector network: person and hand bounding
regions come from cheap providers (a synthetic keypoint stub here), and
crops are expressed as sampling grids consumed by numkit.bilinear_sample.
The heavyweight sliding-window detector used by the serial baseline lives
here too, so both pathways draw their priors from one place.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import bodymodel as bm
from . import numkit as nk
from .numkit import DTYPE, UsageError

# body-box estimation: robust spread around the keypoint centroid
_SPREAD_K = 2.6
_PAD_PX = 8.0

# dense detector geometry
_DET_WINDOW = 8
_DET_STRIDE = 4
_DET_HIDDEN = 48


@dataclass
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise UsageError("inverted box: %r" % (self,))

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    def as_array(self):
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max],
                        dtype=DTYPE)


@dataclass
class Keypoints2D:
    xy: np.ndarray          # (J, 2) source-image pixels
    confidence: np.ndarray  # (J,) in [0, 1]

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=DTYPE)
        self.confidence = np.asarray(self.confidence, dtype=DTYPE)
        if self.xy.ndim != 2 or self.xy.shape[1] != 2 \
                or self.confidence.shape != (self.xy.shape[0],):
            raise UsageError("keypoints must be (J, 2) with (J,) confidences")
        if np.any(self.confidence < 0.0) or np.any(self.confidence > 1.0):
            raise UsageError("confidences must lie in [0, 1]")


@dataclass
class Scene:
    """Synthetic single-person scene: everything needed to render an image
    and to know the ground truth behind it."""

    image_size: tuple            # (W, H)
    camera: bm.CameraIntrinsics
    pose: np.ndarray             # (76,) ground-truth parameter vector
    translation: np.ndarray      # (3,) camera-space body offset
    seed: int
    keypoints2d: np.ndarray      # (22, 2) projected ground-truth joints


def make_scene(template, pose, translation, camera, image_size, seed=0):
    pose = np.asarray(pose, dtype=DTYPE).reshape(bm.PARAM_DIM)
    translation = np.asarray(translation, dtype=DTYPE).reshape(3)
    fk = bm.forward_kinematics(template, bm.PoseState.from_vector(pose))
    kp = bm.project(fk.joints + translation, camera)
    return Scene(
        image_size=(int(image_size[0]), int(image_size[1])),
        camera=camera,
        pose=pose,
        translation=translation,
        seed=int(seed),
        keypoints2d=kp,
    )


def default_camera(image_size):
    w, h = image_size
    f = 1.17 * min(w, h)
    return bm.CameraIntrinsics(fx=f, fy=f, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0)


def random_scene(rng, template, image_size=(256, 256), pose_sigma=0.2,
                 shape_sigma=0.45, margin=10.0):
    """Draw a posed scene whose keypoints all project inside the frame."""
    w, h = image_size
    cam = default_camera(image_size)
    for attempt in range(200):
        vec = np.zeros(bm.PARAM_DIM, dtype=DTYPE)
        vec[:66] = rng.normal(0.0, pose_sigma, size=66)
        vec[66:] = rng.normal(0.0, shape_sigma, size=bm.SHAPE_DIM)
        fk = bm.forward_kinematics(template, bm.PoseState.from_vector(vec))
        centroid = fk.joints.mean(axis=0)
        depth = rng.uniform(2.4, 3.2) + 0.2 * attempt
        translation = np.array([
            -centroid[0] + rng.uniform(-0.08, 0.08),
            -centroid[1] + rng.uniform(-0.08, 0.08),
            -centroid[2] + depth,
        ], dtype=DTYPE)
        pts = fk.joints + translation
        if np.any(pts[:, 2] <= 0.1):
            continue
        kp = bm.project(pts, cam)
        if kp[:, 0].min() >= margin and kp[:, 0].max() <= w - 1 - margin \
                and kp[:, 1].min() >= margin and kp[:, 1].max() <= h - 1 - margin:
            seed = int(rng.integers(0, 2 ** 31 - 1))
            return make_scene(template, vec, translation, cam, image_size, seed)
    raise UsageError("could not place a scene inside the frame")


def save_scene(scene, path):
    payload = {
        "image_size": [int(scene.image_size[0]), int(scene.image_size[1])],
        "camera": {"fx": scene.camera.fx, "fy": scene.camera.fy,
                   "cx": scene.camera.cx, "cy": scene.camera.cy},
        "pose": [float(v) for v in scene.pose],
        "translation": [float(v) for v in scene.translation],
        "seed": int(scene.seed),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def scene_from_dict(payload, template):
    """Rebuild one scene from a save_scene payload (a plain JSON object)."""
    try:
        cam = bm.CameraIntrinsics(**payload["camera"])
        pose = np.asarray(payload["pose"], dtype=DTYPE)
        translation = np.asarray(payload["translation"], dtype=DTYPE)
        image_size = tuple(payload["image_size"])
        seed = payload["seed"]
    except (TypeError, KeyError) as exc:
        raise UsageError("malformed scene payload: %s" % (exc,))
    return make_scene(template, pose, translation, cam, image_size, seed)


def load_scene(path, template):
    with open(path) as fh:
        payload = json.load(fh)
    return scene_from_dict(payload, template)


# ---------------------------------------------------------------------------
# keypoint stub and box providers


def _body_box_from_keypoints(kp_xy, image_size):
    w, h = image_size
    center = kp_xy.mean(axis=0)
    spread = kp_xy.std(axis=0)
    half_w = _SPREAD_K * float(spread[0]) + _PAD_PX
    half_h = _SPREAD_K * float(spread[1]) + _PAD_PX
    x0 = float(np.clip(center[0] - half_w, 0.0, w - 2.0))
    y0 = float(np.clip(center[1] - half_h, 0.0, h - 2.0))
    x1 = float(np.clip(center[0] + half_w, x0 + 1.0, w - 1.0))
    y1 = float(np.clip(center[1] + half_h, y0 + 1.0, h - 1.0))
    return BBox(x0, y0, x1, y1)


def detect_stub(scene, noise_sigma=0.0, seed=0):
    """Ground-truth keypoints plus isotropic Gaussian noise; the person box
    is derived from the (noisy) keypoint cloud.

    The box uses centroid +/- k*std rather than raw extents, so its geometry
    responds only weakly to per-keypoint noise; that is what lets the decoder
    treat the prior as "a reliable bounding region" rather than a precise
    localization.
    """
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, noise_sigma, size=scene.keypoints2d.shape)
    w, h = scene.image_size
    kp = np.clip(scene.keypoints2d + noise.astype(DTYPE),
                 0.0, [w - 1.0, h - 1.0]).astype(DTYPE)
    box = _body_box_from_keypoints(kp, scene.image_size)
    conf = np.ones(kp.shape[0], dtype=DTYPE)
    return box, Keypoints2D(kp, conf)


def hand_box(wrist, body_box, alpha=3.0, image_size=None):
    """Square side-s box centered on the wrist, s = min(w_body, h_body) / alpha.

    With image_size given, the wrist is first clamped into the frame and the
    box is then shifted inside, preserving positive area.
    """
    if alpha <= 0:
        raise UsageError("alpha must be positive")
    s = min(body_box.width, body_box.height) / alpha
    wx, wy = float(wrist[0]), float(wrist[1])
    if image_size is None:
        return BBox(wx - s / 2.0, wy - s / 2.0, wx + s / 2.0, wy + s / 2.0)
    w, h = image_size
    wx = float(np.clip(wx, 0.0, w - 1.0))
    wy = float(np.clip(wy, 0.0, h - 1.0))
    side_x = min(s, w - 1.0)
    side_y = min(s, h - 1.0)
    x0 = float(np.clip(wx - s / 2.0, 0.0, (w - 1.0) - side_x))
    y0 = float(np.clip(wy - s / 2.0, 0.0, (h - 1.0) - side_y))
    return BBox(x0, y0, x0 + side_x, y0 + side_y)


def crop_grid(box, out_size):
    """(out_size, out_size, 2) grid of (x, y) samples spanning the box
    inclusively with uniform spacing."""
    if out_size < 2:
        raise UsageError("out_size must be >= 2")
    if not (box.x_min < box.x_max and box.y_min < box.y_max):
        raise UsageError("inverted box: %r" % (box,))
    xs = np.linspace(box.x_min, box.x_max, out_size, dtype=DTYPE)
    ys = np.linspace(box.y_min, box.y_max, out_size, dtype=DTYPE)
    gx, gy = np.meshgrid(xs, ys)
    return np.ascontiguousarray(np.stack([gx, gy], axis=-1), dtype=DTYPE)


# ---------------------------------------------------------------------------
# scene rendering: one soft Gaussian blob per joint on a gradient background


def render_scene(scene, template):
    w, h = scene.image_size
    kp = scene.keypoints2d
    rng = np.random.default_rng(scene.seed)
    colors = rng.uniform(0.4, 1.0, size=(kp.shape[0], 3)).astype(DTYPE)
    gdir = rng.uniform(-1.0, 1.0, size=2)
    yy, xx = np.mgrid[0:h, 0:w].astype(DTYPE)
    ramp = (gdir[0] * xx / w + gdir[1] * yy / h).astype(DTYPE)
    img = (0.10 + 0.05 * ramp)[:, :, None] * np.ones(3, dtype=DTYPE)
    span = max(float(np.ptp(kp[:, 0])), float(np.ptp(kp[:, 1])))
    sigma = max(6.0, 0.085 * span)
    inv = np.float32(-0.5 / (sigma * sigma))
    for j in range(kp.shape[0]):
        d2 = (xx - kp[j, 0]) ** 2 + (yy - kp[j, 1]) ** 2
        img = img + np.exp(d2 * inv)[:, :, None] * (0.5 * colors[j])
    return np.clip(img, 0.0, 1.0).astype(DTYPE)


# ---------------------------------------------------------------------------
# heavyweight sliding-window detector (serial-baseline stage)

_DET_CACHE = {}


def _detector_weights():
    if "w1" not in _DET_CACHE:
        rng = np.random.default_rng(710)
        d_in = _DET_WINDOW * _DET_WINDOW * 3
        _DET_CACHE["w1"] = (rng.standard_normal((d_in, _DET_HIDDEN))
                            / np.sqrt(d_in)).astype(DTYPE)
        _DET_CACHE["w2"] = (rng.standard_normal((_DET_HIDDEN, 8))
                            / np.sqrt(_DET_HIDDEN)).astype(DTYPE)
    return _DET_CACHE["w1"], _DET_CACHE["w2"]


def detect_dense(image):
    """Sliding-window scoring over the full image; returns the thresholded
    high-response extent as the person box plus crude peak keypoints.

    This stands in for the baseline's detector stage: cost scales with image
    area, unlike the keypoint stub.
    """
    img = np.ascontiguousarray(image, dtype=DTYPE)
    h, w = img.shape[:2]
    win, stride = _DET_WINDOW, _DET_STRIDE
    view = np.lib.stride_tricks.sliding_window_view(img, (win, win, 3))
    view = view[::stride, ::stride, 0]
    gh, gw = view.shape[:2]
    cols = np.ascontiguousarray(view.reshape(gh * gw, win * win * 3))
    w1, w2 = _detector_weights()
    hidden = np.maximum(nk.matmul(cols, w1), 0.0)
    scores = nk.matmul(hidden, w2)
    smap = scores.mean(axis=1).reshape(gh, gw)
    lo, hi = float(smap.min()), float(smap.max())
    mask = smap >= lo + 0.35 * (hi - lo)
    rows = np.where(mask.any(axis=1))[0]
    cels = np.where(mask.any(axis=0))[0]
    pad = 6.0
    x0 = max(0.0, cels[0] * stride - pad)
    y0 = max(0.0, rows[0] * stride - pad)
    x1 = min(w - 1.0, cels[-1] * stride + win + pad)
    y1 = min(h - 1.0, rows[-1] * stride + win + pad)
    box = BBox(x0, y0, x1, y1)

    flat = smap.reshape(-1)
    top = np.argsort(flat)[::-1][:bm.NUM_JOINTS]
    kp = np.stack([
        (top % gw) * stride + win / 2.0,
        (top // gw) * stride + win / 2.0,
    ], axis=1).astype(DTYPE)
    conf = np.ones(bm.NUM_JOINTS, dtype=DTYPE)
    return box, Keypoints2D(kp, conf)
