"""The two end-to-end execution pathways and their instrumentation.

The serial baseline runs detector -> body crop -> encode -> body decode
(with its keypoint-prompted second pass) -> wrist-projected hand boxes ->
two more encoder passes -> sequential hand decodes -> merge.  The fast
variant derives every bounding region from cheap keypoint priors before any
encoding happens, so the three crops ride through one batched encoder call,
the body decoder runs gated with no refinement pass, and the whole frame
executes under a shape-frozen static plan with preallocated workspace.

Restructuring toggles (prior boxes, batching, static plans, operator
consolidation) must not change a single output bit; pruning toggles (layer
gating, dropping refinement) may, and check_equivalence reports their drift
against configured tolerance tiers.
"""

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from . import bodymodel as bm
from . import decoder as dc
from . import numkit as nk
from . import priors as pr
from .numkit import DTYPE, UsageError

SERIAL_DYNAMIC = "serial_dynamic"
FAST_STATIC = "fast_static"

# wrist slot of the (22, 2) projected-keypoint block, reused for both the
# detector stub's keypoints and the body decoder's own projections
_WRISTS = (bm.LEFT_WRIST, bm.RIGHT_WRIST)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class PipeConfig:
    """One point in the restructuring space.

    detector:    "dense" sliding-window scoring | "stub" keypoint prior
    crop_prep:   "decoded" hand boxes from the decoded body's wrists |
                 "priors" analytic boxes from detector keypoints
    batch_encode: fold all available crops into one encoder call
    selection / hand_selection: intermediate-prediction layer sets
    refine:      run the keypoint-prompted second body pass
    plan_mode:   serial_dynamic | fast_static
    consolidate: specialized kernels for the FK hot loop
    """

    detector: str = "stub"
    crop_prep: str = "priors"
    batch_encode: bool = True
    selection: tuple = (0, 1, 2)
    hand_selection: tuple = ()
    refine: bool = False
    plan_mode: str = FAST_STATIC
    consolidate: bool = True
    hands: bool = True
    alpha: float = 3.0
    noise_sigma: float = 0.0
    seed: int = 0


def serial_config():
    """The serial baseline: everything dynamic, nothing pruned."""
    return PipeConfig(
        detector="dense", crop_prep="decoded", batch_encode=False,
        selection=(0, 1, 2, 3, 4), hand_selection=(0, 1, 2, 3, 4),
        refine=True, plan_mode=SERIAL_DYNAMIC, consolidate=False,
    )


def fast_config():
    """The restructured pathway with the default pruning choices."""
    return PipeConfig()


def limit_config():
    """Fast-pathway plumbing with every pruning toggle disabled; output must
    be bit-identical to the serial baseline."""
    return PipeConfig(
        detector="dense", crop_prep="decoded", batch_encode=True,
        selection=(0, 1, 2, 3, 4), hand_selection=(0, 1, 2, 3, 4),
        refine=True, plan_mode=FAST_STATIC, consolidate=True,
    )


# ---------------------------------------------------------------------------
# static plans


@dataclass(frozen=True)
class Stage:
    name: str
    inputs: tuple
    outputs: tuple


_EXTERNAL = ("image", "scene")


def _stage_graph(cfg):
    """Declared dataflow for one configuration; the plan validates that the
    listed order is a topological order of these dependencies."""
    stages = [Stage("detect", ("image", "scene"), ("body_box", "keypoints"))]
    if cfg.crop_prep == "priors":
        if cfg.hands:
            stages.append(Stage("hand_boxes", ("keypoints", "body_box"),
                                ("hand_boxes",)))
        stages.append(Stage("crop_body", ("image", "body_box"), ("body_crop",)))
        if cfg.hands:
            stages.append(Stage("crop_hands", ("image", "hand_boxes"),
                                ("hand_crops",)))
        if cfg.batch_encode and cfg.hands:
            stages.append(Stage("encode_batch", ("body_crop", "hand_crops"),
                                ("body_feat", "hand_feats")))
        else:
            stages.append(Stage("encode_body", ("body_crop",), ("body_feat",)))
            if cfg.hands:
                stages.append(Stage("encode_hands", ("hand_crops",),
                                    ("hand_feats",)))
        stages.append(Stage("decode_body", ("body_feat", "body_box"),
                            ("body_params", "body_camera")))
    else:
        stages.append(Stage("crop_body", ("image", "body_box"), ("body_crop",)))
        stages.append(Stage("encode_body", ("body_crop",), ("body_feat",)))
        stages.append(Stage("decode_body", ("body_feat", "body_box"),
                            ("body_params", "body_camera")))
        if cfg.hands:
            stages.append(Stage("hand_boxes",
                                ("body_params", "body_camera", "body_box"),
                                ("hand_boxes",)))
            stages.append(Stage("crop_hands", ("image", "hand_boxes"),
                                ("hand_crops",)))
            stages.append(Stage("encode_hands", ("hand_crops",),
                                ("hand_feats",)))
    if cfg.hands:
        stages.append(Stage("decode_hands", ("hand_feats",), ("hand_rots",)))
        stages.append(Stage("merge", ("body_params", "hand_rots"), ("merged",)))
    else:
        stages.append(Stage("merge", ("body_params",), ("merged",)))
    return tuple(stages)


class PipelinePlan:
    """Ordered stage list, workspace buffer table, and per-stage timers.

    In fast_static mode the buffer table is the only place the engine level
    acquires array storage; after the warmup frame every request must hit an
    existing shape-frozen entry, and the allocation counter proves it.  (Ops
    inside numpy/numba still manage their own scratch; the counter's scope is
    the plan workspace, which is where shape dynamism would show up.)
    serial_dynamic mode allocates fresh storage on every request, which is
    what makes the counter contrast meaningful.
    """

    def __init__(self, stages, mode):
        if mode not in (SERIAL_DYNAMIC, FAST_STATIC):
            raise UsageError("unknown plan mode: %r" % (mode,))
        names = [s.name for s in stages]
        if len(set(names)) != len(names):
            raise UsageError("duplicate stage names: %r" % (names,))
        known = set(_EXTERNAL)
        for s in stages:
            missing = [i for i in s.inputs if i not in known]
            if missing:
                raise UsageError(
                    "stage %r consumes %r before any stage produces it"
                    % (s.name, missing))
            known.update(s.outputs)
        self.stages = tuple(stages)
        self.mode = mode
        self.allocations = 0
        self.warm = False
        self._buffers = {}
        self._names = frozenset(names)
        self._timers = {n: {"calls": 0, "ms": []} for n in names}
        self._frame_ms = []

    # workspace ------------------------------------------------------------

    def buffer(self, name, shape, dtype=DTYPE):
        key = (name, tuple(int(v) for v in shape), np.dtype(dtype))
        if self.mode == SERIAL_DYNAMIC:
            self.allocations += 1
            return np.empty(key[1], dtype=key[2])
        buf = self._buffers.get(key)
        if buf is None:
            buf = np.empty(key[1], dtype=key[2])
            self._buffers[key] = buf
            self.allocations += 1
        return buf

    # timing ---------------------------------------------------------------

    @contextmanager
    def stage(self, name):
        if name not in self._names:
            raise UsageError("stage %r is not part of this plan" % (name,))
        t0 = time.perf_counter_ns()
        yield
        t1 = time.perf_counter_ns()
        rec = self._timers[name]
        rec["calls"] += 1
        rec["ms"].append((t1 - t0) / 1e6)

    def frame_done(self, ms):
        self._frame_ms.append(float(ms))
        self.warm = True

    def reset_timers(self):
        for rec in self._timers.values():
            rec["calls"] = 0
            rec["ms"] = []
        self._frame_ms = []

    def latency_report(self):
        stats = []
        for s in self.stages:
            rec = self._timers[s.name]
            if not rec["ms"]:
                continue
            samples = np.asarray(rec["ms"], dtype=np.float64)
            stats.append(StageStat(
                name=s.name,
                mean_ms=float(samples.mean()),
                p50_ms=float(np.percentile(samples, 50)),
                p95_ms=float(np.percentile(samples, 95)),
                calls=rec["calls"],
            ))
        frames = np.asarray(self._frame_ms, dtype=np.float64)
        total = float(frames.mean()) if frames.size else 0.0
        return LatencyReport(stages=stats, total_ms=total, mode=self.mode,
                             frames=frames.size)


def build_plan(config):
    return PipelinePlan(_stage_graph(config), config.plan_mode)


# ---------------------------------------------------------------------------
# latency reports


@dataclass
class StageStat:
    name: str
    mean_ms: float
    p50_ms: float
    p95_ms: float
    calls: int


@dataclass
class LatencyReport:
    stages: list
    total_ms: float
    mode: str
    frames: int = 0

    def stage_sum_ms(self):
        """Sum of per-frame stage means; glue code keeps this <= total_ms."""
        per_frame = 0.0
        for s in self.stages:
            n = max(self.frames, 1)
            per_frame += s.mean_ms * (s.calls / n)
        return per_frame

    def speedup_vs(self, other):
        if self.total_ms <= 0.0:
            raise UsageError("report has no timed frames")
        return other.total_ms / self.total_ms

    def as_dict(self):
        return {
            "stages": [{"name": s.name, "mean_ms": s.mean_ms,
                        "p50_ms": s.p50_ms, "p95_ms": s.p95_ms,
                        "calls": s.calls} for s in self.stages],
            "total_ms": self.total_ms,
            "mode": self.mode,
        }


# ---------------------------------------------------------------------------
# crop preparation


def prepare_crops(image, boxes, out_size, parallel=False, out=None):
    """Sample one crop per box into (len(boxes), S, S, 3).

    Preparation is pure per box, so the parallel path must produce a batch
    bit-identical to the sequential one.
    """
    n = len(boxes)
    if out is None:
        out = np.empty((n, out_size, out_size, 3), dtype=DTYPE)

    def one(i):
        grid = pr.crop_grid(boxes[i], out_size)
        out[i] = nk.bilinear_sample(image, grid)

    if parallel and n > 1:
        with ThreadPoolExecutor(max_workers=n) as ex:
            list(ex.map(one, range(n)))
    else:
        for i in range(n):
            one(i)
    return out


def _box_prompt(box, image_size, out):
    """Normalized box geometry as the decoder's 8-slot prompt vector."""
    w, h = image_size
    out[0] = box.x_min / w
    out[1] = box.y_min / h
    out[2] = box.x_max / w
    out[3] = box.y_max / h
    out[4] = box.width / w
    out[5] = box.height / h
    out[6] = (box.x_min + box.x_max) / (2.0 * w)
    out[7] = (box.y_min + box.y_max) / (2.0 * h)
    return out


# ---------------------------------------------------------------------------
# engine


def _expected_encodes(cfg):
    if not cfg.hands:
        return 1
    if cfg.batch_encode:
        return 1 if cfg.crop_prep == "priors" else 2
    return 3


class Pipeline:
    """Runs one decoder over synthetic scenes under any PipeConfig."""

    def __init__(self, decoder):
        self.decoder = decoder
        self.template = decoder.template
        self.crop_size = decoder.config.crop_size
        self.last_counters = {}

    # -- shared stage bodies -------------------------------------------------

    def _wrist_image_points(self, params, camera, box, counters, fk_kernel):
        """Project the decoded skeleton's wrists back into source-image
        pixels through the crop's affine frame (the serial baseline's
        post-body hand localization)."""
        kp2d, _ = self.decoder.predict_kp2d(params, camera, counters,
                                            fk_kernel=fk_kernel)
        # decoded keypoints live in a normalized crop frame; 0 maps to the
        # crop center and the affine below lands them in image pixels
        u = kp2d * np.float32(0.25) + np.float32(0.5)  # (22, 2)
        xs = box.x_min + u[:, 0] * box.width
        ys = box.y_min + u[:, 1] * box.height
        return np.stack([xs, ys], axis=1)

    def _hand_boxes_from_points(self, pts, body_box, cfg, image_size):
        return tuple(
            pr.hand_box(pts[j], body_box, alpha=cfg.alpha,
                        image_size=image_size)
            for j in _WRISTS
        )

    # -- one frame ------------------------------------------------------------

    def run(self, image, scene, config, plan=None):
        """Execute one frame; returns (merged params (76,), LatencyReport).

        Passing a plan reuses its workspace and accumulates its timers; in
        fast_static mode a warm plan must run allocation-free.
        """
        cfg = config
        if plan is None:
            plan = build_plan(cfg)
        dec = self.decoder
        s = self.crop_size
        counters = {}
        allocs_before = plan.allocations
        t_frame = time.perf_counter_ns()

        with plan.stage("detect"):
            if cfg.detector == "dense":
                body_box, kp = pr.detect_dense(image)
            elif cfg.detector == "stub":
                body_box, kp = pr.detect_stub(scene, cfg.noise_sigma, cfg.seed)
            else:
                raise UsageError("unknown detector: %r" % (cfg.detector,))

        prompt = _box_prompt(body_box, scene.image_size,
                             plan.buffer("prompt", (dc.PROMPT_DIM,)))

        if cfg.crop_prep == "priors":
            hand_boxes = None
            if cfg.hands:
                with plan.stage("hand_boxes"):
                    hand_boxes = self._hand_boxes_from_points(
                        kp.xy, body_box, cfg, scene.image_size)
            with plan.stage("crop_body"):
                body_crop = prepare_crops(
                    image, [body_box], s,
                    out=plan.buffer("body_crop", (1, s, s, 3)))
            hand_crops = None
            if cfg.hands:
                with plan.stage("crop_hands"):
                    hand_crops = prepare_crops(
                        image, hand_boxes, s,
                        out=plan.buffer("hand_crops", (2, s, s, 3)))
            if cfg.batch_encode and cfg.hands:
                with plan.stage("encode_batch"):
                    batch = plan.buffer("crop_batch", (3, s, s, 3))
                    batch[0] = body_crop[0]
                    batch[1:] = hand_crops
                    feats = dec.encode(batch, counters)
                body_feat, hand_feats = feats[0], feats[1:]
            else:
                with plan.stage("encode_body"):
                    body_feat = dec.encode(body_crop, counters)[0]
                hand_feats = None
                if cfg.hands:
                    with plan.stage("encode_hands"):
                        hand_feats = np.concatenate([
                            dec.encode(hand_crops[0:1], counters),
                            dec.encode(hand_crops[1:2], counters),
                        ], axis=0)
            with plan.stage("decode_body"):
                body_out = dec.decode_body(
                    body_feat, prompt, selection=cfg.selection,
                    refine=cfg.refine, counters=counters,
                    fk_kernel=cfg.consolidate)
        elif cfg.crop_prep == "decoded":
            with plan.stage("crop_body"):
                body_crop = prepare_crops(
                    image, [body_box], s,
                    out=plan.buffer("body_crop", (1, s, s, 3)))
            with plan.stage("encode_body"):
                body_feat = dec.encode(body_crop, counters)[0]
            with plan.stage("decode_body"):
                body_out = dec.decode_body(
                    body_feat, prompt, selection=cfg.selection,
                    refine=cfg.refine, counters=counters,
                    fk_kernel=cfg.consolidate)
            hand_feats = None
            if cfg.hands:
                with plan.stage("hand_boxes"):
                    pts = self._wrist_image_points(
                        body_out.params, body_out.camera, body_box,
                        counters, cfg.consolidate)
                    hand_boxes = self._hand_boxes_from_points(
                        pts, body_box, cfg, scene.image_size)
                with plan.stage("crop_hands"):
                    hand_crops = prepare_crops(
                        image, hand_boxes, s,
                        out=plan.buffer("hand_crops", (2, s, s, 3)))
                with plan.stage("encode_hands"):
                    if cfg.batch_encode:
                        hand_feats = dec.encode(hand_crops, counters)
                    else:
                        hand_feats = np.concatenate([
                            dec.encode(hand_crops[0:1], counters),
                            dec.encode(hand_crops[1:2], counters),
                        ], axis=0)
        else:
            raise UsageError("unknown crop_prep: %r" % (cfg.crop_prep,))

        left = right = None
        if cfg.hands:
            with plan.stage("decode_hands"):
                if cfg.batch_encode:
                    rots = dec.decode_hand(hand_feats, cfg.hand_selection,
                                           counters)
                else:
                    rots = np.concatenate([
                        dec.decode_hand(hand_feats[0:1], cfg.hand_selection,
                                        counters),
                        dec.decode_hand(hand_feats[1:2], cfg.hand_selection,
                                        counters),
                    ], axis=0)
            left, right = rots[0], rots[1]
        with plan.stage("merge"):
            merged = plan.buffer("merged", (bm.PARAM_DIM,))
            merged[:] = dec.merge(body_out.params, left, right)

        got = counters.get("encode", 0)
        want = _expected_encodes(cfg)
        if got != want:
            raise UsageError("encoder invocation count %d, plan requires %d"
                             % (got, want))
        if plan.mode == FAST_STATIC and plan.warm \
                and plan.allocations != allocs_before:
            raise UsageError(
                "static plan allocated %d buffers in steady state"
                % (plan.allocations - allocs_before))
        plan.frame_done((time.perf_counter_ns() - t_frame) / 1e6)
        self.last_counters = counters
        return merged, plan.latency_report()

    # -- the two named pathways ------------------------------------------------

    def run_serial(self, image, scene):
        return self.run(image, scene, serial_config())

    def run_fast(self, image, scene, config=None):
        cfg = config if config is not None else fast_config()
        return self.run(image, scene, cfg)


# ---------------------------------------------------------------------------
# equivalence checking

_PARAM_FIELDS = (
    ("orient", slice(0, 3)),
    ("body_pose", slice(3, 66)),
    ("left_hand", dc.LEFT_HAND_VEC),
    ("right_hand", dc.RIGHT_HAND_VEC),
    ("shape", slice(66, 76)),
)


@dataclass
class EquivalenceReport:
    tier: str
    passed: bool
    max_abs: float
    deltas: dict
    bound: float

    def as_dict(self):
        return {"tier": self.tier, "passed": self.passed,
                "max_abs": self.max_abs, "bound": self.bound,
                "deltas": dict(self.deltas)}


def check_equivalence(serial_params, fast_params, tolerances=None):
    """Per-field max |delta| between two merged parameter vectors.

    tolerances: {"tier": "bit_exact"} (restructuring toggles) or
    {"tier": "bounded", "max_abs": x} (pruning toggles, drift reported and
    judged against the bound).
    """
    tol = dict(tolerances) if tolerances else {"tier": "bit_exact"}
    tier = tol.get("tier", "bit_exact")
    if tier not in ("bit_exact", "bounded"):
        raise UsageError("unknown tolerance tier: %r" % (tier,))
    a = np.asarray(serial_params, dtype=DTYPE).reshape(bm.PARAM_DIM)
    b = np.asarray(fast_params, dtype=DTYPE).reshape(bm.PARAM_DIM)
    diff = np.abs(a.astype(np.float64) - b.astype(np.float64))
    deltas = {name: float(diff[sl].max()) for name, sl in _PARAM_FIELDS}
    max_abs = float(diff.max())
    if tier == "bit_exact":
        bound = 0.0
        passed = bool(np.array_equal(a, b))
    else:
        bound = float(tol.get("max_abs", 0.0))
        passed = max_abs <= bound
    return EquivalenceReport(tier=tier, passed=passed, max_abs=max_abs,
                             deltas=deltas, bound=bound)


# ---------------------------------------------------------------------------
# benchmarking


def toggle_matrix():
    """Cumulative restructuring sequence, serial baseline first, full fast
    configuration last."""
    rows = [("serial_baseline", serial_config())]
    cfg = replace(rows[0][1], detector="stub", crop_prep="priors")
    rows.append(("prior_boxes", cfg))
    cfg = replace(cfg, batch_encode=True)
    rows.append(("batched_encode", cfg))
    cfg = replace(cfg, selection=(0, 1, 2), hand_selection=())
    rows.append(("gated_selection", cfg))
    cfg = replace(cfg, refine=False)
    rows.append(("no_refinement", cfg))
    cfg = replace(cfg, plan_mode=FAST_STATIC)
    rows.append(("static_plan", cfg))
    cfg = replace(cfg, consolidate=True)
    rows.append(("operator_consolidation", cfg))
    return rows


@dataclass
class BenchResult:
    rows: list            # (toggle, cum_ms, delta_ms)
    reports: dict         # toggle -> LatencyReport

    def waterfall(self):
        return list(self.rows)


def bench(pipe, image, scene, frames=100, warmup=10, matrix=None):
    """Cumulative latency after each restructuring toggle.

    Per row: run `warmup` frames, drop their timings, then average `frames`
    timed frames.  delta_ms is the per-frame saving relative to the previous
    row.
    """
    if frames <= warmup:
        raise UsageError("frames must exceed warmup (%d <= %d)"
                         % (frames, warmup))
    if matrix is None:
        matrix = toggle_matrix()
    rows = []
    reports = {}
    prev = None
    for name, cfg in matrix:
        plan = build_plan(cfg)
        for _ in range(warmup):
            pipe.run(image, scene, cfg, plan=plan)
        plan.reset_timers()
        for _ in range(frames):
            _, report = pipe.run(image, scene, cfg, plan=plan)
        reports[name] = report
        cum = report.total_ms
        delta = 0.0 if prev is None else prev - cum
        rows.append((name, cum, delta))
        prev = cum
    return BenchResult(rows=rows, reports=reports)


def save_waterfall_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["toggle", "cum_ms", "delta_ms"])
        for name, cum, delta in rows:
            writer.writerow([name, "%.4f" % cum, "%.4f" % delta])


def load_waterfall_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["toggle", "cum_ms", "delta_ms"]:
            raise UsageError("unexpected waterfall header: %r" % (header,))
        return [(name, float(cum), float(delta))
                for name, cum, delta in reader]
