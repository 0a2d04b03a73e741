"""End-to-end pathway tests: restructuring equivalence, instrumentation
accounting, static-plan allocation discipline, and the latency waterfall."""

import json
from dataclasses import replace

import numpy as np
import pytest

import fsb.bodymodel as bm
import fsb.decoder as dc
import fsb.pipeline as pl
import fsb.priors as pr
from fsb.numkit import UsageError

HAND_SLOTS = np.r_[51:54, 63:66]


@pytest.fixture(scope="module")
def stack():
    mhr, smpl, gt = bm.make_toy_models(seed=0)
    decoder = dc.Decoder(smpl)
    return smpl, pl.Pipeline(decoder)


@pytest.fixture(scope="module")
def frame(stack):
    smpl, pipe = stack
    rng = np.random.default_rng(60)
    scene = pr.random_scene(rng, smpl)
    image = pr.render_scene(scene, smpl)
    return image, scene


def _scenes(smpl, n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        scene = pr.random_scene(rng, smpl)
        out.append((pr.render_scene(scene, smpl), scene))
    return out


# ---------------------------------------------------------------------------
# plans


def test_plan_topology_accepts_declared_graphs():
    for cfg in (pl.serial_config(), pl.fast_config(), pl.limit_config(),
                replace(pl.fast_config(), hands=False),
                replace(pl.fast_config(), batch_encode=False)):
        plan = pl.build_plan(cfg)
        assert plan.mode == cfg.plan_mode
        assert plan.stages[0].name == "detect"
        assert plan.stages[-1].name == "merge"


def test_plan_topology_rejects_reordering():
    stages = pl._stage_graph(pl.fast_config())
    scrambled = (stages[-1],) + stages[1:-1] + (stages[0],)
    with pytest.raises(UsageError):
        pl.PipelinePlan(scrambled, pl.FAST_STATIC)


def test_plan_rejects_duplicates_and_bad_mode():
    stages = pl._stage_graph(pl.fast_config())
    with pytest.raises(UsageError):
        pl.PipelinePlan(stages + (stages[0],), pl.FAST_STATIC)
    with pytest.raises(UsageError):
        pl.PipelinePlan(stages, "jit_compiled")


def test_plan_stage_timer_rejects_unknown_stage():
    plan = pl.build_plan(pl.fast_config())
    with pytest.raises(UsageError):
        with plan.stage("refine_pass"):
            pass


def test_stage_graph_orders_hand_boxes_by_mode():
    names_fast = [s.name for s in pl._stage_graph(pl.fast_config())]
    names_serial = [s.name for s in pl._stage_graph(pl.serial_config())]
    assert names_fast.index("hand_boxes") < names_fast.index("crop_hands")
    assert names_fast.index("hand_boxes") < names_fast.index("encode_batch")
    assert "encode_batch" not in names_serial
    assert names_serial.index("decode_body") < names_serial.index("hand_boxes")


def test_plan_buffer_reuse_and_allocation_counter():
    plan = pl.build_plan(pl.fast_config())
    a = plan.buffer("scratch", (4, 4))
    b = plan.buffer("scratch", (4, 4))
    assert a is b
    assert plan.allocations == 1
    plan.buffer("scratch", (8, 4))
    assert plan.allocations == 2

    dyn = pl.build_plan(pl.serial_config())
    c = dyn.buffer("scratch", (4, 4))
    d = dyn.buffer("scratch", (4, 4))
    assert c is not d
    assert dyn.allocations == 2


# ---------------------------------------------------------------------------
# instrumentation accounting


def test_serial_runs_three_encoder_passes(stack, frame):
    _, pipe = stack
    image, scene = frame
    params, report = pipe.run_serial(image, scene)
    assert pipe.last_counters["encode"] == 3
    assert pipe.last_counters["encoded_crops"] == 3
    assert params.shape == (bm.PARAM_DIM,)
    assert report.mode == pl.SERIAL_DYNAMIC
    names = [s.name for s in report.stages]
    assert "encode_body" in names and "encode_hands" in names


def test_fast_runs_one_batched_encoder_pass(stack, frame):
    _, pipe = stack
    image, scene = frame
    params, report = pipe.run_fast(image, scene)
    assert pipe.last_counters["encode"] == 1
    assert pipe.last_counters["encoded_crops"] == 3
    assert pipe.last_counters["intermediate"] == len(pl.fast_config().selection)
    assert report.mode == pl.FAST_STATIC
    assert "encode_batch" in [s.name for s in report.stages]


def test_hands_disabled_single_encode(stack, frame):
    _, pipe = stack
    image, scene = frame
    off = replace(pl.serial_config(), hands=False)
    body_only, _ = pipe.run(image, scene, off)
    assert pipe.last_counters["encode"] == 1
    merged, _ = pipe.run_serial(image, scene)
    keep = np.setdiff1d(np.arange(bm.PARAM_DIM), HAND_SLOTS)
    assert np.array_equal(body_only[keep], merged[keep])
    assert not np.array_equal(body_only[HAND_SLOTS], merged[HAND_SLOTS])


def test_run_deterministic_given_seed(stack, frame):
    _, pipe = stack
    image, scene = frame
    cfg = replace(pl.fast_config(), noise_sigma=4.0, seed=9)
    a, _ = pipe.run(image, scene, cfg)
    a = a.copy()
    ca = dict(pipe.last_counters)
    b, _ = pipe.run(image, scene, cfg)
    assert np.array_equal(a, b)
    assert ca == pipe.last_counters


# ---------------------------------------------------------------------------
# restructuring equivalence


def test_limit_case_bit_identical_to_serial(stack):
    smpl, pipe = stack
    for image, scene in _scenes(smpl, 6, seed=61):
        serial, _ = pipe.run_serial(image, scene)
        serial = serial.copy()
        fast, _ = pipe.run_fast(image, scene, pl.limit_config())
        assert np.array_equal(serial, fast)
        rep = pl.check_equivalence(serial, fast)
        assert rep.tier == "bit_exact" and rep.passed
        assert rep.max_abs == 0.0


def test_selection_pruning_drift_reported_not_failed(stack, frame):
    _, pipe = stack
    image, scene = frame
    fast = pl.fast_config()
    gated, _ = pipe.run_fast(image, scene, fast)
    gated = gated.copy()
    full, _ = pipe.run_fast(
        image, scene,
        replace(fast, selection=(0, 1, 2, 3, 4), hand_selection=(0, 1, 2, 3, 4)))
    rep = pl.check_equivalence(full, gated,
                               {"tier": "bounded", "max_abs": 0.15})
    # pruning moves the output, but stays inside the frozen regression bound
    assert rep.max_abs > 0.0
    assert rep.passed
    strict = pl.check_equivalence(full, gated)
    assert not strict.passed


def test_full_prune_stack_drift_bound(stack, frame):
    _, pipe = stack
    image, scene = frame
    serial, _ = pipe.run_serial(image, scene)
    serial = serial.copy()
    fast, _ = pipe.run_fast(image, scene)
    rep = pl.check_equivalence(serial, fast,
                               {"tier": "bounded", "max_abs": 0.25})
    assert 0.0 < rep.max_abs <= 0.25
    assert rep.passed


def test_refinement_with_zeroed_prompt_path_is_identity(stack, frame):
    smpl, pipe = stack
    image, scene = frame
    doctored = dc.Decoder(smpl)
    doctored.weights["body.prompt_kp.w"] = \
        np.zeros_like(doctored.weights["body.prompt_kp.w"])
    doctored.weights["body.prompt_kp.b"] = \
        np.zeros_like(doctored.weights["body.prompt_kp.b"])
    pipe2 = pl.Pipeline(doctored)
    cfg_on = replace(pl.fast_config(), refine=True)
    a, _ = pipe2.run_fast(image, scene, cfg_on)
    a = a.copy()
    b, _ = pipe2.run_fast(image, scene, replace(cfg_on, refine=False))
    rep = pl.check_equivalence(a, b)
    assert rep.passed and rep.max_abs == 0.0


def test_check_equivalence_tiers_and_fields():
    a = np.zeros(bm.PARAM_DIM, dtype=np.float32)
    rep = pl.check_equivalence(a, a)
    assert rep.passed and rep.max_abs == 0.0
    b = a.copy()
    b[1] = 1e-3
    strict = pl.check_equivalence(a, b)
    assert not strict.passed
    loose = pl.check_equivalence(a, b, {"tier": "bounded", "max_abs": 0.01})
    assert loose.passed
    tight = pl.check_equivalence(a, b, {"tier": "bounded", "max_abs": 1e-4})
    assert not tight.passed
    assert loose.deltas["orient"] == pytest.approx(1e-3)
    assert loose.deltas["body_pose"] == 0.0
    assert set(loose.deltas) == {"orient", "body_pose", "left_hand",
                                 "right_hand", "shape"}
    with pytest.raises(UsageError):
        pl.check_equivalence(a, b, {"tier": "fuzzy"})


# ---------------------------------------------------------------------------
# static-plan contract


def test_static_plan_zero_steady_state_allocations(stack, frame):
    _, pipe = stack
    image, scene = frame
    cfg = pl.fast_config()
    plan = pl.build_plan(cfg)
    pipe.run(image, scene, cfg, plan=plan)
    assert plan.warm
    warm_count = plan.allocations
    assert warm_count > 0
    for _ in range(5):
        pipe.run(image, scene, cfg, plan=plan)
    assert plan.allocations == warm_count


def test_dynamic_plan_allocates_every_frame(stack, frame):
    _, pipe = stack
    image, scene = frame
    cfg = pl.serial_config()
    plan = pl.build_plan(cfg)
    pipe.run(image, scene, cfg, plan=plan)
    first = plan.allocations
    pipe.run(image, scene, cfg, plan=plan)
    assert plan.allocations == 2 * first


def test_static_plan_flags_steady_state_allocation(stack, frame):
    _, pipe = stack
    image, scene = frame
    cfg = pl.fast_config()
    plan = pl.build_plan(cfg)
    plan.warm = True  # pretend warmup happened; first real run must then fail
    with pytest.raises(UsageError):
        pipe.run(image, scene, cfg, plan=plan)


def test_engine_rejects_unknown_config_values(stack, frame):
    _, pipe = stack
    image, scene = frame
    with pytest.raises(UsageError):
        pipe.run(image, scene, replace(pl.fast_config(), detector="cascade"))
    with pytest.raises(UsageError):
        pipe.run(image, scene, replace(pl.fast_config(), crop_prep="learned"))


# ---------------------------------------------------------------------------
# crop preparation and prompts


def test_prepare_crops_parallel_bitwise_equal(stack, frame):
    smpl, pipe = stack
    image, scene = frame
    box, kp = pr.detect_stub(scene)
    boxes = [box,
             pr.hand_box(kp.xy[bm.LEFT_WRIST], box, image_size=scene.image_size),
             pr.hand_box(kp.xy[bm.RIGHT_WRIST], box, image_size=scene.image_size)]
    seq = pl.prepare_crops(image, boxes, 64, parallel=False)
    par = pl.prepare_crops(image, boxes, 64, parallel=True)
    assert np.array_equal(seq, par)


def test_box_prompt_layout():
    box = pr.BBox(10.0, 20.0, 110.0, 220.0)
    out = np.empty(8, dtype=np.float32)
    pl._box_prompt(box, (256, 256), out)
    expect = np.array([10, 20, 110, 220, 100, 200, 60, 120],
                      dtype=np.float32) / 256.0
    assert np.allclose(out, expect, atol=1e-7)


# ---------------------------------------------------------------------------
# latency reports and waterfall


def test_latency_report_schema_and_accounting(stack, frame):
    _, pipe = stack
    image, scene = frame
    cfg = pl.fast_config()
    plan = pl.build_plan(cfg)
    for _ in range(3):
        pipe.run(image, scene, cfg, plan=plan)
    plan.reset_timers()
    for _ in range(8):
        _, report = pipe.run(image, scene, cfg, plan=plan)
    payload = report.as_dict()
    assert set(payload) == {"stages", "total_ms", "mode"}
    for st in payload["stages"]:
        assert set(st) == {"name", "mean_ms", "p50_ms", "p95_ms", "calls"}
        assert st["calls"] >= report.frames
        assert 0.0 <= st["p50_ms"] <= st["p95_ms"]
    assert report.frames == 8
    assert report.stage_sum_ms() <= report.total_ms * 1.02 + 0.01
    json.dumps(payload)


def test_latency_report_speedup(stack, frame):
    _, pipe = stack
    image, scene = frame
    _, slow = pipe.run_serial(image, scene)
    _, quick = pipe.run_fast(image, scene)
    assert quick.speedup_vs(slow) > 1.0


def test_bench_waterfall_rows_and_monotonicity(stack, frame, tmp_path):
    _, pipe = stack
    image, scene = frame
    result = pl.bench(pipe, image, scene, frames=12, warmup=3)
    names = [r[0] for r in result.rows]
    assert names == ["serial_baseline", "prior_boxes", "batched_encode",
                     "gated_selection", "no_refinement", "static_plan",
                     "operator_consolidation"]
    cums = np.array([r[1] for r in result.rows])
    assert np.all(cums > 0.0)
    # monotone within the 5% noise band
    assert np.all(cums[1:] <= cums[:-1] * 1.05)
    deltas = [r[2] for r in result.rows]
    assert deltas[0] == 0.0
    for i in range(1, len(result.rows)):
        assert deltas[i] == pytest.approx(cums[i - 1] - cums[i])
    assert cums[0] / cums[-1] >= 1.8
    assert set(result.reports) == set(names)

    path = tmp_path / "waterfall.csv"
    pl.save_waterfall_csv(path, result.rows)
    loaded = pl.load_waterfall_csv(path)
    assert [r[0] for r in loaded] == names
    for (rn, rc, rd), (ln, lc, ld) in zip(result.rows, loaded):
        assert lc == pytest.approx(rc, abs=5e-4)
        assert ld == pytest.approx(rd, abs=5e-4)


def test_bench_requires_frames_beyond_warmup(stack, frame):
    _, pipe = stack
    image, scene = frame
    with pytest.raises(UsageError):
        pl.bench(pipe, image, scene, frames=5, warmup=5)


def test_waterfall_csv_rejects_foreign_header(tmp_path):
    path = tmp_path / "w.csv"
    path.write_text("stage,ms\nx,1.0\n")
    with pytest.raises(UsageError):
        pl.load_waterfall_csv(path)


# ---------------------------------------------------------------------------
# prior robustness


def test_keypoint_noise_drift_within_bound(stack):
    smpl, pipe = stack
    drifts = []
    for i, (image, scene) in enumerate(_scenes(smpl, 8, seed=62)):
        clean, _ = pipe.run_fast(image, scene)
        clean = clean.copy()
        noisy, _ = pipe.run_fast(
            image, scene, replace(pl.fast_config(), noise_sigma=8.0,
                                  seed=900 + i))
        drifts.append(float(np.linalg.norm(noisy - clean)
                            / np.linalg.norm(clean)))
    assert np.mean(drifts) <= 0.05
