"""Single command-line entry point.

Every experiment in the study is one `fsb` subcommand over an explicit,
schema-validated config.  Subcommands never read implicit state: all paths
are flags, all randomness is seeded through the config, and every emitted
report embeds the exact resolved config it ran under.

Exit codes: 0 success, 2 config or input error, 3 numeric failure,
4 threshold gate failed (CI hooks key off this).
"""

import argparse
import copy
import json
import os
import sys

import jsonschema
import numpy as np

from . import bodymodel as bm
from . import decoder as dc
from . import numkit as nk
from . import pipeline as pl
from . import priors as pr
from . import projection as pj
from .numkit import DTYPE, NumericError, ShapeError, UsageError


class GateError(RuntimeError):
    """An acceptance-style threshold gate failed."""


# ---------------------------------------------------------------------------
# configuration schema


_FIT_PROPS = {
    "steps": {"type": "integer", "minimum": 1},
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "lambda_pose": {"type": "number", "minimum": 0},
    "lambda_shape": {"type": "number", "minimum": 0},
}

_TRAIN_PROPS = {
    "epochs": {"type": "integer", "minimum": 1},
    "batch": {"type": "integer", "minimum": 1},
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "lambda_v": {"type": "number", "minimum": 0},
    "lambda_reg": {"type": "number", "minimum": 0},
    "heldout_frac": {"type": "number", "minimum": 0, "maximum": 0.9},
    "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1},
               "minItems": 2, "maxItems": 2},
    "v_sub": {"type": "integer", "minimum": 1},
    "seed": {"type": "integer", "minimum": 0},
}

_DENOISE_PROPS = {
    "epochs": {"type": "integer", "minimum": 1},
    "batch": {"type": "integer", "minimum": 1},
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "hidden": {"type": "integer", "minimum": 1},
    "heldout_frac": {"type": "number", "minimum": 0, "maximum": 0.9},
    "noise_sigma": {"type": "number", "minimum": 0},
    "walk_frames": {"type": "integer", "minimum": 8},
    "walk_seed": {"type": "integer", "minimum": 0},
    "seed": {"type": "integer", "minimum": 0},
}

_LAYER_SET = {"type": "array",
              "items": {"type": "integer", "minimum": 0, "maximum": 4},
              "uniqueItems": True}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "model_seed": {"type": "integer", "minimum": 0},
        "decoder_seed": {"type": "integer", "minimum": 0},
        "mhr_vertices": {"type": "integer", "minimum": 280},
        "smpl_vertices": {"type": "integer", "minimum": 140},
        "image_size": {"type": "array",
                       "items": {"type": "integer", "minimum": 64},
                       "minItems": 2, "maxItems": 2},
        "crop_size": {"type": "integer", "minimum": 16, "multipleOf": 8},
        "alpha": {"type": "number", "exclusiveMinimum": 0},
        "selection": _LAYER_SET,
        "hand_selection": _LAYER_SET,
        "batch_mode": {"enum": ["full_batch", "hand_batch", "no_batch"]},
        "detector": {"enum": ["stub", "dense"]},
        "refine": {"type": "boolean"},
        "correctives": {"type": "boolean"},
        "plan_mode": {"enum": [pl.SERIAL_DYNAMIC, pl.FAST_STATIC]},
        "consolidate": {"type": "boolean"},
        "noise_sigma": {"type": "number", "minimum": 0},
        "pose_sigma": {"type": "number", "minimum": 0},
        "shape_sigma": {"type": "number", "minimum": 0},
        "fit": {"type": "object", "additionalProperties": False,
                "properties": _FIT_PROPS},
        "train": {"type": "object", "additionalProperties": False,
                  "properties": _TRAIN_PROPS},
        "denoise": {"type": "object", "additionalProperties": False,
                    "properties": _DENOISE_PROPS},
    },
}

DEFAULT_CONFIG = {
    "seed": 0,
    "model_seed": 0,
    "decoder_seed": 40,
    "mhr_vertices": 1200,
    "smpl_vertices": 600,
    "image_size": [256, 256],
    "crop_size": 64,
    "alpha": 3.0,
    "selection": [0, 1, 2],
    "hand_selection": [],
    "batch_mode": "full_batch",
    "detector": "stub",
    "refine": False,
    "correctives": False,
    "plan_mode": pl.FAST_STATIC,
    "consolidate": True,
    "noise_sigma": 0.0,
    "pose_sigma": 0.2,
    "shape_sigma": 0.45,
    "fit": {"steps": 300, "lr": 0.05, "lambda_pose": 1e-3,
            "lambda_shape": 1e-2},
    "train": {"epochs": 200, "batch": 64, "lr": 1e-3, "lambda_v": 1.0,
              "lambda_reg": 0.1, "heldout_frac": 0.1, "hidden": [512, 256],
              "v_sub": 300, "seed": 0},
    "denoise": {"epochs": 200, "batch": 128, "lr": 3e-3, "hidden": 32,
                "heldout_frac": 0.1, "noise_sigma": 0.1,
                "walk_frames": 3000, "walk_seed": 7, "seed": 0},
}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["stages", "total_ms", "mode"],
    "properties": {
        "stages": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "mean_ms", "p50_ms", "p95_ms", "calls"],
            },
        },
        "total_ms": {"type": "number"},
        "mode": {"type": "string"},
    },
}


def _validate(instance, schema, label):
    try:
        jsonschema.validate(instance, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError("%s: field %r: %s" % (label, where, exc.message))


def _deep_merge(base, override):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None):
    """Defaults, overlaid with the given JSON file, schema-checked."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            user = json.load(fh)
        if not isinstance(user, dict):
            raise UsageError("config file must hold a JSON object")
        _validate(user, CONFIG_SCHEMA, "config")
        cfg = _deep_merge(cfg, user)
    _validate(cfg, CONFIG_SCHEMA, "config")
    return cfg


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# shared world construction


def build_templates(cfg):
    return bm.make_toy_models(seed=cfg["model_seed"],
                              mhr_vertices=cfg["mhr_vertices"],
                              smpl_vertices=cfg["smpl_vertices"])


def build_decoder(cfg, template):
    dcfg = dc.DecoderConfig(crop_size=cfg["crop_size"])
    return dc.Decoder(template, config=dcfg, seed=cfg["decoder_seed"])


def pipe_config(cfg, mode):
    """Lower a RunConfig to a pipeline configuration for one mode."""
    if mode == "serial":
        from dataclasses import replace
        return replace(pl.serial_config(), alpha=cfg["alpha"],
                       noise_sigma=cfg["noise_sigma"], seed=cfg["seed"])
    if mode != "fast":
        raise UsageError("mode must be serial or fast, got %r" % (mode,))
    crop_prep, batch = {
        "full_batch": ("priors", True),
        "hand_batch": ("decoded", True),
        "no_batch": ("priors", False),
    }[cfg["batch_mode"]]
    return pl.PipeConfig(
        detector=cfg["detector"], crop_prep=crop_prep, batch_encode=batch,
        selection=tuple(cfg["selection"]),
        hand_selection=tuple(cfg["hand_selection"]),
        refine=cfg["refine"], plan_mode=cfg["plan_mode"],
        consolidate=cfg["consolidate"], alpha=cfg["alpha"],
        noise_sigma=cfg["noise_sigma"], seed=cfg["seed"])


def _fit_config(cfg):
    f = cfg["fit"]
    return pj.FitConfig(steps=f["steps"], lr=f["lr"],
                        lambda_pose=f["lambda_pose"],
                        lambda_shape=f["lambda_shape"])


def _train_config(cfg):
    t = cfg["train"]
    return pj.TrainConfig(epochs=t["epochs"], batch=t["batch"], lr=t["lr"],
                          lambda_v=t["lambda_v"], lambda_reg=t["lambda_reg"],
                          heldout_frac=t["heldout_frac"],
                          hidden=tuple(t["hidden"]), v_sub=t["v_sub"],
                          seed=t["seed"])


def _denoise_config(cfg):
    d = cfg["denoise"]
    return pj.DenoiseConfig(epochs=d["epochs"], batch=d["batch"], lr=d["lr"],
                            hidden=d["hidden"],
                            heldout_frac=d["heldout_frac"], seed=d["seed"])


# ---------------------------------------------------------------------------
# synth


def _synth_poses(cfg, rng, template, n):
    """Scene poses for the dataset; wrist-child slots stay at rest so the
    conversion study compares against a projector that zeroes them too."""
    scenes = []
    for _ in range(n):
        scene = pr.random_scene(rng, template,
                                image_size=tuple(cfg["image_size"]),
                                pose_sigma=cfg["pose_sigma"],
                                shape_sigma=cfg["shape_sigma"])
        pose = scene.pose.copy()
        pose[3 + bm.LEFT_HAND_POSE.start:3 + bm.LEFT_HAND_POSE.stop] = 0.0
        pose[3 + bm.RIGHT_HAND_POSE.start:3 + bm.RIGHT_HAND_POSE.stop] = 0.0
        scene = pr.make_scene(template, pose, scene.translation, scene.camera,
                              scene.image_size, scene.seed)
        scenes.append(scene)
    return scenes


def cmd_synth(args):
    cfg = load_config(args.config)
    seed = cfg["seed"] if args.seed is None else args.seed
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    mhr, smpl, gt = build_templates(cfg)
    rng = np.random.default_rng(seed)
    scenes = _synth_poses(cfg, rng, smpl, args.n)
    poses = np.stack([s.pose for s in scenes])
    meshes = bm.skin_batch(mhr, poses, correctives=cfg["correctives"])

    fit_cfg = _fit_config(cfg)
    params = np.empty_like(poses)
    errors = []
    chunk = 16
    for lo in range(0, args.n, chunk):
        res = pj.fit_batch(meshes[lo:lo + chunk], gt, smpl, fit_cfg)
        params[lo:lo + chunk] = res.params
        errors.extend(float(e) for e in res.vertex_error)

    os.makedirs(args.out, exist_ok=True)
    nk.write_fsb1(os.path.join(args.out, "meshes.fsb1"), meshes)
    nk.write_fsb1(os.path.join(args.out, "params.fsb1"), params)
    nk.write_fsb1(os.path.join(args.out, "gt_poses.fsb1"), poses)
    scene_payload = [{
        "image_size": list(s.image_size),
        "camera": {"fx": s.camera.fx, "fy": s.camera.fy,
                   "cx": s.camera.cx, "cy": s.camera.cy},
        "pose": [float(v) for v in s.pose],
        "translation": [float(v) for v in s.translation],
        "seed": int(s.seed),
    } for s in scenes]
    _write_json(os.path.join(args.out, "scenes.json"), scene_payload)

    # re-verify from the files actually written, not from live arrays
    stored_meshes = nk.read_fsb1(os.path.join(args.out, "meshes.fsb1"))
    stored_params = nk.read_fsb1(os.path.join(args.out, "params.fsb1"))
    bridged = pj.bridge(stored_meshes, gt)
    skinned = bm.skin_batch(smpl, stored_params)
    gaps = np.linalg.norm(skinned.astype(np.float64)
                          - bridged.astype(np.float64), axis=-1).mean(axis=-1)
    if not np.allclose(gaps, errors, rtol=1e-5, atol=1e-7):
        raise NumericError("stored parameters do not reproduce fit errors")

    manifest = {
        "kind": "synth",
        "n": args.n,
        "seed": seed,
        "config": cfg,
        "vertex_errors": [round(e, 9) for e in errors],
        "mean_vertex_error": round(float(np.mean(errors)), 9),
    }
    _write_json(os.path.join(args.out, "manifest.json"), manifest)
    ok = float(np.mean(np.asarray(errors) <= 1e-2))
    print("synth: %d pairs, mean vertex error %.5f, %.0f%% within 1e-2"
          % (args.n, float(np.mean(errors)), 100 * ok))
    if args.gate and ok < 0.95:
        raise GateError("only %.0f%% of pairs reached 1e-2 vertex error"
                        % (100 * ok))
    return 0


# ---------------------------------------------------------------------------
# precompute-bary / fit


def cmd_precompute_bary(args):
    cfg = load_config(args.config)
    mhr, smpl, _ = build_templates(cfg)
    bmap = pj.precompute_bary(mhr, smpl)
    pj.save_bary_map(args.out, bmap)
    print("bary map: %d targets, %d degenerate reroutes"
          % (bmap.face_index.shape[0], bmap.degenerate_targets.shape[0]))
    return 0


def _load_meshes(path):
    meshes = nk.read_fsb1(path)
    if meshes.ndim != 3 or meshes.shape[-1] != 3:
        raise ShapeError("meshes file must hold (N, V, 3), got %r"
                         % (meshes.shape,))
    return meshes


def cmd_fit(args):
    cfg = load_config(args.config)
    _, smpl, _ = build_templates(cfg)
    meshes = _load_meshes(args.meshes)
    bmap = pj.load_bary_map(args.bary)
    fit_cfg = _fit_config(cfg)
    params = np.empty((meshes.shape[0], bm.PARAM_DIM), dtype=DTYPE)
    errors = []
    for lo in range(0, meshes.shape[0], 16):
        res = pj.fit_batch(meshes[lo:lo + 16], bmap, smpl, fit_cfg)
        params[lo:lo + 16] = res.params
        errors.extend(float(e) for e in res.vertex_error)
    os.makedirs(args.out, exist_ok=True)
    nk.write_fsb1(os.path.join(args.out, "params.fsb1"), params)
    _write_json(os.path.join(args.out, "manifest.json"), {
        "kind": "fit",
        "config": cfg,
        "n": int(meshes.shape[0]),
        "vertex_errors": [round(e, 9) for e in errors],
        "mean_vertex_error": round(float(np.mean(errors)), 9),
    })
    print("fit: %d meshes, mean vertex error %.5f"
          % (meshes.shape[0], float(np.mean(errors))))
    return 0


# ---------------------------------------------------------------------------
# training commands


def cmd_train_projector(args):
    cfg = load_config(args.config)
    _, smpl, _ = build_templates(cfg)
    meshes = _load_meshes(os.path.join(args.data, "meshes.fsb1"))
    theta = nk.read_fsb1(os.path.join(args.data, "params.fsb1"))
    bmap = pj.load_bary_map(args.bary)
    res = pj.train_projector(meshes, theta, bmap, smpl, _train_config(cfg))
    os.makedirs(args.out, exist_ok=True)
    pj.save_projector(os.path.join(args.out, "weights"), res.weights)
    pj.save_curve(os.path.join(args.out, "curve.csv"), res.history)
    _write_json(os.path.join(args.out, "manifest.json"), {
        "kind": "train_projector",
        "config": cfg,
        "best_epoch": int(res.best_epoch),
        "best_heldout_vertex_err":
            round(float(res.history["heldout_vertex_err"][res.best_epoch]), 9),
    })
    print("train-projector: best epoch %d, heldout vertex error %.5f"
          % (res.best_epoch,
             res.history["heldout_vertex_err"][res.best_epoch]))
    return 0


def cmd_train_denoiser(args):
    cfg = load_config(args.config)
    d = cfg["denoise"]
    poses = pj.pose_walk(d["walk_seed"], d["walk_frames"])
    res = pj.train_denoiser(poses, d["noise_sigma"], _denoise_config(cfg))
    os.makedirs(args.out, exist_ok=True)
    pj.save_denoiser(os.path.join(args.out, "weights"), res.weights)
    pj.save_curve(os.path.join(args.out, "curve.csv"), res.history,
                  fields=("epoch", "train_loss", "heldout_mse"))
    _write_json(os.path.join(args.out, "manifest.json"), {
        "kind": "train_denoiser",
        "config": cfg,
        "best_epoch": int(res.best_epoch),
        "best_heldout_mse":
            round(float(res.history["heldout_mse"][res.best_epoch]), 9),
    })
    print("train-denoiser: best epoch %d, heldout mse %.6f"
          % (res.best_epoch, res.history["heldout_mse"][res.best_epoch]))
    return 0


# ---------------------------------------------------------------------------
# run / bench / bench-convert


def _scene_for(cfg, smpl, path=None, index=0):
    if path is not None:
        with open(path) as fh:
            payload = json.load(fh)
        # synth writes a list of scenes; a single saved scene is one object
        if isinstance(payload, list):
            if not 0 <= index < len(payload):
                raise UsageError("scene index %d out of range: %s holds %d scenes"
                                 % (index, path, len(payload)))
            payload = payload[index]
        return pr.scene_from_dict(payload, smpl)
    rng = np.random.default_rng(cfg["seed"])
    return pr.random_scene(rng, smpl, image_size=tuple(cfg["image_size"]),
                           pose_sigma=cfg["pose_sigma"],
                           shape_sigma=cfg["shape_sigma"])


def cmd_run(args):
    cfg = load_config(args.config)
    _, smpl, _ = build_templates(cfg)
    scene = _scene_for(cfg, smpl, args.scene, args.scene_index)
    image = pr.render_scene(scene, smpl)
    pipe = pl.Pipeline(build_decoder(cfg, smpl))
    pc = pipe_config(cfg, args.mode)
    params, report = pipe.run(image, scene, pc)
    payload = report.as_dict()
    payload["config"] = cfg
    payload["params"] = [float(v) for v in params]
    if args.dump_intermediates:
        out = pipe.decoder.decode_body(
            _rerun_body_features(pipe, image, scene, pc),
            _rerun_prompt(pipe, scene, pc), selection=pc.selection,
            refine=pc.refine, dump_tokens=True, fk_kernel=pc.consolidate)
        payload["layer_tokens"] = [t.tolist() for t in out.layer_tokens]
    _write_json(args.out, payload)
    print("run[%s]: %.2f ms/frame, %d stages"
          % (args.mode, payload["total_ms"], len(payload["stages"])))
    return 0


def _rerun_body_features(pipe, image, scene, pc):
    """Recompute the body-crop features outside the timed pipeline (used only
    by --dump-intermediates)."""
    if pc.detector == "dense":
        box, _ = pr.detect_dense(image)
    else:
        box, _ = pr.detect_stub(scene, pc.noise_sigma, pc.seed)
    crop = pl.prepare_crops(image, [box], pipe.crop_size)
    return pipe.decoder.encode(crop)[0]


def _rerun_prompt(pipe, scene, pc):
    if pc.detector == "dense":
        raise UsageError("--dump-intermediates requires the stub detector")
    box, _ = pr.detect_stub(scene, pc.noise_sigma, pc.seed)
    out = np.empty(dc.PROMPT_DIM, dtype=DTYPE)
    return pl._box_prompt(box, scene.image_size, out)


def _load_matrix(cfg, path):
    with open(path) as fh:
        rows = json.load(fh)
    if not isinstance(rows, list) or not rows:
        raise UsageError("matrix file must hold a nonempty JSON array")
    out = []
    for i, row in enumerate(rows):
        if not isinstance(row, dict) or "name" not in row:
            raise UsageError("matrix row %d needs a 'name'" % i)
        mode = row.get("mode", "fast")
        merged = _deep_merge(cfg, row.get("overrides", {}))
        _validate(merged, CONFIG_SCHEMA, "matrix row %r" % row["name"])
        out.append((row["name"], pipe_config(merged, mode)))
    return out


def cmd_bench(args):
    cfg = load_config(args.config)
    _, smpl, _ = build_templates(cfg)
    scene = _scene_for(cfg, smpl, args.scene, args.scene_index)
    image = pr.render_scene(scene, smpl)
    pipe = pl.Pipeline(build_decoder(cfg, smpl))
    matrix = None if args.matrix is None else _load_matrix(cfg, args.matrix)
    result = pl.bench(pipe, image, scene, frames=args.frames,
                      warmup=args.warmup, matrix=matrix)
    pl.save_waterfall_csv(args.csv, result.rows)
    if args.out:
        _write_json(args.out, {
            "config": cfg,
            "rows": [{"toggle": n, "cum_ms": c, "delta_ms": d}
                     for n, c, d in result.rows],
            "reports": {name: rep.as_dict()
                        for name, rep in result.reports.items()},
        })
    first, last = result.rows[0], result.rows[-1]
    print("bench: %s %.2f ms -> %s %.2f ms (%.2fx)"
          % (first[0], first[1], last[0], last[1], first[1] / last[1]))
    return 0


def cmd_bench_convert(args):
    cfg = load_config(args.config)
    _, smpl, _ = build_templates(cfg)
    meshes = _load_meshes(os.path.join(args.data, "meshes.fsb1"))
    if args.limit is not None:
        meshes = meshes[:args.limit]
    bmap = pj.load_bary_map(args.bary)
    weights = pj.load_projector(os.path.join(args.weights, "weights"))
    report = pj.bench_conversion(meshes, bmap, smpl, _fit_config(cfg),
                                 weights)
    payload = report.as_dict()
    payload["config"] = cfg
    _write_json(args.out, payload)
    print("bench-convert: fit %.2f ms, project %.4f ms, ratio %.0fx"
          % (report.fit_ms, report.project_ms, report.ratio))
    if args.min_speedup is not None and report.ratio < args.min_speedup:
        raise GateError("conversion speedup %.1fx below gate %.1fx"
                        % (report.ratio, args.min_speedup))
    return 0


# ---------------------------------------------------------------------------
# report rendering


def _load_report(path):
    with open(path) as fh:
        payload = json.load(fh)
    _validate(payload, REPORT_SCHEMA, "report %s" % path)
    return payload


def cmd_report(args):
    reports = [(_strip_ext(os.path.basename(p)), _load_report(p))
               for p in args.inputs]
    lines = []
    rows = []
    if len(reports) == 1:
        name, rep = reports[0]
        header = ["name", "mean_ms", "p50_ms", "p95_ms", "calls"]
        rows.append(header)
        for st in rep["stages"]:
            rows.append([st["name"], "%.4f" % st["mean_ms"],
                         "%.4f" % st["p50_ms"], "%.4f" % st["p95_ms"],
                         str(st["calls"])])
        rows.append(["total", "%.4f" % rep["total_ms"], "", "", ""])
        lines.append("report %s (%s)" % (name, rep["mode"]))
    else:
        baseline = reports[0][1]["total_ms"]
        rows.append(["report", "mode", "total_ms", "speedup"])
        for name, rep in reports:
            rows.append([name, rep["mode"], "%.4f" % rep["total_ms"],
                         "%.2f" % (baseline / rep["total_ms"])])
    width = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, width)).rstrip())
    text = "\n".join(lines)
    print(text)
    if args.csv:
        with open(args.csv, "w") as fh:
            for r in rows:
                fh.write(",".join(r) + "\n")
    return 0


def _strip_ext(name):
    return name[:-5] if name.endswith(".json") else name


# ---------------------------------------------------------------------------
# argument wiring


def _build_parser():
    p = argparse.ArgumentParser(
        prog="fsb",
        description="Restructured human-mesh-recovery pipeline study")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate scenes and fitting pairs")
    sp.add_argument("--config")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--gate", action="store_true",
                    help="exit 4 unless 95%% of pairs reach 1e-2 error")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("precompute-bary",
                        help="store the source-to-target barycentric map")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_precompute_bary)

    sp = sub.add_parser("fit", help="iterative fitting over stored meshes")
    sp.add_argument("--config")
    sp.add_argument("--meshes", required=True)
    sp.add_argument("--bary", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("train-projector",
                        help="distill iterative fits into the projector")
    sp.add_argument("--config")
    sp.add_argument("--data", required=True,
                    help="synth output directory (meshes + fitted params)")
    sp.add_argument("--bary", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_projector)

    sp = sub.add_parser("train-denoiser", help="train the kinematic prior")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_denoiser)

    sp = sub.add_parser("run", help="run one frame through a pathway")
    sp.add_argument("--mode", choices=["serial", "fast"], required=True)
    sp.add_argument("--scene", default=None)
    sp.add_argument("--scene-index", type=int, default=0,
                    help="entry to use when --scene holds a list")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--dump-intermediates", action="store_true")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("bench", help="latency waterfall over toggles")
    sp.add_argument("--config")
    sp.add_argument("--scene", default=None)
    sp.add_argument("--scene-index", type=int, default=0,
                    help="entry to use when --scene holds a list")
    sp.add_argument("--matrix", default=None)
    sp.add_argument("--frames", type=int, default=100)
    sp.add_argument("--warmup", type=int, default=10)
    sp.add_argument("--csv", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("bench-convert",
                        help="iterative fit vs projector wall time")
    sp.add_argument("--config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--bary", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--limit", type=int, default=None)
    sp.add_argument("--min-speedup", type=float, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_bench_convert)

    sp = sub.add_parser("report", help="render report JSONs as table + CSV")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--csv", default=None)
    sp.set_defaults(func=cmd_report)

    return p


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GateError as exc:
        print("gate failed: %s" % exc, file=sys.stderr)
        return 4
    except NumericError as exc:
        print("numeric failure: %s" % exc, file=sys.stderr)
        return 3
    except (UsageError, ShapeError, OSError, json.JSONDecodeError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
