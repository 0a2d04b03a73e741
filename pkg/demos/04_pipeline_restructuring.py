"""Serial baseline vs restructured pipeline: equivalence and the waterfall.

The restructurings come in two kinds.  Pure ones (batched encoding, static
plans, consolidated kernels) change execution order but not arithmetic, so
with the approximating toggles switched off the fast path reproduces the
serial output bit for bit.  Approximating ones (prior boxes, gated
selection, dropped refinement) trade bounded parameter drift for latency.

Run from the repository root:  python3 demos/04_pipeline_restructuring.py
"""

import numpy as np

from fsb import bodymodel as bm
from fsb import decoder as dc
from fsb import pipeline as pl
from fsb import priors as pr

_, smpl, _ = bm.make_toy_models(seed=0)
pipe = pl.Pipeline(dc.Decoder(smpl))
rng = np.random.default_rng(21)
scene = pr.random_scene(rng, smpl)
image = pr.render_scene(scene, smpl)

# -- 1. the two pathways ------------------------------------------------------

serial_params, serial_rep = pipe.run_serial(image, scene)
print("serial : %.1f ms, %d encoder calls"
      % (serial_rep.total_ms, pipe.last_counters["encode"]))

fast_params, fast_rep = pipe.run_fast(image, scene)
print("fast   : %.1f ms, %d encoder call over %d crops"
      % (fast_rep.total_ms, pipe.last_counters["encode"],
         pipe.last_counters["encoded_crops"]))

report = pl.check_equivalence(serial_params, fast_params,
                              tolerances={"tier": "bounded", "max_abs": 0.25})
print("fast vs serial max |delta| %.4f (bounded tier: %s)"
      % (report.max_abs, "pass" if report.passed else "fail"))

# -- 2. the limit case: pure restructurings only -------------------------------
# keep the dense detector, decoded-wrist crops, full selection and the
# refinement pass, but batch the encodes, fix the plan, and consolidate
# operators: outputs must not move at all

limit_params, _ = pipe.run_fast(image, scene, config=pl.limit_config())
exact = pl.check_equivalence(serial_params, limit_params)
print("\nlimit config bit-identical to serial:", exact.passed)

# -- 3. cumulative toggle waterfall --------------------------------------------

result = pl.bench(pipe, image, scene, frames=30, warmup=5)
print("\n%-24s %9s %9s" % ("toggle", "cum ms", "saved ms"))
for name, cum, delta in result.rows:
    print("%-24s %9.2f %9.2f" % (name, cum, delta))
first, last = result.rows[0][1], result.rows[-1][1]
print("end-to-end speedup: %.2fx" % (first / last))

# -- 4. static plans do not allocate once warm ----------------------------------

cfg = pl.fast_config()
plan = pl.build_plan(cfg)
pipe.run(image, scene, cfg, plan=plan)
after_warmup = plan.allocations
for _ in range(20):
    pipe.run(image, scene, cfg, plan=plan)
print("\nallocations: %d at warmup, +%d over 20 warm frames"
      % (after_warmup, plan.allocations - after_warmup))
