"""The frozen encoder-decoder and its gated intermediate predictions.

Each body-decoder block can optionally run a full intermediate prediction
(parameter heads + forward kinematics + reprojection) whose keypoints feed
the next block's positional tokens.  The selection set gates which blocks
pay that cost; counters make the bookkeeping visible.

Run from the repository root:  python3 demos/03_decoder_gating.py
"""

import time

import numpy as np

from fsb import bodymodel as bm
from fsb import decoder as dc
from fsb import pipeline as pl
from fsb import priors as pr

# -- 1. one scene, one crop, one feature stack --------------------------------

_, smpl, _ = bm.make_toy_models(seed=0)
decoder = dc.Decoder(smpl)
rng = np.random.default_rng(11)
scene = pr.random_scene(rng, smpl)
image = pr.render_scene(scene, smpl)
box, _ = pr.detect_stub(scene)
crop = pl.prepare_crops(image, [box], decoder.config.crop_size)
feat = decoder.encode(crop)[0]
prompt = pl._box_prompt(box, scene.image_size, np.empty(dc.PROMPT_DIM, np.float32))
print("crop %s -> %d tokens of width %d"
      % (crop.shape[1:], feat.shape[0], feat.shape[1]))

# -- 2. gating: cost scales with |selection| ----------------------------------

for sel in [(), (2,), (0, 2, 4), (0, 1, 2, 3, 4)]:
    counters = {}
    t0 = time.perf_counter()
    out = decoder.decode_body(feat, prompt, selection=sel, counters=counters)
    ms = 1e3 * (time.perf_counter() - t0)
    print("selection %-15r -> %d intermediate, %d fk, %.1f ms"
          % (sel, counters.get("intermediate", 0), counters.get("fk", 0), ms))

# -- 3. the full set equals always-on prediction ------------------------------
# selecting every block is not an approximation of anything: it IS the
# ungated decoder, so downstream consumers can treat the gate as free

full = decoder.decode_body(feat, prompt, selection=range(5))
print("\nfull-selection intermediates at layers:",
      [p.layer for p in full.intermediates])
print("final params close to last intermediate: %.4f"
      % np.abs(full.params - full.intermediates[-1].params).max())

# -- 4. batched hand decoding --------------------------------------------------
# hand crops ride in one batch; rows are independent, so the batch is
# bitwise equal to decoding each hand alone

hand_feats = decoder.encode(np.repeat(crop, 2, axis=0))
both = decoder.decode_hand(hand_feats)
one = decoder.decode_hand(hand_feats[:1])
print("\nbatched hand decode bitwise == single:",
      np.array_equal(both[0], one[0]))

# -- 5. merge ------------------------------------------------------------------

merged = decoder.merge(full.params, left=both[0], right=both[1])
changed = np.flatnonzero(merged != full.params)
print("merge touches only the wrist-child slots:", changed)
