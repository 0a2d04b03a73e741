"""Frozen toy promptable encoder-decoder.

The token anatomy mirrors a promptable human-mesh transformer: one parameter
readout token, four prompt tokens, 22 positional slots for predicted 2D
keypoints, 22 for pelvis-centered 3D joints, and two hand summary tokens.
Per layer, an optional intermediate prediction decodes parameters, runs
forward kinematics, and refreshes the keypoint positional encodings; a layer
selection set gates which layers pay that cost, with skipped layers reusing
the cached encodings.

All weights are random but frozen per seed: the artifact verifies execution
equivalence and cost, not reconstruction accuracy.  Batched evaluation is
arranged so every row reproduces the single-input bits exactly.
"""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import bodymodel as bm
from . import numkit as nk
from .numkit import DTYPE, ShapeError, UsageError

# token layout
TOKEN_MHR = 0
TOKEN_PROMPT = slice(1, 5)
TOKEN_KP2D = slice(5, 27)
TOKEN_KP3D = slice(27, 49)
TOKEN_HAND = slice(49, 51)
M_TOKENS = 51

HAND_TOKENS = 4  # rotation readout + three gated point slots
PROMPT_DIM = 8

# hand-joint slots inside the 76-dim parameter vector
LEFT_HAND_VEC = slice(3 + bm.LEFT_HAND_POSE.start, 3 + bm.LEFT_HAND_POSE.stop)
RIGHT_HAND_VEC = slice(3 + bm.RIGHT_HAND_POSE.start, 3 + bm.RIGHT_HAND_POSE.stop)


@dataclass
class DecoderConfig:
    crop_size: int = 64
    patch: int = 8
    dim: int = 64
    heads: int = 4
    enc_layers: int = 2
    body_layers: int = 5
    hand_layers: int = 5


@dataclass
class IntermediatePrediction:
    layer: int
    params: np.ndarray  # (76,)
    camera: np.ndarray  # (3,) weak-perspective (scale, tx, ty)
    kp2d: np.ndarray    # (22, 2)


@dataclass
class BodyDecodeOut:
    params: np.ndarray
    camera: np.ndarray
    intermediates: list
    layer_tokens: list = field(default_factory=list)


def _bump(counters, key, n=1):
    if counters is not None:
        counters[key] = counters.get(key, 0) + n


def _init_weights(cfg, seed):
    rng = np.random.default_rng(seed)
    w = {}

    def mat(name, shape, scale):
        w[name] = (rng.standard_normal(shape) * (scale / np.sqrt(shape[0]))
                   ).astype(DTYPE)

    def raw(name, shape, scale):
        w[name] = (rng.standard_normal(shape) * scale).astype(DTYPE)

    def bias(name, dim_):
        w[name] = np.zeros(dim_, dtype=DTYPE)

    def ln(prefix):
        w[prefix + "_g"] = np.ones(cfg.dim, dtype=DTYPE)
        w[prefix + "_b"] = np.zeros(cfg.dim, dtype=DTYPE)

    def attn(prefix, cross):
        if cross:
            ln(prefix + ".lnq")
            ln(prefix + ".lnkv")
        else:
            ln(prefix + ".ln")
        for nm in ("wq", "wk", "wv", "wo"):
            mat(prefix + "." + nm, (cfg.dim, cfg.dim), 0.5)
        for nm in ("bq", "bk", "bv", "bo"):
            bias(prefix + "." + nm, cfg.dim)

    def mlp(prefix):
        ln(prefix + ".ln")
        mat(prefix + ".w1", (cfg.dim, 4 * cfg.dim), 0.5)
        bias(prefix + ".b1", 4 * cfg.dim)
        mat(prefix + ".w2", (4 * cfg.dim, cfg.dim), 0.5)
        bias(prefix + ".b2", cfg.dim)

    n_patch = (cfg.crop_size // cfg.patch) ** 2
    mat("enc.patch_w", (cfg.patch * cfg.patch * 3, cfg.dim), 0.5)
    bias("enc.patch_b", cfg.dim)
    raw("enc.pos", (n_patch, cfg.dim), 0.3)
    ln("enc.norm")
    for l in range(cfg.enc_layers):
        attn("enc.l%d.self" % l, cross=False)
        mlp("enc.l%d.mlp" % l)

    raw("body.token_init", (M_TOKENS, cfg.dim), 0.4)
    raw("body.p2d_init", (bm.NUM_JOINTS, cfg.dim), 0.3)
    raw("body.p3d_init", (bm.NUM_JOINTS, cfg.dim), 0.3)
    ln("body.norm")
    for l in range(cfg.body_layers):
        attn("body.l%d.self" % l, cross=False)
        attn("body.l%d.cross" % l, cross=True)
        mlp("body.l%d.mlp" % l)
    mat("body.head_params.w", (cfg.dim, bm.PARAM_DIM), 0.35)
    bias("body.head_params.b", bm.PARAM_DIM)
    mat("body.head_cam.w", (cfg.dim, 3), 0.35)
    w["body.head_cam.b"] = np.array([0.5, 0.0, 0.0], dtype=DTYPE)
    mat("body.phi2d.w", (2, cfg.dim), 0.4)
    bias("body.phi2d.b", cfg.dim)
    mat("body.phi3d.w", (3, cfg.dim), 0.4)
    bias("body.phi3d.b", cfg.dim)
    mat("body.prompt_box.w", (PROMPT_DIM, 4 * cfg.dim), 0.4)
    bias("body.prompt_box.b", 4 * cfg.dim)
    mat("body.prompt_kp.w", (2 * bm.NUM_JOINTS, 4 * cfg.dim), 0.25)
    bias("body.prompt_kp.b", 4 * cfg.dim)

    raw("hand.token_init", (HAND_TOKENS, cfg.dim), 0.4)
    raw("hand.p_init", (3, cfg.dim), 0.3)
    ln("hand.norm")
    for l in range(cfg.hand_layers):
        attn("hand.l%d.self" % l, cross=False)
        attn("hand.l%d.cross" % l, cross=True)
        mlp("hand.l%d.mlp" % l)
    mat("hand.head_rot.w", (cfg.dim, 3), 0.35)
    bias("hand.head_rot.b", 3)
    mat("hand.head_cam.w", (cfg.dim, 3), 0.35)
    w["hand.head_cam.b"] = np.array([0.5, 0.0, 0.0], dtype=DTYPE)
    mat("hand.phi2d.w", (2, cfg.dim), 0.4)
    bias("hand.phi2d.b", cfg.dim)
    w["hand.canon_pts"] = (0.1 * np.eye(3)).astype(DTYPE)
    return w


class Decoder:
    """Frozen encoder plus body/hand decoders sharing one weight table."""

    def __init__(self, template, config=None, seed=40):
        self.template = template
        self.config = config if config is not None else DecoderConfig()
        self.seed = int(seed)
        self.weights = _init_weights(self.config, self.seed)

    # -- shared transformer pieces -------------------------------------------

    def _ln(self, x, prefix):
        w = self.weights
        return nk.layer_norm(x, w[prefix + "_g"], w[prefix + "_b"])

    def _attention(self, q3, kv3, prefix):
        """(B, Tq, D) x (B, Tk, D) -> (B, Tq, D).  Shared projections run as
        one row-batched matmul; per-item attention cores keep every row
        bit-identical to a single-item call."""
        w = self.weights
        bsz, tq, d = q3.shape
        tk = kv3.shape[1]
        q = nk.matmul(np.ascontiguousarray(q3.reshape(bsz * tq, d)),
                      w[prefix + ".wq"]) + w[prefix + ".bq"]
        k = nk.matmul(np.ascontiguousarray(kv3.reshape(bsz * tk, d)),
                      w[prefix + ".wk"]) + w[prefix + ".bk"]
        v = nk.matmul(np.ascontiguousarray(kv3.reshape(bsz * tk, d)),
                      w[prefix + ".wv"]) + w[prefix + ".bv"]
        q = q.reshape(bsz, tq, d)
        k = k.reshape(bsz, tk, d)
        v = v.reshape(bsz, tk, d)
        heads = self.config.heads
        dh = d // heads
        scale = np.float32(1.0 / np.sqrt(dh))
        ctx = np.empty((bsz, tq, d), dtype=DTYPE)
        for b in range(bsz):
            for h in range(heads):
                sl = slice(h * dh, (h + 1) * dh)
                qh = np.ascontiguousarray(q[b, :, sl])
                kh = np.ascontiguousarray(k[b, :, sl])
                vh = np.ascontiguousarray(v[b, :, sl])
                logits = nk.matmul(qh, nk.transpose(kh)) * scale
                att = nk.softmax(logits, axis=-1)
                ctx[b, :, sl] = nk.matmul(att, vh)
        out = nk.matmul(np.ascontiguousarray(ctx.reshape(bsz * tq, d)),
                        w[prefix + ".wo"]) + w[prefix + ".bo"]
        return out.reshape(bsz, tq, d)

    def _mlp(self, x3, prefix):
        w = self.weights
        bsz, t, d = x3.shape
        h = self._ln(np.ascontiguousarray(x3.reshape(bsz * t, d)),
                     prefix + ".ln")
        h = np.maximum(nk.matmul(h, w[prefix + ".w1"]) + w[prefix + ".b1"], 0.0)
        out = nk.matmul(h, w[prefix + ".w2"]) + w[prefix + ".b2"]
        return out.reshape(bsz, t, d)

    def _self_block(self, x3, prefix):
        bsz, t, d = x3.shape
        h = self._ln(np.ascontiguousarray(x3.reshape(bsz * t, d)),
                     prefix + ".ln").reshape(bsz, t, d)
        return self._attention(h, h, prefix)

    def _cross_block(self, x3, feat3, prefix):
        bsz, t, d = x3.shape
        tk = feat3.shape[1]
        hq = self._ln(np.ascontiguousarray(x3.reshape(bsz * t, d)),
                      prefix + ".lnq").reshape(bsz, t, d)
        hk = self._ln(np.ascontiguousarray(feat3.reshape(bsz * tk, d)),
                      prefix + ".lnkv").reshape(bsz, tk, d)
        return self._attention(hq, hk, prefix)

    # -- encoder --------------------------------------------------------------

    def encode(self, crops, counters=None):
        """(B, S, S, 3) crops -> (B, S/p * S/p, D) features.  Per-crop rows are
        independent of batch composition."""
        cfg = self.config
        crops = np.ascontiguousarray(crops, dtype=DTYPE)
        if crops.ndim != 4 or crops.shape[3] != 3 \
                or crops.shape[1] != crops.shape[2]:
            raise ShapeError("encode expects (B, S, S, 3), got %r"
                             % (crops.shape,))
        s = crops.shape[1]
        if s % cfg.patch != 0 or s != cfg.crop_size:
            raise ShapeError("crop size %d incompatible with patch %d / "
                             "configured size %d" % (s, cfg.patch, cfg.crop_size))
        bsz = crops.shape[0]
        n = s // cfg.patch
        p = cfg.patch
        patches = crops.reshape(bsz, n, p, n, p, 3).transpose(0, 1, 3, 2, 4, 5)
        patches = np.ascontiguousarray(patches).reshape(bsz * n * n, p * p * 3)
        w = self.weights
        x = nk.matmul(patches, w["enc.patch_w"]) + w["enc.patch_b"]
        x = x.reshape(bsz, n * n, cfg.dim) + w["enc.pos"][None]
        for l in range(cfg.enc_layers):
            pre = "enc.l%d" % l
            x = x + self._self_block(x, pre + ".self")
            x = x + self._mlp(x, pre + ".mlp")
        x = self._ln(np.ascontiguousarray(x.reshape(bsz * n * n, cfg.dim)),
                     "enc.norm").reshape(bsz, n * n, cfg.dim)
        _bump(counters, "encode")
        _bump(counters, "encoded_crops", bsz)
        return x

    # -- body decoder ----------------------------------------------------------

    def _heads(self, tokens):
        w = self.weights
        tn = self._ln(tokens, "body.norm")
        head_in = np.ascontiguousarray(tn[0:1])
        params = (nk.matmul(head_in, w["body.head_params.w"])
                  + w["body.head_params.b"])[0]
        cam = (nk.matmul(head_in, w["body.head_cam.w"])
               + w["body.head_cam.b"])[0]
        return params, cam

    def predict_kp2d(self, params, camera, counters=None, fk_kernel=True):
        """FK + weak-perspective projection of the decoded joints."""
        fk = bm.forward_kinematics(
            self.template, bm.PoseState.from_vector(params),
            use_kernel=fk_kernel)
        _bump(counters, "fk")
        kp2d = camera[0] * fk.joints[:, :2] + camera[1:3][None, :]
        _bump(counters, "project")
        return kp2d, fk.joints

    def _body_pass(self, feat, prompt, prompt_extra, sel, counters,
                   dump_tokens, fk_kernel):
        w = self.weights
        cfg = self.config
        tokens = w["body.token_init"].copy()
        box_tok = (nk.matmul(prompt[None, :], w["body.prompt_box.w"])
                   + w["body.prompt_box.b"]).reshape(4, cfg.dim)
        tokens[TOKEN_PROMPT] = tokens[TOKEN_PROMPT] + box_tok
        if prompt_extra is not None:
            tokens[TOKEN_PROMPT] = tokens[TOKEN_PROMPT] + prompt_extra
        p2d = w["body.p2d_init"].copy()
        p3d = w["body.p3d_init"].copy()
        intermediates = []
        dumps = []
        feat3 = feat[None]
        for l in range(cfg.body_layers):
            pre = "body.l%d" % l
            a_in = tokens.copy()
            a_in[TOKEN_KP2D] = a_in[TOKEN_KP2D] + p2d
            a_in[TOKEN_KP3D] = a_in[TOKEN_KP3D] + p3d
            tokens = tokens + self._self_block(a_in[None], pre + ".self")[0]
            tokens = tokens + self._cross_block(tokens[None], feat3,
                                                pre + ".cross")[0]
            tokens = tokens + self._mlp(tokens[None], pre + ".mlp")[0]
            if dump_tokens:
                dumps.append(tokens.copy())
            if l in sel:
                params, cam = self._heads(tokens)
                kp2d, joints = self.predict_kp2d(params, cam, counters,
                                                 fk_kernel)
                _bump(counters, "intermediate")
                centered = joints - joints[0]
                p2d = nk.matmul(kp2d, w["body.phi2d.w"]) + w["body.phi2d.b"]
                p3d = nk.matmul(np.ascontiguousarray(centered),
                                w["body.phi3d.w"]) + w["body.phi3d.b"]
                intermediates.append(IntermediatePrediction(
                    layer=l, params=params, camera=cam, kp2d=kp2d))
        params, cam = self._heads(tokens)
        return params, cam, intermediates, dumps

    def decode_body(self, feat, prompt, selection=(), refine=False,
                    counters=None, dump_tokens=False, fk_kernel=True):
        """Decode body parameters from one crop's features.

        selection: iterable of layer indices running the intermediate
        prediction; others reuse cached positional encodings.  refine runs a
        complete second pass whose prompt tokens additionally carry the first
        pass's projected keypoints.
        """
        cfg = self.config
        feat = np.ascontiguousarray(feat, dtype=DTYPE)
        n = (cfg.crop_size // cfg.patch) ** 2
        if feat.shape != (n, cfg.dim):
            raise ShapeError("feat must be (%d, %d), got %r"
                             % (n, cfg.dim, feat.shape))
        prompt = np.ascontiguousarray(prompt, dtype=DTYPE).reshape(PROMPT_DIM)
        sel = frozenset(int(l) for l in selection)
        if any(l < 0 or l >= cfg.body_layers for l in sel):
            raise UsageError("selection out of range: %r" % (sorted(sel),))
        params, cam, inter, dumps = self._body_pass(
            feat, prompt, None, sel, counters, dump_tokens, fk_kernel)
        if refine:
            w = self.weights
            kp2d, _ = self.predict_kp2d(params, cam, counters, fk_kernel)
            extra = (nk.matmul(kp2d.reshape(1, 2 * bm.NUM_JOINTS),
                               w["body.prompt_kp.w"])
                     + w["body.prompt_kp.b"]).reshape(4, cfg.dim)
            params, cam, inter2, dumps2 = self._body_pass(
                feat, prompt, extra, sel, counters, dump_tokens, fk_kernel)
            inter = inter + inter2
            dumps = dumps + dumps2
        return BodyDecodeOut(params=params, camera=cam, intermediates=inter,
                             layer_tokens=dumps)

    # -- hand decoder ----------------------------------------------------------

    def decode_hand(self, feats, selection=(), counters=None):
        """Decode per-hand rotations from a batch of hand-crop features.

        (B, n, D) -> (B, 3).  A batched call is bit-identical to B sequential
        single-feature calls.
        """
        cfg = self.config
        feats = np.ascontiguousarray(feats, dtype=DTYPE)
        n = (cfg.crop_size // cfg.patch) ** 2
        if feats.ndim != 3 or feats.shape[1:] != (n, cfg.dim):
            raise ShapeError("hand feats must be (B, %d, %d), got %r"
                             % (n, cfg.dim, feats.shape))
        bsz = feats.shape[0]
        if bsz == 0:
            return np.zeros((0, 3), dtype=DTYPE)
        sel = frozenset(int(l) for l in selection)
        if any(l < 0 or l >= cfg.hand_layers for l in sel):
            raise UsageError("hand selection out of range: %r" % (sorted(sel),))
        w = self.weights
        tokens = np.repeat(w["hand.token_init"][None], bsz, axis=0)
        p_pts = np.repeat(w["hand.p_init"][None], bsz, axis=0)

        def heads(tok3):
            tn = self._ln(np.ascontiguousarray(
                tok3.reshape(bsz * HAND_TOKENS, cfg.dim)), "hand.norm")
            tn = tn.reshape(bsz, HAND_TOKENS, cfg.dim)
            head_in = np.ascontiguousarray(tn[:, 0])
            rots = nk.matmul(head_in, w["hand.head_rot.w"]) + w["hand.head_rot.b"]
            cams = nk.matmul(head_in, w["hand.head_cam.w"]) + w["hand.head_cam.b"]
            return rots, cams

        for l in range(cfg.hand_layers):
            pre = "hand.l%d" % l
            a_in = tokens.copy()
            a_in[:, 1:4] = a_in[:, 1:4] + p_pts
            tokens = tokens + self._self_block(a_in, pre + ".self")
            tokens = tokens + self._cross_block(tokens, feats, pre + ".cross")
            tokens = tokens + self._mlp(tokens, pre + ".mlp")
            if l in sel:
                rots, cams = heads(tokens)
                rotm = bm.rodrigues(rots)  # (B, 3, 3)
                _bump(counters, "fk", bsz)
                canon = w["hand.canon_pts"]
                pts = (rotm[:, None, :, :] * canon[None, :, None, :]).sum(axis=-1)
                pts2d = cams[:, 0:1, None] * pts[:, :, :2] + cams[:, None, 1:3]
                _bump(counters, "project", bsz)
                p_pts = (nk.matmul(
                    np.ascontiguousarray(pts2d.reshape(bsz * 3, 2)),
                    w["hand.phi2d.w"]) + w["hand.phi2d.b"]).reshape(bsz, 3, cfg.dim)
        rots, _ = heads(tokens)
        return rots

    # -- merge -----------------------------------------------------------------

    def merge(self, body_params, left=None, right=None):
        """Overwrite the wrist-child pose slots with hand-decoder outputs;
        every other field passes through untouched."""
        out = np.array(body_params, dtype=DTYPE, copy=True).reshape(bm.PARAM_DIM)
        if left is not None:
            out[LEFT_HAND_VEC] = np.asarray(left, dtype=DTYPE).reshape(3)
        if right is not None:
            out[RIGHT_HAND_VEC] = np.asarray(right, dtype=DTYPE).reshape(3)
        return out


# ---------------------------------------------------------------------------
# serialization: FSB1 arrays plus a json manifest


def save_decoder(decoder, dirpath):
    os.makedirs(dirpath, exist_ok=True)
    names = sorted(decoder.weights)
    manifest = {
        "config": asdict(decoder.config),
        "seed": decoder.seed,
        "arrays": {name: name.replace(".", "__") + ".fsb1" for name in names},
    }
    for name, fname in manifest["arrays"].items():
        nk.write_fsb1(os.path.join(dirpath, fname), decoder.weights[name])
    with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_decoder(dirpath, template):
    with open(os.path.join(dirpath, "manifest.json")) as fh:
        manifest = json.load(fh)
    decoder = Decoder(template, DecoderConfig(**manifest["config"]),
                      seed=manifest["seed"])
    if set(manifest["arrays"]) != set(decoder.weights):
        raise UsageError("weight manifest does not match decoder layout")
    for name, fname in manifest["arrays"].items():
        arr = nk.read_fsb1(os.path.join(dirpath, fname))
        decoder.weights[name] = arr.reshape(decoder.weights[name].shape)
    return decoder
