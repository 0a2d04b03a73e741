"""Kernel-level tests: every kernel is checked against an independent oracle
written directly in this file (naive loops / direct formulas), plus the
finite-difference contract for the gradient tape.
"""

import struct

import numpy as np
import pytest

import fsb.numkit as nk
from fdcheck import FD_STEP, central_diff_grad, assert_grad_close


# ---------------------------------------------------------------------------
# oracles


def triple_loop_matmul(a, b):
    """Reference matmul: explicit left-to-right accumulation per element."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for kk in range(k):
                acc = np.float32(acc + np.float32(a[i, kk] * b[kk, j]))
            out[i, j] = acc
    return out


def scalar_bilinear(image, x, y):
    """Reference bilinear lookup for one (x, y) sample, edge-clamped."""
    h, w = image.shape[:2]
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fx = np.float32(x - x0)
    fy = np.float32(y - y0)
    top = image[y0, x0] * (np.float32(1.0) - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (np.float32(1.0) - fx) + image[y1, x1] * fx
    return top * (np.float32(1.0) - fy) + bot * fy


def dense_attention(x, w, context=None):
    """Direct attention formula in float64, no batching tricks."""
    c = x if context is None else context
    q = x.astype(np.float64) @ w.wq.astype(np.float64) + w.bq
    k = c.astype(np.float64) @ w.wk.astype(np.float64) + w.bk
    v = c.astype(np.float64) @ w.wv.astype(np.float64) + w.bv
    dh = x.shape[1] // w.heads
    outs = []
    for h in range(w.heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        att = e / e.sum(axis=-1, keepdims=True)
        outs.append(att @ v[:, sl])
    o = np.concatenate(outs, axis=1) @ w.wo.astype(np.float64) + w.bo
    pre = x.astype(np.float64) + o
    mu = pre.mean(axis=-1, keepdims=True)
    var = ((pre - mu) ** 2).mean(axis=-1, keepdims=True)
    return (pre - mu) / np.sqrt(var + 1e-5) * w.ln_gamma + w.ln_beta


def bits(a):
    return np.ascontiguousarray(a).view(np.uint32)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_matches_triple_loop_bitwise():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((8, 8), dtype=np.float32)
    b = rng.standard_normal((8, 8), dtype=np.float32)
    assert np.array_equal(bits(nk.matmul(a, b)), bits(triple_loop_matmul(a, b)))


def test_matmul_matches_triple_loop_random_shapes():
    rng = np.random.default_rng(11)
    for _ in range(10):
        m, k, n = rng.integers(1, 24, size=3)
        a = rng.standard_normal((m, k), dtype=np.float32)
        b = rng.standard_normal((k, n), dtype=np.float32)
        assert np.array_equal(bits(nk.matmul(a, b)), bits(triple_loop_matmul(a, b)))


def test_matmul_identity():
    rng = np.random.default_rng(3)
    m = rng.standard_normal((3, 3), dtype=np.float32)
    assert np.array_equal(nk.matmul(np.eye(3, dtype=np.float32), m), m)


def test_matmul_rows_independent_of_batch():
    # the same rows give the same bits whether or not extra rows are stacked
    # below them; batched encoding relies on this
    rng = np.random.default_rng(5)
    a = rng.standard_normal((6, 40), dtype=np.float32)
    extra = rng.standard_normal((10, 40), dtype=np.float32)
    b = rng.standard_normal((40, 12), dtype=np.float32)
    lone = nk.matmul(a, b)
    stacked = nk.matmul(np.concatenate([a, extra]), b)[:6]
    assert np.array_equal(bits(lone), bits(stacked))


def test_matmul_deterministic_and_f32():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((17, 33), dtype=np.float32)
    b = rng.standard_normal((33, 5), dtype=np.float32)
    c1, c2 = nk.matmul(a, b), nk.matmul(a, b)
    assert c1.dtype == np.float32
    assert np.array_equal(bits(c1), bits(c2))


def test_matmul_out_buffer_reuse():
    rng = np.random.default_rng(13)
    a = rng.standard_normal((4, 6), dtype=np.float32)
    b = rng.standard_normal((6, 3), dtype=np.float32)
    out = np.empty((4, 3), dtype=np.float32)
    res = nk.matmul(a, b, out=out)
    assert res is out
    assert np.array_equal(bits(out), bits(nk.matmul(a, b)))


def test_matmul_shape_error():
    a = np.zeros((2, 3), dtype=np.float32)
    b = np.zeros((4, 2), dtype=np.float32)
    with pytest.raises(nk.ShapeError):
        nk.matmul(a, b)


def test_matmul_rejects_nonfinite():
    a = np.full((2, 2), np.nan, dtype=np.float32)
    b = np.eye(2, dtype=np.float32)
    with pytest.raises(nk.NumericError):
        nk.matmul(a, b)


# ---------------------------------------------------------------------------
# bilinear_sample


def test_bilinear_matches_scalar_oracle():
    rng = np.random.default_rng(21)
    image = rng.standard_normal((12, 9, 3), dtype=np.float32)
    grid = np.stack(
        [
            rng.uniform(0, 8, size=(5, 7)).astype(np.float32),
            rng.uniform(0, 11, size=(5, 7)).astype(np.float32),
        ],
        axis=-1,
    )
    out = nk.bilinear_sample(image, grid)
    for i in range(5):
        for j in range(7):
            ref = scalar_bilinear(image, float(grid[i, j, 0]), float(grid[i, j, 1]))
            assert np.max(np.abs(out[i, j] - ref)) <= 1e-6


def test_bilinear_lattice_is_exact_gather():
    rng = np.random.default_rng(22)
    image = rng.standard_normal((8, 8, 2), dtype=np.float32)
    xs, ys = np.meshgrid(np.arange(8, dtype=np.float32), np.arange(8, dtype=np.float32))
    grid = np.stack([xs, ys], axis=-1)
    out = nk.bilinear_sample(image, grid)
    assert np.array_equal(bits(out), bits(image))


def test_bilinear_clamps_to_edge():
    rng = np.random.default_rng(23)
    image = rng.standard_normal((6, 5, 1), dtype=np.float32)
    grid = np.array([[[-3.0, 2.0], [10.0, 2.0], [2.0, -4.0], [2.0, 99.0]]], dtype=np.float32)
    out = nk.bilinear_sample(image, grid)[0]
    assert np.array_equal(out[0], image[2, 0])
    assert np.array_equal(out[1], image[2, 4])
    assert np.array_equal(out[2], image[0, 2])
    assert np.array_equal(out[3], image[5, 2])


def test_bilinear_empty_grid_is_shape_error():
    image = np.zeros((4, 4, 1), dtype=np.float32)
    with pytest.raises(nk.ShapeError):
        nk.bilinear_sample(image, np.zeros((0, 0, 2), dtype=np.float32))


# ---------------------------------------------------------------------------
# attention_block


def test_attention_matches_direct_formula():
    rng = np.random.default_rng(31)
    for heads in (1, 4):
        w = nk.init_attention_weights(rng, dim=16, heads=heads, scale=0.3)
        x = rng.standard_normal((6, 16), dtype=np.float32)
        out = nk.attention_block(x, w)
        ref = dense_attention(x, w)
        assert np.max(np.abs(out.astype(np.float64) - ref)) <= 1e-5


def test_attention_cross_matches_direct_formula():
    rng = np.random.default_rng(37)
    w = nk.init_attention_weights(rng, dim=8, heads=2, scale=0.3)
    x = rng.standard_normal((4, 8), dtype=np.float32)
    ctx = rng.standard_normal((9, 8), dtype=np.float32)
    out = nk.attention_block(x, w, context=ctx)
    ref = dense_attention(x, w, context=ctx)
    assert np.max(np.abs(out.astype(np.float64) - ref)) <= 1e-5


def test_attention_zero_weights_degenerates_to_layer_norm():
    rng = np.random.default_rng(41)
    w = nk.init_attention_weights(rng, dim=8, heads=2, scale=0.0)
    x = rng.standard_normal((5, 8), dtype=np.float32)
    out = nk.attention_block(x, w)
    ref = nk.layer_norm(x, w.ln_gamma, w.ln_beta)
    assert np.array_equal(bits(out), bits(ref))


def test_attention_nonfinite_raises_numeric_error():
    rng = np.random.default_rng(43)
    w = nk.init_attention_weights(rng, dim=8, heads=2, scale=0.3)
    x = rng.standard_normal((5, 8), dtype=np.float32)
    x[2, 3] = np.nan
    with pytest.raises(nk.NumericError):
        nk.attention_block(x, w)


def test_attention_deterministic():
    rng = np.random.default_rng(47)
    w = nk.init_attention_weights(rng, dim=16, heads=4, scale=0.3)
    x = rng.standard_normal((10, 16), dtype=np.float32)
    assert np.array_equal(bits(nk.attention_block(x, w)), bits(nk.attention_block(x, w)))


# ---------------------------------------------------------------------------
# FSB1 serialization


def test_fsb1_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(51)
    arr = rng.standard_normal((3, 4, 5), dtype=np.float32)
    path = tmp_path / "a.fsb1"
    nk.write_fsb1(path, arr)
    back = nk.read_fsb1(path)
    assert back.shape == arr.shape
    assert np.array_equal(bits(back), bits(arr))


def test_fsb1_exact_layout(tmp_path):
    arr = np.array([[1.5, -2.0, 0.25]], dtype=np.float32)
    path = tmp_path / "b.fsb1"
    nk.write_fsb1(path, arr)
    raw = path.read_bytes()
    expect = b"FSB1" + struct.pack("<I", 2) + struct.pack("<II", 1, 3)
    expect += np.array([1.5, -2.0, 0.25], dtype="<f4").tobytes()
    assert raw == expect


def test_fsb1_bad_magic(tmp_path):
    path = tmp_path / "c.fsb1"
    path.write_bytes(b"JUNK" + b"\x00" * 16)
    with pytest.raises(nk.UsageError):
        nk.read_fsb1(path)


def test_fsb1_truncated_payload(tmp_path):
    arr = np.ones((4, 4), dtype=np.float32)
    path = tmp_path / "d.fsb1"
    nk.write_fsb1(path, arr)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(nk.UsageError):
        nk.read_fsb1(path)


# ---------------------------------------------------------------------------
# gradient tape: finite-difference contract, 20 seeds per op


def _scalarize(rng, y):
    # project an output tensor to a scalar with fixed random weights so the
    # finite-difference probe has a single objective
    w = rng.standard_normal(y.value.shape if isinstance(y, nk.Var) else y.shape)
    w = w.astype(np.float32)
    return (y * w).sum(), w


def _fd_vs_tape(build, x0, seeds=20, label=""):
    """build(tape_or_none, x) -> scalar Var (tape mode) or float (np mode)."""
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        x = x0(rng)
        tape = nk.Tape()
        xv = tape.var(x)
        loss = build(rng, xv)
        g = tape.grad(loss)[xv]
        fd = central_diff_grad(lambda xx: float(build(rng, xx)), x, step=FD_STEP)
        assert_grad_close(g, fd, label=f"{label} seed {seed}")


def test_grad_elementwise_chain():
    def build(rng, x):
        rng = np.random.default_rng(77)
        y = nk.sin(x) * nk.cos(x * np.float32(0.5)) + nk.exp(x * np.float32(-0.3))
        y = y / (nk.sqrt(nk.relu(x) + np.float32(1.0)))
        s, _ = _scalarize(rng, y)
        return s

    _fd_vs_tape(build, lambda rng: rng.uniform(0.2, 1.5, size=(3, 4)).astype(np.float32), label="elementwise")


def test_grad_matmul():
    b_fixed = {}

    def build(rng, x):
        rng2 = np.random.default_rng(88)
        b = rng2.standard_normal((4, 3), dtype=np.float32)
        y = nk.matmul(x, b)
        s, _ = _scalarize(np.random.default_rng(89), y)
        return s

    _fd_vs_tape(build, lambda rng: rng.standard_normal((2, 4)).astype(np.float32), label="matmul")


def test_grad_matmul_both_sides():
    for seed in range(20):
        rng = np.random.default_rng(300 + seed)
        a0 = rng.standard_normal((3, 5)).astype(np.float32)
        b0 = rng.standard_normal((5, 2)).astype(np.float32)
        w = rng.standard_normal((3, 2)).astype(np.float32)

        tape = nk.Tape()
        av, bv = tape.var(a0), tape.var(b0)
        loss = (nk.matmul(av, bv) * w).sum()
        grads = tape.grad(loss)

        fd_a = central_diff_grad(lambda a: float((nk.matmul(a, b0) * w).sum()), a0)
        fd_b = central_diff_grad(lambda b: float((nk.matmul(a0, b) * w).sum()), b0)
        assert_grad_close(grads[av], fd_a, label=f"matmul dA seed {seed}")
        assert_grad_close(grads[bv], fd_b, label=f"matmul dB seed {seed}")


def test_grad_reductions_and_shapes():
    def build(rng, x):
        y = x.reshape((6, 2)).sum(axis=0) * np.float32(2.0)
        z = x.mean() + y.sum() + x.transpose((1, 0)).sum(axis=1).mean()
        return z

    _fd_vs_tape(build, lambda rng: rng.standard_normal((3, 4)).astype(np.float32), label="reductions")


def test_grad_getitem_scatter_accumulates():
    idx = np.array([0, 2, 2, 1, 0], dtype=np.int64)

    def build(rng, x):
        y = x[idx]  # duplicate rows: backward must accumulate
        return (y * np.float32(1.5)).sum() + (x[1:, :2]).sum()

    _fd_vs_tape(build, lambda rng: rng.standard_normal((4, 3)).astype(np.float32), label="getitem")


def test_grad_concat_stack_where():
    mask = np.array([[True, False, True], [False, True, False]])

    def build(rng, x):
        a = x * np.float32(2.0)
        b = nk.concat([a, x], axis=0)
        c = nk.stack([x, a], axis=0).sum(axis=0)
        d = nk.where(mask, c, x * np.float32(-1.0))
        return b.sum() + d.sum()

    _fd_vs_tape(build, lambda rng: rng.standard_normal((2, 3)).astype(np.float32), label="concat/stack/where")


def test_grad_bilinear_sample_image_and_grid():
    for seed in range(20):
        rng = np.random.default_rng(500 + seed)
        image = rng.standard_normal((6, 7, 2)).astype(np.float32)
        # keep fractional parts away from the lattice so FD stays one-sided
        base = rng.integers(0, 5, size=(3, 3, 2)).astype(np.float32)
        frac = rng.uniform(0.25, 0.75, size=(3, 3, 2)).astype(np.float32)
        grid = base + frac
        w = rng.standard_normal((3, 3, 2)).astype(np.float32)

        tape = nk.Tape()
        iv, gv = tape.var(image), tape.var(grid)
        loss = (nk.bilinear_sample(iv, gv) * w).sum()
        grads = tape.grad(loss)

        fd_i = central_diff_grad(lambda im: float((nk.bilinear_sample(im, grid) * w).sum()), image)
        fd_g = central_diff_grad(lambda g: float((nk.bilinear_sample(image, g) * w).sum()), grid)
        assert_grad_close(grads[iv], fd_i, label=f"bilinear dimage seed {seed}")
        assert_grad_close(grads[gv], fd_g, label=f"bilinear dgrid seed {seed}")


def test_grad_attention_block():
    rng0 = np.random.default_rng(620)
    w = nk.init_attention_weights(rng0, dim=8, heads=2, scale=0.3)

    for seed in range(20):
        rng = np.random.default_rng(600 + seed)
        x0 = rng.standard_normal((4, 8)).astype(np.float32)
        proj = rng.standard_normal((4, 8)).astype(np.float32)

        tape = nk.Tape()
        xv = tape.var(x0)
        loss = (nk.attention_block(xv, w) * proj).sum()
        g = tape.grad(loss)[xv]
        fd = central_diff_grad(lambda x: float((nk.attention_block(x, w) * proj).sum()), x0)
        assert_grad_close(g, fd, label=f"attention seed {seed}")


def test_grad_unused_input_is_zero():
    tape = nk.Tape()
    x = tape.var(np.ones((2, 2), dtype=np.float32))
    y = tape.var(np.ones(3, dtype=np.float32))
    loss = (x * x).sum()
    grads = tape.grad(loss)
    assert np.array_equal(grads[y], np.zeros(3, dtype=np.float32))


def test_grad_shared_subexpression_accumulates():
    tape = nk.Tape()
    x = tape.var(np.array([3.0], dtype=np.float32))
    y = x * x
    loss = (y + y).sum()
    g = tape.grad(loss)[x]
    assert np.allclose(g, 12.0)


def test_grad_foreign_handle_is_usage_error():
    t1, t2 = nk.Tape(), nk.Tape()
    x1 = t1.var(np.ones(2, dtype=np.float32))
    x2 = t2.var(np.ones(2, dtype=np.float32))
    loss = (x1 * np.float32(2.0)).sum()
    with pytest.raises(nk.UsageError):
        t1.grad(loss, wrt=[x2])
    with pytest.raises(nk.UsageError):
        x1 + x2  # mixing tapes inside an op is a usage error too


def test_grad_nonscalar_loss_rejected():
    tape = nk.Tape()
    x = tape.var(np.ones((2, 2), dtype=np.float32))
    with pytest.raises(nk.UsageError):
        tape.grad(x * np.float32(1.0))
