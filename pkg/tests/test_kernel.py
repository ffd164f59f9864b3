import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relkl.checks import central_difference, rel_err
from relkl.dense import dense_relation_kl
from relkl.errors import ShapeError
from relkl.kernel import TileConfig, fit_linear, kernel_backward, kernel_forward, kernel_lse, measure_memory
from relkl.tensor import MaskSpec, dense_row_supplier, matmul_scaled, row_logsumexp

from conftest import random_mask

TILES = [(1, 1), (7, 13), (64, 64)]


def fixture(rng, n, d, scale=1.0):
    return [rng.standard_normal((n, d)) * scale for _ in range(4)]


def test_lse_single_entry():
    x = np.array([[1.0, 2.0, 2.0]])
    lse = kernel_lse(x, x, MaskSpec(1)).lse
    assert lse[0] == pytest.approx(9 / math.sqrt(3), rel=1e-15)


def test_lse_all_equal_logits():
    # Every logit equals c = 2 over the m visible keys of row m-1.
    X = np.full((6, 4), 1.0)
    lse = kernel_lse(X, X, MaskSpec(6), TileConfig(4, 4)).lse
    np.testing.assert_allclose(lse, [2.0 + math.log(m) for m in range(1, 7)], rtol=1e-15)


@pytest.mark.parametrize("causal", [True, False])
def test_lse_tile_invariance_and_reference(rng, causal):
    X, Y = rng.standard_normal((64, 8)), rng.standard_normal((64, 8))
    mask = MaskSpec(64, causal=causal, valid=rng.random(64) > 0.2)
    a = kernel_lse(X, Y, mask, TileConfig(16, 16)).lse
    b = kernel_lse(X, Y, mask, TileConfig(64, 64)).lse
    ref = row_logsumexp(dense_row_supplier(matmul_scaled(X, Y), mask, 64), mask).lse
    v = mask.valid
    np.testing.assert_allclose(a[v], b[v], rtol=1e-12)
    np.testing.assert_allclose(a[v], ref[v], rtol=1e-12)
    assert np.all(np.isnan(a[~v]))


def test_lse_stays_double_for_single_inputs(rng):
    X = rng.standard_normal((32, 8)).astype(np.float32)
    assert kernel_lse(X, X, MaskSpec(32)).lse.dtype == np.float64


def test_teacher_equals_student(rng):
    X, Y = rng.standard_normal((128, 16)), rng.standard_normal((128, 16))
    loss, _ = kernel_forward(X, Y, X, Y, MaskSpec(128))
    assert abs(loss) <= 1e-12
    res = kernel_backward(X, Y, X, Y, MaskSpec(128))
    assert np.abs(res.dX).max() <= 1e-12 and np.abs(res.dY).max() <= 1e-12


def test_forward_matches_oracle(rng):
    args = fixture(rng, 256, 16)
    loss, _ = kernel_forward(*args, MaskSpec(256))
    ref = dense_relation_kl(*args, MaskSpec(256)).loss
    assert abs(loss - ref) / abs(ref) <= 1e-12


def test_backward_matches_oracle_and_differences(rng):
    args = fixture(rng, 64, 8)
    mask = MaskSpec(64)
    res = kernel_backward(*args, mask, TileConfig(16, 16))
    ref = dense_relation_kl(*args, mask)
    for g, r in ((res.dX, ref.dX), (res.dY, ref.dY)):
        assert np.mean(np.abs(g - r)) / np.mean(np.abs(r)) <= 1e-12
    Xt, Yt, Xs, Ys = args
    fd = central_difference(lambda x: kernel_forward(Xt, Yt, x, Ys, mask)[0], Xs, entries=[(i, j) for i in range(0, 64, 9) for j in range(8)])
    analytic = np.array([res.dX[i, j] for i in range(0, 64, 9) for j in range(8)])
    assert rel_err(analytic, fd) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 8), st.sampled_from(["causal", "padded", "holes", "full"]),
       st.sampled_from(TILES + [(3, 5), (40, 1)]), st.integers(0, 2**32 - 1))
def test_exactness_property(n, d, kind, tile, seed):
    rng = np.random.default_rng(seed)
    mask = random_mask(kind, n, rng)
    args = fixture(rng, n, d, scale=2.0)
    res = kernel_backward(*args, mask, TileConfig(*tile))
    ref = dense_relation_kl(*args, mask)
    assert rel_err(res.loss, ref.loss) <= 1e-11
    assert rel_err(res.dX, ref.dX) <= 1e-11
    assert rel_err(res.dY, ref.dY) <= 1e-11
    # Zero-sum rows of dZ make the columns of dY = scale * dZ.T @ Xs sum to zero.
    assert np.abs(res.dY.sum(axis=0)).max() <= 1e-10 * max(1.0, np.abs(res.dY).max())
    assert not res.dX[~mask.valid].any() and not res.dY[~mask.valid].any()


def test_tile_invariance(rng):
    n = 50
    mask = MaskSpec.padded(n, 41)
    args = fixture(rng, n, 8)
    results = [kernel_backward(*args, mask, TileConfig(*t)) for t in TILES + [(n, n)]]
    base = results[-1]
    for r in results[:-1]:
        assert rel_err(r.loss, base.loss) <= 1e-11
        assert rel_err(r.dX, base.dX) <= 1e-11
        assert rel_err(r.dY, base.dY) <= 1e-11


@pytest.mark.parametrize("precision", ["double", "single"])
def test_deterministic_bit_identical(rng, precision):
    args = fixture(rng, 200, 8)
    mask = MaskSpec.padded(200, 180)
    cfg = TileConfig(16, 16, deterministic=True)
    runs = [kernel_backward(*args, mask, cfg, threads=t, precision=precision) for t in (1, 1, 4, 3)]
    for r in runs[1:]:
        assert r.loss == runs[0].loss
        assert r.dX.tobytes() == runs[0].dX.tobytes()
        assert r.dY.tobytes() == runs[0].dY.tobytes()


def test_nondeterministic_mode_still_exact(rng):
    args = fixture(rng, 100, 8)
    mask = MaskSpec(100)
    ref = dense_relation_kl(*args, mask)
    res = kernel_backward(*args, mask, TileConfig(8, 8, deterministic=False), threads=4)
    assert rel_err(res.dY, ref.dY) <= 1e-11


def test_masked_entry_safety(rng):
    n, d = 24, 4
    mask = MaskSpec(n, causal=True, valid=rng.random(n) > 0.3)
    args = fixture(rng, n, d)
    base = kernel_backward(*args, mask, TileConfig(5, 7))
    poked = [a.copy() for a in args]
    for a in poked:
        a[~mask.valid] = rng.standard_normal((int((~mask.valid).sum()), d)) * 100
    res = kernel_backward(*poked, mask, TileConfig(5, 7))
    assert res.loss == base.loss
    np.testing.assert_array_equal(res.dX[mask.valid], base.dX[mask.valid])
    np.testing.assert_array_equal(res.dY[mask.valid], base.dY[mask.valid])


def test_output_precision(rng):
    args = [a.astype(np.float32) for a in fixture(rng, 32, 4)]
    res = kernel_backward(*args, MaskSpec(32))
    assert res.dX.dtype == np.float32 and res.dY.dtype == np.float32
    assert isinstance(res.loss, float)


def test_single_precision_at_length_4096():
    rng = np.random.default_rng(3)
    n, d = 4096, 64
    args = fixture(rng, n, d)
    mask = MaskSpec(n)
    res = kernel_backward(*(a.astype(np.float32) for a in args), mask)
    ref = dense_relation_kl(*args, mask)
    assert abs(res.loss - ref.loss) / abs(ref.loss) <= 1e-5
    for g, r in ((res.dX, ref.dX), (res.dY, ref.dY)):
        dev = np.abs(g.astype(np.float64) - r)
        scale = np.mean(np.abs(r))
        assert dev.mean() / scale <= 1e-5
        assert dev.max() / scale <= 1e-3


def test_no_quadratic_buffer(rng):
    n, d = 300, 8
    res = kernel_backward(*fixture(rng, n, d), MaskSpec(n), TileConfig(32, 32), threads=2)
    assert res.ledger.largest() < n * n
    assert res.ledger.current == 3 * n + 2 * n * d - n  # lse_s, lse_t, dX, dY remain live


@pytest.mark.parametrize("threads", [1, 4])
@pytest.mark.parametrize("tr, tc", [(16, 16), (64, 32)])
def test_memory_bound_constants(rng, threads, tr, tc):
    # peak <= C1 n d + C2 n + C3 tr tc with constants fixed before looking at n.
    d = 8
    cfg = TileConfig(tr, tc)
    workers = max(threads, 1)
    C1, C2, C3 = 2 + cfg.partitions, 2, 7 * workers
    for n in (64, 128, 512, 1024):
        peak = kernel_backward(*fixture(rng, n, d), MaskSpec(n), cfg, threads=threads).ledger.peak_aux_elements
        extra = workers * (2 * (tr + tc) * d + tr * d + 2 * tr + (tr + tc) * d)
        assert peak <= C1 * n * d + C2 * n + C3 * tr * tc + extra


def test_memory_doubling_ratios():
    rows = measure_memory([1024, 2048, 4096], 64, TileConfig())
    k = [r.kernel_peak for r in rows]
    dn = [r.dense_peak for r in rows]
    assert 1.8 <= k[2] / k[1] <= 2.2
    assert 3.6 <= dn[2] / dn[1] <= 4.4
    assert fit_linear([r.n for r in rows], k)[2] >= 0.99


def test_measure_memory_skips_dense_above_cap():
    rows = measure_memory([8, 16], 4, TileConfig(4, 4), dense_cap=8)
    assert rows[0].dense_peak is not None and rows[1].dense_peak is None


def test_measure_memory_errors():
    with pytest.raises(ShapeError):
        measure_memory([0], 4)
    with pytest.raises(ValueError):
        measure_memory([16, 8], 4)


def test_fit_linear_exact_line():
    slope, intercept, r2 = fit_linear([1, 2, 3, 4], [5, 7, 9, 11])
    assert slope == pytest.approx(2) and intercept == pytest.approx(3) and r2 == pytest.approx(1)


def test_shape_errors(rng):
    X = rng.standard_normal((4, 2))
    with pytest.raises(ShapeError):
        kernel_backward(X, X, X, X[:3], MaskSpec(4))
    with pytest.raises(ShapeError):
        kernel_backward(X, X, X, X, MaskSpec(5))
    with pytest.raises(ShapeError):
        kernel_backward(*(np.zeros((0, 2)),) * 4, MaskSpec(1))
    with pytest.raises(ShapeError):
        TileConfig(0, 4)


def test_tracemalloc_grows_linearly():
    import tracemalloc

    def peak_bytes(n):
        rng = np.random.default_rng(0)
        args = fixture(rng, n, 8)
        tracemalloc.start()
        tracemalloc.reset_peak()
        kernel_backward(*args, MaskSpec(n), TileConfig(32, 32))
        peak = tracemalloc.get_traced_memory()[1]
        tracemalloc.stop()
        return peak

    small, big = peak_bytes(2048), peak_bytes(4096)
    assert big / small < 3.0
