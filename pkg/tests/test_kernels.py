"""The jit and numpy flavours of every kernel must agree; both must match simple oracles."""
import itertools
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mslrkit import kernels
from mslrkit._accel import backend_name


def random_logp(rng, T, V):
    z = rng.normal(size=(T, V))
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def brute_force_ctc(logp, labels):
    T, V = logp.shape
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        out, prev = [], None
        for c in path:
            if c != prev and c != 0:
                out.append(c)
            prev = c
        if out == list(labels):
            total += np.exp(sum(logp[t, c] for t, c in enumerate(path)))
    return total


def test_backend_name_is_known():
    assert backend_name() in ("numba", "numpy")


def test_extend_labels():
    assert kernels.extend_labels([3, 5]).tolist() == [0, 3, 0, 5, 0]
    assert kernels.extend_labels([]).tolist() == [0]


@pytest.mark.parametrize("seed", range(20))
def test_ctc_flavours_agree(seed):
    rng = np.random.default_rng(seed)
    T, V = int(rng.integers(3, 12)), int(rng.integers(2, 6))
    labels = rng.integers(1, V, size=int(rng.integers(0, 3)))
    logp = random_logp(rng, T, V)
    ext = kernels.extend_labels(labels)
    l1, g1 = kernels.ctc_forward_backward_nb(logp, ext, 0)
    l2, g2 = kernels.ctc_forward_backward_np(logp, ext, 0)
    assert l1 == pytest.approx(l2, rel=1e-12, abs=1e-12)
    np.testing.assert_allclose(g1, g2, atol=1e-12)


@pytest.mark.parametrize("seed", range(15))
def test_ctc_matches_path_enumeration(seed):
    rng = np.random.default_rng(100 + seed)
    T, V = int(rng.integers(1, 5)), int(rng.integers(2, 4))
    labels = rng.integers(1, V, size=int(rng.integers(0, 3)))
    logp = random_logp(rng, T, V)
    p = brute_force_ctc(logp, labels)
    loss, _ = kernels.ctc_forward_backward(logp, labels)
    if p == 0:
        assert loss == np.inf
    else:
        assert loss == pytest.approx(-np.log(p), abs=1e-10)


def test_ctc_gradient_is_minus_occupancy():
    rng = np.random.default_rng(5)
    logp = random_logp(rng, 6, 4)
    _, g = kernels.ctc_forward_backward(logp, [1, 2])
    # occupancies sum to one per frame
    np.testing.assert_allclose(-g.sum(axis=1), np.ones(6), atol=1e-12)
    assert np.all(g <= 1e-15)


@lru_cache(maxsize=None)
def rec_edit(a, b):
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(rec_edit(a[1:], b) + 1, rec_edit(a, b[1:]) + 1, rec_edit(a[1:], b[1:]) + (a[0] != b[0]))


@given(st.lists(st.integers(0, 4), max_size=8), st.lists(st.integers(0, 4), max_size=8))
def test_edit_table_matches_recursion(a, b):
    ra, rb = np.array(a, dtype=np.int64), np.array(b, dtype=np.int64)
    d_nb = kernels.edit_table_nb(ra, rb)
    d_np = kernels.edit_table_np(ra, rb)
    np.testing.assert_array_equal(d_nb, d_np)
    assert d_nb[-1, -1] == rec_edit(tuple(a), tuple(b))


@given(
    st.integers(1, 9),
    st.integers(1, 2100),
    st.integers(1, 7),
    st.integers(0, 2**31 - 1),
)
def test_gemm_s8_exact(M, K, N, seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(-128, 128, size=(M, K)).astype(np.int8)
    b = rng.integers(-128, 128, size=(K, N)).astype(np.int8)
    want = a.astype(np.int64) @ b.astype(np.int64)
    np.testing.assert_array_equal(kernels.gemm_s8(a, b), want)
    np.testing.assert_array_equal(kernels.gemm_s8_nb(a, b), want)


def test_gemm_s8_extreme_values_stay_exact():
    a = np.full((3, 5000), -128, dtype=np.int8)
    b = np.full((5000, 2), -128, dtype=np.int8)
    assert kernels.gemm_s8(a, b)[0, 0] == 5000 * 128 * 128


def test_gemm_s8_shape_mismatch():
    with pytest.raises(ValueError):
        kernels.gemm_s8(np.zeros((2, 3), np.int8), np.zeros((4, 2), np.int8))


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
def test_lstm_flavours_agree(dtype, tol):
    rng = np.random.default_rng(3)
    xw = (rng.normal(size=(25, 32)) * 4).astype(dtype)
    w = rng.normal(size=(8, 32)).astype(dtype)
    for a, b in zip(kernels.lstm_forward_nb(xw, w), kernels.lstm_forward_np(xw, w)):
        assert a.dtype == dtype
        np.testing.assert_allclose(a, b, atol=tol)


def test_lstm_saturated_gates_stay_finite():
    xw = np.full((4, 8), 800.0)
    xw[:, :2] = -800.0
    hs, cs, gates = kernels.lstm_forward(xw, np.zeros((2, 8)))
    assert np.all(np.isfinite(hs)) and np.all(np.isfinite(gates))
