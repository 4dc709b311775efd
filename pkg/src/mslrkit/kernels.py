"""Hot inner loops, each in two interchangeable flavours.

``*_nb`` functions are scalar loops compiled by numba; ``*_np`` functions are
vectorised numpy doing the same arithmetic. The public names dispatch on
:data:`mslrkit._accel.USE_NUMBA`. Both flavours must agree to rounding error;
``tests/test_kernels.py`` holds them to that.
"""
import math

import numpy as np

from ._accel import USE_NUMBA, njit

NEG_INF = -np.inf


# ---------------------------------------------------------------------------
# CTC forward-backward
# ---------------------------------------------------------------------------

def extend_labels(labels, blank=0):
    """Interleave blanks: [a, b] -> [_, a, _, b, _]."""
    labels = np.asarray(labels, dtype=np.int64)
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


@njit
def _logaddexp(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit
def ctc_forward_backward_nb(logp, ext, blank):
    T = logp.shape[0]
    V = logp.shape[1]
    S = ext.shape[0]
    alpha = np.full((T, S), -np.inf)
    beta = np.full((T, S), -np.inf)

    alpha[0, 0] = logp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            a = alpha[t - 1, s]
            if s >= 1:
                a = _logaddexp(a, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]:
                a = _logaddexp(a, alpha[t - 1, s - 2])
            if a != -np.inf:
                alpha[t, s] = a + logp[t, ext[s]]

    beta[T - 1, S - 1] = logp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = logp[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        for s in range(S):
            b = beta[t + 1, s]
            if s + 1 < S:
                b = _logaddexp(b, beta[t + 1, s + 1])
            if s + 2 < S and ext[s] != blank and ext[s] != ext[s + 2]:
                b = _logaddexp(b, beta[t + 1, s + 2])
            if b != -np.inf:
                beta[t, s] = b + logp[t, ext[s]]

    log_z = alpha[T - 1, S - 1]
    if S > 1:
        log_z = _logaddexp(log_z, alpha[T - 1, S - 2])

    grad = np.zeros((T, V))
    for t in range(T):
        for s in range(S):
            ab = alpha[t, s] + beta[t, s]
            if ab != -np.inf:
                grad[t, ext[s]] -= math.exp(ab - logp[t, ext[s]] - log_z)
    return -log_z, grad


def _lse_rows(*arrs):
    stacked = np.stack(arrs)
    m = np.max(stacked, axis=0)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = safe + np.log(np.sum(np.exp(stacked - safe), axis=0))
    return np.where(np.isfinite(m), out, -np.inf)


def ctc_forward_backward_np(logp, ext, blank):
    T, V = logp.shape
    S = ext.shape[0]
    emit = logp[:, ext]  # [T, S]
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    alpha = np.full((T, S), NEG_INF)
    alpha[0, : min(2, S)] = emit[0, : min(2, S)]
    for t in range(1, T):
        prev = alpha[t - 1]
        shift1 = np.concatenate(([NEG_INF], prev[:-1]))
        shift2 = np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))[:S]
        shift2 = np.where(skip, shift2, NEG_INF)
        alpha[t] = _lse_rows(prev, shift1, shift2) + emit[t]

    # skip into s from s+2 is allowed when ext[s+2] differs from ext[s]; same mask shifted
    skip_back = np.zeros(S, dtype=bool)
    skip_back[:-2] = skip[2:]
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, max(S - 2, 0):] = emit[T - 1, max(S - 2, 0):]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        shift1 = np.concatenate((nxt[1:], [NEG_INF]))
        shift2 = np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))[:S]
        shift2 = np.where(skip_back, shift2, NEG_INF)
        beta[t] = _lse_rows(nxt, shift1, shift2) + emit[t]

    log_z = _lse_rows(*alpha[T - 1, max(S - 2, 0):])
    with np.errstate(invalid="ignore"):
        occ = np.exp(alpha + beta - emit - log_z)
    occ = np.where(np.isfinite(alpha + beta), occ, 0.0)
    grad = np.zeros((T, V))
    np.add.at(grad, (slice(None), ext), -occ)
    return -float(log_z), grad


def ctc_forward_backward(logp, labels, blank=0):
    """Return ``(loss, dloss/dlogp)`` for one sequence.

    ``logp`` is ``[T, V]`` float64 log-probabilities; ``labels`` holds the
    target ids without blanks. Feasibility is the caller's problem: an
    infeasible target yields ``inf``.
    """
    logp = np.ascontiguousarray(logp, dtype=np.float64)
    ext = extend_labels(labels, blank)
    if USE_NUMBA:
        loss, grad = ctc_forward_backward_nb(logp, ext, blank)
        return float(loss), grad
    return ctc_forward_backward_np(logp, ext, blank)


# ---------------------------------------------------------------------------
# Levenshtein table
# ---------------------------------------------------------------------------

@njit
def edit_table_nb(ref, hyp):
    n = ref.shape[0]
    m = hyp.shape[0]
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    for i in range(n + 1):
        d[i, 0] = i
    for j in range(m + 1):
        d[0, j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            best = d[i - 1, j - 1] + cost
            if d[i, j - 1] + 1 < best:
                best = d[i, j - 1] + 1
            if d[i - 1, j] + 1 < best:
                best = d[i - 1, j] + 1
            d[i, j] = best
    return d


def edit_table_np(ref, hyp):
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[0] = np.arange(m + 1)
    cols = np.arange(m + 1)
    for i in range(1, n + 1):
        tmp = np.empty(m + 1, dtype=np.int64)
        tmp[0] = i
        tmp[1:] = np.minimum(d[i - 1, 1:] + 1, d[i - 1, :-1] + (ref[i - 1] != hyp))
        # insertion chain along the row: d[i, j] = min_k tmp[k] + (j - k)
        d[i] = np.minimum.accumulate(tmp - cols) + cols
    return d


def edit_table(ref, hyp):
    """Full ``(len(ref)+1) x (len(hyp)+1)`` unit-cost edit-distance table."""
    ref = np.asarray(ref, dtype=np.int64)
    hyp = np.asarray(hyp, dtype=np.int64)
    if USE_NUMBA:
        return edit_table_nb(ref, hyp)
    return edit_table_np(ref, hyp)


# ---------------------------------------------------------------------------
# int8 GEMM with int32 accumulation
# ---------------------------------------------------------------------------

@njit
def gemm_s8_nb(a, b):
    M, K = a.shape
    N = b.shape[1]
    out = np.zeros((M, N), dtype=np.int32)
    for i in range(M):
        for k in range(K):
            aik = np.int32(a[i, k])
            if aik == 0:
                continue
            for j in range(N):
                out[i, j] += aik * np.int32(b[k, j])
    return out


# |a| <= 128 and |b| <= 128, so any partial sum over 1024 products stays
# below 2**24 and is exact in float32 whatever order BLAS adds in
_F32_EXACT_K = 1024


def gemm_s8_np(a, b):
    return gemm_s8_f32(a, b.astype(np.float32))


def gemm_s8_f32(a, bf):
    """``gemm_s8`` with the right operand pre-cast to float32 (values must be int8)."""
    M, K = a.shape
    out = np.zeros((M, bf.shape[1]), dtype=np.int32)
    for k0 in range(0, K, _F32_EXACT_K):
        blk = a[:, k0 : k0 + _F32_EXACT_K].astype(np.float32) @ bf[k0 : k0 + _F32_EXACT_K]
        out += blk.astype(np.int32)
    return out


def gemm_s8(a, b):
    """``int8 [M,K] @ int8 [K,N] -> int32 [M,N]``, exact.

    Always takes the chunked float32 BLAS route: it is exact and beats the
    jit loop on every shape we benchmarked. ``gemm_s8_nb`` is kept for the
    benchmark and as a second implementation for the tests.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dims differ: {a.shape} @ {b.shape}")
    return gemm_s8_np(np.asarray(a, dtype=np.int8), np.asarray(b, dtype=np.int8))


# ---------------------------------------------------------------------------
# LSTM recurrence
# ---------------------------------------------------------------------------

@njit
def lstm_forward_nb(xw, w_hh):
    T = xw.shape[0]
    H = w_hh.shape[0]
    hs = np.zeros((T + 1, H), dtype=xw.dtype)
    cs = np.zeros((T + 1, H), dtype=xw.dtype)
    gates = np.empty((T, 4 * H), dtype=xw.dtype)
    z = np.empty(4 * H, dtype=xw.dtype)
    for t in range(T):
        for j in range(4 * H):
            z[j] = xw[t, j]
        for k in range(H):
            hk = hs[t, k]
            if hk != 0.0:
                for j in range(4 * H):
                    z[j] += hk * w_hh[k, j]
        for j in range(H):
            i = 1.0 / (1.0 + math.exp(-z[j]))
            f = 1.0 / (1.0 + math.exp(-z[H + j]))
            g = math.tanh(z[2 * H + j])
            o = 1.0 / (1.0 + math.exp(-z[3 * H + j]))
            c = f * cs[t, j] + i * g
            cs[t + 1, j] = c
            hs[t + 1, j] = o * math.tanh(c)
            gates[t, j] = i
            gates[t, H + j] = f
            gates[t, 2 * H + j] = g
            gates[t, 3 * H + j] = o
    return hs, cs, gates


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def lstm_forward_np(xw, w_hh):
    T = xw.shape[0]
    H = w_hh.shape[0]
    hs = np.zeros((T + 1, H), dtype=xw.dtype)
    cs = np.zeros((T + 1, H), dtype=xw.dtype)
    gates = np.empty((T, 4 * H), dtype=xw.dtype)
    for t in range(T):
        z = xw[t] + hs[t] @ w_hh
        i = _sigmoid(z[:H])
        f = _sigmoid(z[H : 2 * H])
        gg = np.tanh(z[2 * H : 3 * H])
        o = _sigmoid(z[3 * H :])
        cs[t + 1] = f * cs[t] + i * gg
        hs[t + 1] = o * np.tanh(cs[t + 1])
        gates[t, :H], gates[t, H : 2 * H], gates[t, 2 * H : 3 * H], gates[t, 3 * H :] = i, f, gg, o
    return hs, cs, gates


def lstm_forward(xw, w_hh, dtype=np.float64):
    """One LSTM direction from precomputed input projections ``xw [T, 4H]``.

    Gate order is input, forget, candidate, output. Returns ``(hs, cs, gates)``
    where ``hs``/``cs`` hold ``T + 1`` rows starting from the zero state.
    Everything runs in ``dtype`` (float64 or float32).
    """
    xw = np.ascontiguousarray(xw, dtype=dtype)
    w_hh = np.ascontiguousarray(w_hh, dtype=dtype)
    if USE_NUMBA:
        return lstm_forward_nb(xw, w_hh)
    return lstm_forward_np(xw, w_hh)
