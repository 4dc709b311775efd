"""Differentiable kernels.

Every function takes/returns :class:`Tensor`. Heavy layers (conv1d, bilstm,
layer_norm, log_softmax) are fused single nodes with hand-written backward
passes; the rest are thin wrappers over numpy.
"""
import numpy as np

from .. import kernels
from .autograd import Tensor, as_tensor, make_result


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), backward)


def matmul(a, b):
    """Matrix product; leading dims broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.outer(a.data, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(a.data @ b.data, (a, b), backward)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(x.data.reshape(shape), (x,), backward, check=False)


def transpose(x, axes=None):
    x = as_tensor(x)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return make_result(np.transpose(x.data, axes), (x,), backward, check=False)


def getitem(x, idx):
    x = as_tensor(x)

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return make_result(x.data[idx], (x,), backward, check=False)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, check=False)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return make_result(x.data * mask, (x,), backward, check=False)


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return make_result(y, (x,), backward, check=False)


def sigmoid(x):
    x = as_tensor(x)
    y = _sigmoid(x.data)

    def backward(g):
        return (g * y * (1.0 - y),)

    return make_result(y, (x,), backward, check=False)


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)

    def backward(g):
        return (g * y,)

    return make_result(y, (x,), backward)


def log(x):
    x = as_tensor(x)

    def backward(g):
        return (g / x.data,)

    with np.errstate(divide="ignore"):
        return make_result(np.log(x.data), (x,), backward)


def stop_gradient(x):
    return as_tensor(x).detach()


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def _log_softmax_np(z, mask=None):
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = z - m
    with np.errstate(divide="ignore"):
        lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    return shifted - lse


def log_softmax(x, temperature=1.0, axis=-1):
    """Stable log-softmax of ``x / temperature`` along the last axis."""
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    x = as_tensor(x)
    if axis not in (-1, x.ndim - 1):
        raise ValueError("log_softmax only reduces the last axis")
    lp = _log_softmax_np(x.data / temperature)
    p = np.exp(lp)

    def backward(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / temperature,)

    return make_result(lp, (x,), backward)


def softmax_logsoftmax(x, temperature=1.0):
    """Return ``(probs, logprobs)`` sharing one stable evaluation."""
    logp = log_softmax(x, temperature)
    return exp(logp), logp


def softmax(x, temperature=1.0, mask=None):
    """Softmax along the last axis; ``mask`` False entries get probability 0."""
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    x = as_tensor(x)
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
    with np.errstate(invalid="ignore"):
        lp = _log_softmax_np(x.data / temperature, mask)
    y = np.exp(lp)
    y = np.where(np.isnan(y), 0.0, y)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)) / temperature,)

    return make_result(y, (x,), backward)


def nll_loss(logp, targets, weights=None):
    """Mean negative log-likelihood of integer ``targets`` under ``logp[..., V]``.

    ``weights`` (same shape as ``targets``) zeroes out padding positions; the
    mean is taken over the total weight.
    """
    logp = as_tensor(logp)
    targets = np.asarray(targets, dtype=np.int64)
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    denom = max(w.sum(), 1.0)
    picked = np.take_along_axis(logp.data, targets[..., None], axis=-1)[..., 0]

    def backward(g):
        out = np.zeros_like(logp.data)
        np.put_along_axis(out, targets[..., None], (-g * w / denom)[..., None], axis=-1)
        return (out,)

    return make_result(np.array(-(picked * w).sum() / denom), (logp,), backward)


# ---------------------------------------------------------------------------
# normalisation / lookup
# ---------------------------------------------------------------------------

def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat
    parents = [x]
    if gamma is not None:
        gamma = as_tensor(gamma)
        parents.append(gamma)
        y = y * gamma.data
    if beta is not None:
        beta = as_tensor(beta)
        parents.append(beta)
        y = y + beta.data

    def backward(g):
        gx = g * gamma.data if gamma is not None else g
        n = x.shape[-1]
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return tuple(grads)

    return make_result(y, parents, backward)


def embedding(table, ids):
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return make_result(table.data[ids], (table,), backward, check=False)


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# temporal convolution
# ---------------------------------------------------------------------------

def conv_out_len(T, K, stride, padding):
    if padding == "same":
        return -(-T // stride)
    if padding == "valid":
        return (T - K) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def _im2col(xp, K, stride, T_out):
    D = xp.shape[1]
    s0, s1 = xp.strides
    return np.lib.stride_tricks.as_strided(xp, shape=(T_out, K, D), strides=(stride * s0, s0, s1))


def conv1d(x, w, b, stride=1, padding="same"):
    """Temporal convolution of ``x [T, Din]`` with ``w [K, Din, Dout]``.

    ``same`` pads ``(K-1)/2`` frames at each end and yields ``ceil(T/stride)``
    frames; ``valid`` yields ``(T-K)//stride + 1``.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"conv1d expects non-empty [T, Din], got {x.shape}")
    K, Din, Dout = w.shape
    if K % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {K}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.shape[1] != Din:
        raise ValueError(f"input width {x.shape[1]} != kernel width {Din}")
    T = x.shape[0]
    pad = (K - 1) // 2 if padding == "same" else 0
    T_out = conv_out_len(T, K, stride, padding)
    if T_out < 1:
        raise ValueError(f"input length {T} too short for kernel {K}")
    xp = np.pad(x.data, ((pad, pad), (0, 0))) if pad else np.ascontiguousarray(x.data)
    # contiguous copy: the overlapping strided view would bypass BLAS
    cols = np.ascontiguousarray(_im2col(xp, K, stride, T_out)).reshape(T_out, K * Din)
    wm = w.data.reshape(K * Din, Dout)
    y = cols @ wm + b.data

    def backward(g):
        gw = (cols.T @ g).reshape(w.shape)
        gb = g.sum(axis=0)
        gcols = (g @ wm.T).reshape(T_out, K, Din)
        gxp = np.zeros_like(xp)
        stop = (T_out - 1) * stride + 1
        for k in range(K):
            gxp[k : k + stop : stride] += gcols[:, k, :]
        gx = gxp[pad : pad + T] if pad else gxp
        return gx, gw, gb

    return make_result(y, (x, w, b), backward)


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

def _lstm_forward(xw, w_hh):
    """Run one direction given precomputed input projections ``xw [T, 4H]``."""
    return kernels.lstm_forward(xw, w_hh)


def _lstm_backward(dh_out, x, hs, cs, gates, w_ih, w_hh):
    T, H = dh_out.shape
    dz = np.empty((T, 4 * H))
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    for t in range(T - 1, -1, -1):
        i, f, gg, o = gates[t, :H], gates[t, H : 2 * H], gates[t, 2 * H : 3 * H], gates[t, 3 * H :]
        tc = np.tanh(cs[t + 1])
        dh = dh_out[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz[t, :H] = dc * gg * i * (1.0 - i)
        dz[t, H : 2 * H] = dc * cs[t] * f * (1.0 - f)
        dz[t, 2 * H : 3 * H] = dc * i * (1.0 - gg * gg)
        dz[t, 3 * H :] = dh * tc * o * (1.0 - o)
        dh_next = dz[t] @ w_hh.T
        dc_next = dc * f
    dx = dz @ w_ih.T
    dw_ih = x.T @ dz
    dw_hh = hs[:-1].T @ dz
    db = dz.sum(axis=0)
    return dx, dw_ih, dw_hh, db


def bilstm(x, fwd, bwd):
    """Bidirectional LSTM over ``x [T, D]``.

    ``fwd`` and ``bwd`` are ``(w_ih [D,4H], w_hh [H,4H], b [4H])`` triples with
    gate order input, forget, candidate, output. Returns ``[T, 2H]`` holding
    forward states then time-aligned backward states.
    """
    x = as_tensor(x)
    fwd = tuple(as_tensor(p) for p in fwd)
    bwd = tuple(as_tensor(p) for p in bwd)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"bilstm expects [T>=1, D], got {x.shape}")
    for w_ih, w_hh, b in (fwd, bwd):
        H = w_hh.shape[0]
        if w_ih.shape != (x.shape[1], 4 * H) or w_hh.shape != (H, 4 * H) or b.shape != (4 * H,):
            raise ValueError("bilstm parameter shapes inconsistent with input")
    xf = x.data
    xr = np.ascontiguousarray(xf[::-1])
    hf, cf, gf = _lstm_forward(xf @ fwd[0].data + fwd[2].data, fwd[1].data)
    hr, cr, gr = _lstm_forward(xr @ bwd[0].data + bwd[2].data, bwd[1].data)
    Hf = fwd[1].shape[0]
    y = np.concatenate([hf[1:], hr[1:][::-1]], axis=1)

    def backward(g):
        dxf, *pf = _lstm_backward(g[:, :Hf], xf, hf, cf, gf, fwd[0].data, fwd[1].data)
        dxr, *pr = _lstm_backward(g[:, Hf:][::-1], xr, hr, cr, gr, bwd[0].data, bwd[1].data)
        return (dxf + dxr[::-1], *pf, *pr)

    return make_result(y, (x, *fwd, *bwd), backward)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def causal_mask(L):
    return np.tril(np.ones((L, L), dtype=bool))


def scaled_dot_attention(q, k, v, mask=None):
    """``softmax(q k^T / sqrt(d)) v`` over the last two axes.

    ``mask`` broadcasts against ``[..., Lq, Lk]``; False entries are excluded.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    scores = mul(matmul(q, transpose_last(k)), 1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, scores.shape)
        except ValueError:
            raise ValueError(f"mask shape {mask.shape} incompatible with scores {scores.shape}") from None
    return matmul(softmax(scores, mask=mask), v)


def transpose_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def multi_head_attention(xq, xkv, params, n_heads, mask=None):
    """Projected multi-head attention; ``params`` maps wq/wk/wv/wo (and b*) names.

    ``xq [B, Lq, d]``, ``xkv [B, Lk, d]``; ``mask`` broadcasts to ``[B, 1, Lq, Lk]``.
    """
    B, Lq, d = xq.shape
    Lk = xkv.shape[1]
    if d % n_heads:
        raise ValueError(f"width {d} not divisible by {n_heads} heads")
    hd = d // n_heads

    def split(t, L):
        return transpose(reshape(t, (B, L, n_heads, hd)), (0, 2, 1, 3))

    q = split(linear(xq, params["wq"], params["bq"]), Lq)
    k = split(linear(xkv, params["wk"], params["bk"]), Lk)
    v = split(linear(xkv, params["wv"], params["bv"]), Lk)
    ctx = scaled_dot_attention(q, k, v, mask)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (B, Lq, d))
    return linear(ctx, params["wo"], params["bo"])
