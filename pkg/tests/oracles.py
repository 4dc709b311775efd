"""Slow, obviously-correct reference implementations used only by the tests."""
import itertools
from functools import lru_cache

import numpy as np


def random_logp(rng, T, V):
    z = rng.normal(size=(T, V))
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def collapse_path(path, blank=0):
    out, prev = [], None
    for c in path:
        if c != prev and c != blank:
            out.append(int(c))
        prev = c
    return tuple(out)


def labeling_probs(logp):
    """Probability of every labeling, by enumerating all V**T paths."""
    T, V = logp.shape
    probs = {}
    for path in itertools.product(range(V), repeat=T):
        key = collapse_path(path)
        probs[key] = probs.get(key, 0.0) + np.exp(sum(logp[t, c] for t, c in enumerate(path)))
    return probs


def brute_force_ctc(logp, labels):
    return labeling_probs(logp).get(tuple(int(l) for l in labels), 0.0)


def edit_counts(ref, hyp):
    """Minimal edit distance by plain recursion over suffixes."""
    ref, hyp = tuple(ref), tuple(hyp)

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(ref):
            return len(hyp) - j
        if j == len(hyp):
            return len(ref) - i
        return min(
            go(i + 1, j + 1) + (ref[i] != hyp[j]),
            go(i + 1, j) + 1,
            go(i, j + 1) + 1,
        )

    return go(0, 0)


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        hi = f(x)
        x[idx] = old - eps
        lo = f(x)
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g
