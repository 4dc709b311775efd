"""Connectionist temporal classification: exact loss, gradient and decoding."""
import numpy as np

from . import kernels
from .data import BLANK
from .tensor import as_tensor
from .tensor.autograd import make_result


class CtcInfeasibleError(ValueError):
    pass


def min_frames(target):
    """Fewest frames able to emit ``target``: one per label plus a blank between repeats."""
    target = np.asarray(target)
    if target.size == 0:
        return 0
    return int(target.size + np.count_nonzero(target[1:] == target[:-1]))


def check_feasible(T, target):
    if np.any(np.asarray(target) == BLANK):
        raise CtcInfeasibleError("target contains the blank id")
    need = min_frames(target)
    if T < max(need, 1):
        raise CtcInfeasibleError(f"{T} frames cannot emit a {len(target)}-gloss target (needs {need})")


def ctc_loss(logp, target):
    """``-log p(target | logp)`` for one ``[T, V]`` log-probability stream.

    The gradient w.r.t. ``logp`` treats each entry as free (no renormalisation),
    so it chains correctly through a preceding log-softmax.
    """
    logp = as_tensor(logp)
    target = np.asarray(target, dtype=np.int64)
    check_feasible(logp.shape[0], target)
    loss, grad = kernels.ctc_forward_backward(logp.data, target, BLANK)
    if not np.isfinite(loss):
        raise CtcInfeasibleError("target has zero probability under this stream")

    def backward(g):
        return (g * grad,)

    return make_result(np.array(loss), (logp,), backward)


def ctc_loss_value(logp, target):
    return float(ctc_loss(np.asarray(logp, dtype=np.float64), target).data)


def collapse(path):
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for tok in path:
        tok = int(tok)
        if tok != prev and tok != BLANK:
            out.append(tok)
        prev = tok
    return out


def greedy_decode(stream):
    """Best-path decoding; argmax ties go to the lowest id (``np.argmax`` semantics)."""
    return collapse(np.argmax(np.asarray(stream), axis=-1))


def _lse(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    m = max(a, b)
    return m + np.log1p(np.exp(-abs(a - b)))


def beam_decode(logp, width, return_score=False):
    """CTC prefix beam search over a ``[T, V]`` log-probability stream.

    Prefixes ending in blank and non-blank are tracked separately and merged,
    so with an unbounded beam the result is the exact most probable labeling.
    Beams are ranked by probability, ties broken by the lexicographically
    smaller prefix. Width 1 is not guaranteed to reproduce greedy decoding.
    """
    if width < 1:
        raise ValueError(f"beam width must be >= 1, got {width}")
    logp = np.asarray(logp, dtype=np.float64)
    T, V = logp.shape
    beams = {(): (0.0, -np.inf)}  # prefix -> (log p ending blank, log p ending non-blank)
    for t in range(T):
        row = logp[t]
        nxt = {}

        def bump(prefix, pb=-np.inf, pnb=-np.inf):
            ob, onb = nxt.get(prefix, (-np.inf, -np.inf))
            nxt[prefix] = (_lse(ob, pb), _lse(onb, pnb))

        for prefix, (pb, pnb) in beams.items():
            total = _lse(pb, pnb)
            bump(prefix, pb=total + row[BLANK])
            last = prefix[-1] if prefix else None
            for c in range(V):
                if c == BLANK:
                    continue
                p = row[c]
                if c == last:
                    bump(prefix, pnb=pnb + p)
                    bump(prefix + (c,), pnb=pb + p)
                else:
                    bump(prefix + (c,), pnb=total + p)
        ranked = sorted(nxt.items(), key=lambda kv: (-_lse(*kv[1]), kv[0]))
        beams = dict(ranked[:width])
    best, (pb, pnb) = min(beams.items(), key=lambda kv: (-_lse(*kv[1]), kv[0]))
    if return_score:
        return list(best), float(_lse(pb, pnb))
    return list(best)
