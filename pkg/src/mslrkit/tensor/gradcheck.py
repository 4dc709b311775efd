import numpy as np

from .autograd import Tape


def numerical_grad(f, arrays, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. each array, perturbed in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            fp = float(f())
            arr[idx] = orig - eps
            fm = float(f())
            arr[idx] = orig
            g[idx] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def max_rel_error(a, b, floor=1e-8):
    """``max |a-b| / max(|a|+|b|, floor)`` in the symmetric-relative sense."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.abs(a) + np.abs(b), floor)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def check_gradients(build, params, eps=1e-5, floor=1e-6):
    """Compare tape gradients of scalar ``build()`` with central differences.

    ``params`` are leaf tensors with ``requires_grad``. Returns the worst
    relative error over all entries. Entries where both gradients are below
    ``floor`` in magnitude count as agreeing.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = build()
    tape.backward(out)
    analytic = [p.grad.copy() for p in params]
    numeric = numerical_grad(lambda: build().data, [p.data for p in params], eps)
    return max(max_rel_error(a, n, floor) for a, n in zip(analytic, numeric))
