"""Timing harness: jit kernels against their numpy twins, int8 against float inference."""
import time

import numpy as np

from . import kernels
from .model import MslrConfig, count_flops, init_params
from .quant import calibrate, compare_throughput, quantize_model


def _best_ms(fn, repeats):
    fn()  # warm-up, also triggers jit compilation
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def kernel_cases(seed=0, frames=200):
    rng = np.random.default_rng(seed)
    V, N = 40, 12
    logits = rng.normal(size=(frames, V))
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    ext = kernels.extend_labels(rng.integers(1, V, size=N))
    ref = rng.integers(0, 30, size=60)
    hyp = rng.integers(0, 30, size=55)
    a = rng.integers(-128, 128, size=(frames, 1280)).astype(np.int8)
    b = rng.integers(-127, 128, size=(1280, 256)).astype(np.int8)
    xw = rng.normal(size=(frames // 4, 4 * 128))
    w_hh = rng.normal(scale=0.1, size=(128, 4 * 128))
    return {
        "ctc_forward_backward": (
            lambda: kernels.ctc_forward_backward_nb(logp, ext, 0),
            lambda: kernels.ctc_forward_backward_np(logp, ext, 0),
        ),
        "edit_table": (lambda: kernels.edit_table_nb(ref, hyp), lambda: kernels.edit_table_np(ref, hyp)),
        "gemm_s8": (lambda: kernels.gemm_s8_nb(a, b), lambda: kernels.gemm_s8_np(a, b)),
        "lstm_forward": (lambda: kernels.lstm_forward_nb(xw, w_hh), lambda: kernels.lstm_forward_np(xw, w_hh)),
    }


def run_kernels(repeats=5, frames=200, seed=0):
    rows = []
    for name, (nb, np_) in kernel_cases(seed, frames).items():
        t_nb, t_np = _best_ms(nb, repeats), _best_ms(np_, repeats)
        rows.append({"kernel": name, "numba_ms": t_nb, "numpy_ms": t_np, "numpy_over_numba": t_np / t_nb})
    return rows


def run_inference(repeats=3, frames=200, seed=0, config=None, n_inputs=3):
    """FP32 vs INT8 forward throughput on random inputs for ``config`` (default network)."""
    config = config or MslrConfig()
    params = init_params(config, seed)
    rng = np.random.default_rng(seed)
    xs = [rng.uniform(0, 1, size=(frames, config.input_dim)) for _ in range(n_inputs)]
    qm, size = quantize_model(params, config, calibrate(params, config, xs))
    fp, q8, ratio = compare_throughput(params, config, qm, xs, repeats)
    return {"frames": frames, "fp32_fps": fp, "int8_fps": q8, "int8_over_fp32": ratio, "int8_bytes": size,
            "flops_per_forward": count_flops(config, frames)}


def format_rows(rows):
    lines = [f"{'kernel':<22}{'numba ms':>12}{'numpy ms':>12}{'ratio':>10}"]
    for r in rows:
        lines.append(f"{r['kernel']:<22}{r['numba_ms']:>12.3f}{r['numpy_ms']:>12.3f}{r['numpy_over_numba']:>10.2f}")
    return "\n".join(lines)
