"""Post-training int8 quantization of the landmark network.

Weights are symmetric per-tensor int8 (zero point 0), activations affine
per-tensor int8 from calibrated min/max ranges. Conv and dense layers run as
exact int8 x int8 -> int32 GEMMs followed by float requantization; the LSTM
input projection is integer too, while its recurrence and gate
nonlinearities run in float32 on dequantized weights. Biases stay float32.
"""
import gc
import json
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .model import MslrConfig, MslrOutputs, forward, normalize_input
from .tensor import Tensor, archive, ops
from .tensor.ops import _im2col, conv_out_len

QMIN, QMAX = -128, 127
WMAX = 127
MIN_SCALE = 1e-8


@dataclass(frozen=True)
class QuantizedTensor:
    payload: np.ndarray
    scale: float
    zero_point: int = 0
    shape: tuple = None

    def __post_init__(self):
        p = np.ascontiguousarray(self.payload, dtype=np.int8)
        p.setflags(write=False)
        object.__setattr__(self, "payload", p)
        object.__setattr__(self, "shape", tuple(self.shape) if self.shape is not None else p.shape)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "zero_point", int(self.zero_point))
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if p.size != int(np.prod(self.shape)):
            raise ValueError(f"payload of {p.size} values does not fit shape {self.shape}")

    def dequantize(self):
        return ((self.payload.astype(np.float64) - self.zero_point) * self.scale).reshape(self.shape)


def _exact_top(amax):
    # largest code whose value maps back onto amax exactly, so constant
    # tensors and the extreme element round-trip without error
    for top in range(WMAX, 0, -1):
        s = amax / top
        if s * top == amax:
            return s
    return amax


def quantize_symmetric(x):
    x = np.asarray(x, dtype=np.float64)
    amax = float(np.max(np.abs(x))) if x.size else 0.0
    # the guard only matters for all-zero tensors; any nonzero amax is a usable scale
    scale = _exact_top(amax) if amax > 0 else MIN_SCALE
    q = np.clip(np.rint(x / scale), -WMAX, WMAX).astype(np.int8)
    return QuantizedTensor(q, scale, 0, x.shape)


def affine_params(lo, hi):
    """Scale and zero point covering ``[min(lo, 0), max(hi, 0)]`` with 256 codes."""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    scale = max((hi - lo) / (QMAX - QMIN), MIN_SCALE)
    zp = int(np.clip(np.rint(QMIN - lo / scale), QMIN, QMAX))
    return scale, zp


def quantize_affine(x, scale, zero_point):
    """Return ``(int8 codes, number of saturated elements)``."""
    q = np.rint(np.asarray(x, dtype=np.float64) / scale) + zero_point
    n_sat = int(np.count_nonzero((q < QMIN) | (q > QMAX)))
    return np.clip(q, QMIN, QMAX).astype(np.int8), n_sat


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

@dataclass
class ActivationRanges:
    ranges: OrderedDict = field(default_factory=OrderedDict)
    samples: int = 0

    def observe(self, name, arr):
        lo, hi = float(np.min(arr)), float(np.max(arr))
        if name in self.ranges:
            old = self.ranges[name]
            lo, hi = min(lo, old[0]), max(hi, old[1])
        self.ranges[name] = (lo, hi)

    def __getitem__(self, name):
        return self.ranges[name]


def _as_frames(x):
    x = getattr(x, "seq", x)
    x = getattr(x, "data", x)
    return np.asarray(x, dtype=np.float64)


def _trace(x, arrays, config):
    """Float forward over plain arrays, yielding every quantization point."""
    if config.input_norm:
        x = normalize_input(x)
    yield "input", x
    h = x
    for i, s in enumerate(config.strides):
        h = np.maximum(ops.conv1d(h, arrays[f"conv{i}.w"], arrays[f"conv{i}.b"], stride=s).data, 0.0)
        yield f"conv{i}.out", h
    seq = ops.bilstm(
        h,
        tuple(arrays[f"lstm.fwd.{k}"] for k in ("w_ih", "w_hh", "b")),
        tuple(arrays[f"lstm.bwd.{k}"] for k in ("w_ih", "w_hh", "b")),
    ).data
    yield "lstm.out", seq
    if config.needs_projection:
        yield "proj.out", seq @ arrays["proj.w"] + arrays["proj.b"]


def _arrays(params):
    return OrderedDict((k, v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in params.items())


def calibrate(params, config, samples, ranges=None):
    """Record min/max of every quantized activation over a float run on ``samples``.

    Passing an existing ``ranges`` extends it, so ranges only ever grow.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("calibration needs at least one sample")
    arrays = _arrays(params)
    ranges = ranges if ranges is not None else ActivationRanges()
    for s in samples:
        for name, act in _trace(_as_frames(s), arrays, config):
            ranges.observe(name, act)
        ranges.samples += 1
    return ranges


# ---------------------------------------------------------------------------
# quantized model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuantizedModel:
    config: MslrConfig
    weights: dict
    biases: dict
    activations: dict

    def __post_init__(self):
        # derived, read-only GEMM operands: float32 copies of the int8 codes
        # (exact, see kernels.gemm_s8_f32), column sums for zero-point
        # correction, and dequantized recurrent weights
        prep = {}
        for name, qt in self.weights.items():
            w2 = qt.payload.reshape(-1, qt.shape[-1])
            prep[name] = (w2.astype(np.float32), w2.astype(np.int32).sum(axis=0), qt.dequantize().astype(np.float32))
        object.__setattr__(self, "_prep", prep)

    def act(self, name):
        return self.activations[name]


def _is_weight(name):
    return name.endswith(".w") or name.endswith(".w_ih") or name.endswith(".w_hh")


def quantize_model(params, config, ranges):
    """Quantize weights and fix activation scales; returns ``(model, packed bytes)``."""
    weights, biases = OrderedDict(), OrderedDict()
    for name, arr in _arrays(params).items():
        if _is_weight(name):
            weights[name] = quantize_symmetric(arr)
        else:
            b = np.asarray(arr, dtype=np.float32)
            b.setflags(write=False)
            biases[name] = b
    acts = OrderedDict((name, affine_params(lo, hi)) for name, (lo, hi) in ranges.ranges.items())
    qm = QuantizedModel(config, weights, biases, acts)
    return qm, len(pack(qm))


def pack(qmodel):
    """Serialise to the tensor archive: int8 payloads plus scale/zero-point records."""
    rec = OrderedDict()
    rec["meta.config"] = archive.meta_tensor(json.dumps(qmodel.config.to_dict(), sort_keys=True))
    for name, qt in qmodel.weights.items():
        rec[name] = qt.payload
        rec[name + ".scale"] = np.array(qt.scale, dtype=np.float64)
        rec[name + ".zero_point"] = np.array(qt.zero_point, dtype=np.int32)
    for name, b in qmodel.biases.items():
        rec[name] = b
    for name, (scale, zp) in qmodel.activations.items():
        rec[f"act.{name}.scale"] = np.array(scale, dtype=np.float64)
        rec[f"act.{name}.zero_point"] = np.array(zp, dtype=np.int32)
    return archive.dumps(rec)


def unpack(blob):
    rec = archive.loads(blob)
    config = MslrConfig(**json.loads(archive.meta_text(rec["meta.config"])))
    weights, biases, acts = OrderedDict(), OrderedDict(), OrderedDict()
    for name, arr in rec.items():
        if name.startswith("meta.") or name.endswith(".scale") or name.endswith(".zero_point"):
            continue
        if arr.dtype == np.int8:
            weights[name] = QuantizedTensor(arr, float(rec[name + ".scale"]), int(rec[name + ".zero_point"]))
        else:
            biases[name] = arr
    for name in rec:
        if name.startswith("act.") and name.endswith(".scale"):
            key = name[4:-6]
            acts[key] = (float(rec[name]), int(rec[f"act.{key}.zero_point"]))
    return QuantizedModel(config, weights, biases, acts)


def fp32_checkpoint_bytes(params):
    return len(archive.dumps(OrderedDict((k, np.asarray(v, dtype=np.float32)) for k, v in _arrays(params).items())))


# ---------------------------------------------------------------------------
# integer inference
# ---------------------------------------------------------------------------

def _qlinear(qmodel, xq, x_zp, name):
    """int32 ``(xq - x_zp) @ W[name]``, exact."""
    w32, colsum, _ = qmodel._prep[name]
    acc = kernels.gemm_s8_f32(xq, w32)
    if x_zp:
        acc -= np.int32(x_zp) * colsum
    return acc


def _requant(y, name, qmodel, report):
    scale, zp = qmodel.act(name)
    q, n_sat = quantize_affine(y, scale, zp)
    if report is not None:
        report[name] = report.get(name, 0) + n_sat
    return q, scale, zp


def int8_forward(qmodel, x, report=None):
    """Quantized forward pass; ``report`` (a dict) accumulates saturation counts per activation."""
    cfg = qmodel.config
    W, B = qmodel.weights, qmodel.biases
    x = _as_frames(x)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ValueError(f"expected input [T, {cfg.input_dim}], got {x.shape}")
    if cfg.out_frames(x.shape[0]) < 1:
        raise ValueError(f"{x.shape[0]} frames collapse to nothing after striding")
    if cfg.input_norm:
        x = normalize_input(x)
    hq, s_in, zp = _requant(x, "input", qmodel, report)
    K = cfg.kernel_size
    pad = (K - 1) // 2
    for i, stride in enumerate(cfg.strides):
        w = W[f"conv{i}.w"]
        T_out = conv_out_len(hq.shape[0], K, stride, "same")
        xp = np.pad(hq, ((pad, pad), (0, 0)), constant_values=zp)
        cols = np.ascontiguousarray(_im2col(xp, K, stride, T_out)).reshape(T_out, -1)
        acc = _qlinear(qmodel, cols, zp, f"conv{i}.w")
        y = np.maximum(acc * (s_in * w.scale) + B[f"conv{i}.b"], 0.0)
        hq, s_in, zp = _requant(y, f"conv{i}.out", qmodel, report)
    cls = W["cls.w"]
    conv_logits = _qlinear(qmodel, hq, zp, "cls.w") * (s_in * cls.scale) + B["cls.b"]
    halves = []
    for d in ("fwd", "bwd"):
        w_ih = W[f"lstm.{d}.w_ih"]
        src = hq if d == "fwd" else hq[::-1]
        xw = _qlinear(qmodel, np.ascontiguousarray(src), zp, f"lstm.{d}.w_ih") * (s_in * w_ih.scale) + B[f"lstm.{d}.b"]
        hs = kernels.lstm_forward(xw, qmodel._prep[f"lstm.{d}.w_hh"][2], np.float32)[0][1:]
        halves.append(hs if d == "fwd" else hs[::-1])
    seq = np.concatenate(halves, axis=1).astype(np.float64)
    sq, s_seq, zp_seq = _requant(seq, "lstm.out", qmodel, report)
    if cfg.needs_projection:
        pw = W["proj.w"]
        proj = _qlinear(qmodel, sq, zp_seq, "proj.w") * (s_seq * pw.scale) + B["proj.b"]
        sq, s_seq, zp_seq = _requant(proj, "proj.out", qmodel, report)
    lstm_logits = _qlinear(qmodel, sq, zp_seq, "cls.w") * (s_seq * cls.scale) + B["cls.b"]
    cp, cl = ops.softmax_logsoftmax(conv_logits, cfg.temperature)
    lp, ll = ops.softmax_logsoftmax(lstm_logits, cfg.temperature)
    return MslrOutputs(cp, cl, lp, ll)


def _timed_pass(fn, inputs):
    t0 = time.perf_counter()
    for x in inputs:
        fn(x)
    return time.perf_counter() - t0


def throughput(fn, inputs, repeats=3):
    """Frames per second of ``fn`` over ``inputs`` (best of ``repeats`` passes)."""
    inputs = list(inputs)
    frames = sum(len(_as_frames(x)) for x in inputs)
    return frames / min(_timed_pass(fn, inputs) for _ in range(repeats))


def compare_throughput(params, config, qmodel, inputs, repeats=3):
    """``(fp32 fps, int8 fps, int8 / fp32)`` on the same inputs and thread.

    Float and int8 passes alternate within each repeat, with the garbage
    collector paused, so a slow spell on a shared machine hits both sides.
    """
    inputs = list(inputs)
    frames = sum(len(_as_frames(x)) for x in inputs)
    fp_fn = lambda x: forward(_as_frames(x), params, config)  # noqa: E731
    q8_fn = lambda x: int8_forward(qmodel, x)  # noqa: E731
    fp_fn(inputs[0])
    q8_fn(inputs[0])
    best_fp = best_q8 = np.inf
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repeats):
            best_fp = min(best_fp, _timed_pass(fp_fn, inputs))
            best_q8 = min(best_q8, _timed_pass(q8_fn, inputs))
    finally:
        if was_enabled:
            gc.enable()
    fp, q8 = frames / best_fp, frames / best_q8
    return fp, q8, q8 / fp
