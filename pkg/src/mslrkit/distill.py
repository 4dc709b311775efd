"""Distillation objective over teacher and student probability heads.

All KD terms are ``alpha * sum_t KL(p_teacher_t || p_student_t)``, with the
student side logged. Teacher streams, and the BiLSTM head when it teaches the
conv head, carry no gradient.

Teacher file format ``TCH1`` (little-endian)::

    b"TCH1" | T u32 | V u32 | conv head T*V float32 | bilstm head T*V float32
"""
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .ctc import ctc_loss
from .tensor import Tensor, as_tensor, ops
from .tensor.autograd import make_result

TCH_MAGIC = b"TCH1"
ROW_TOL = 1e-6


class TeacherFormatError(ValueError):
    pass


@dataclass
class KdWeights:
    alpha: float = 1.0
    kd_ratio: float = 25.0
    temperature: float = 1.0
    use_conv: bool = True
    use_lstm: bool = True
    use_self: bool = True

    def violations(self):
        errs = []
        if self.alpha < 0:
            errs.append("kd.alpha must be >= 0")
        if self.kd_ratio < 0:
            errs.append("kd.kd_ratio must be >= 0")
        if not self.temperature > 0:
            errs.append("kd.temperature must be > 0")
        return errs

    def validate(self):
        errs = self.violations()
        if errs:
            raise ValueError("; ".join(errs))
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class TeacherStreams:
    conv: np.ndarray
    lstm: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.conv = np.asarray(self.conv, dtype=np.float64)
        self.lstm = np.asarray(self.lstm, dtype=np.float64)
        if self.conv.ndim != 2 or self.conv.shape != self.lstm.shape:
            raise TeacherFormatError(f"teacher heads must share a [T, V] shape: {self.conv.shape} vs {self.lstm.shape}")
        for name, p in (("conv", self.conv), ("lstm", self.lstm)):
            _check_rows(p, f"teacher {name} head")

    @property
    def frames(self):
        return self.conv.shape[0]

    @property
    def vocab_size(self):
        return self.conv.shape[1]


def _check_rows(p, what):
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError(f"{what} has negative or non-finite probabilities")
    dev = np.abs(p.sum(axis=-1) - 1.0)
    if dev.size and dev.max() > ROW_TOL:
        raise ValueError(f"{what} rows do not sum to 1 (max deviation {dev.max():.2e})")


def write_teacher(path, streams):
    with open(path, "wb") as fh:
        fh.write(TCH_MAGIC)
        fh.write(struct.pack("<II", streams.frames, streams.vocab_size))
        fh.write(np.ascontiguousarray(streams.conv, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(streams.lstm, dtype="<f4").tobytes())


def load_teacher(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != TCH_MAGIC:
        raise TeacherFormatError(f"{path}: bad magic {blob[:4]!r}")
    T, V = struct.unpack_from("<II", blob, 4)
    n = T * V
    if len(blob) != 12 + 8 * n:
        raise TeacherFormatError(f"{path}: expected {12 + 8 * n} bytes for T={T} V={V}, got {len(blob)}")
    arr = np.frombuffer(blob, dtype="<f4", offset=12).astype(np.float64)
    conv, lstm = arr[:n].reshape(T, V), arr[n:].reshape(T, V)
    # float32 storage: renormalise so rows meet the float64 tolerance
    conv = conv / conv.sum(axis=1, keepdims=True)
    lstm = lstm / lstm.sum(axis=1, keepdims=True)
    return TeacherStreams(conv, lstm, source=str(path))


def kd_kl(teacher, student_logp, alpha=1.0):
    """``alpha * sum_t sum_v p_T (log p_T - log p_S)`` with the teacher held constant."""
    teacher = np.asarray(teacher.data if isinstance(teacher, Tensor) else teacher, dtype=np.float64)
    student_logp = as_tensor(student_logp)
    if teacher.shape != student_logp.shape:
        raise ValueError(f"teacher {teacher.shape} and student {student_logp.shape} shapes differ")
    _check_rows(teacher, "teacher")
    # evaluate both sides as log(prob) so bitwise-equal distributions give exactly 0
    s = student_logp.data
    q = np.exp(s)
    with np.errstate(divide="ignore"):
        log_q = np.where(q > 0, np.log(q), s)
        log_p = np.where(teacher > 0, np.log(teacher), 0.0)
    value = alpha * float(np.sum(teacher * (log_p - log_q)))

    def backward(g):
        return (-g * alpha * teacher,)

    return make_result(np.array(value), (student_logp,), backward)


def kd_self(lstm_probs, conv_logp, alpha=1.0):
    """Self-distillation: the BiLSTM head (frozen) teaches the conv head."""
    p = lstm_probs.data if isinstance(lstm_probs, Tensor) else lstm_probs
    return kd_kl(p, conv_logp, alpha)


def align_teacher(streams, frames):
    """Linearly resample both heads to ``frames`` steps, then renormalise rows."""
    if streams.frames < 1 or frames < 1:
        raise ValueError("teacher and target lengths must be >= 1")
    if streams.frames == frames:
        return streams

    def resample(p):
        T = p.shape[0]
        grid = np.linspace(0.0, T - 1, frames) if frames > 1 else np.array([(T - 1) / 2.0])
        lo = np.floor(grid).astype(np.int64)
        hi = np.minimum(lo + 1, T - 1)
        frac = (grid - lo)[:, None]
        out = (1.0 - frac) * p[lo] + frac * p[hi]
        return out / out.sum(axis=1, keepdims=True)

    return TeacherStreams(resample(streams.conv), resample(streams.lstm), streams.source)


@dataclass
class LossBreakdown:
    total: Tensor
    conv_kd: float
    lstm_kd: float
    self_kd: float
    ctc: float

    def as_dict(self):
        return {
            "L_total": float(self.total.data),
            "L_c": self.conv_kd,
            "L_b": self.lstm_kd,
            "L_s": self.self_kd,
            "L_CTC": self.ctc,
        }


def total_loss(outputs, target, weights, teacher=None):
    """``L_CTC + kd_ratio * (L_c + L_b + L_s)``; CTC runs on the BiLSTM head.

    The reported ``conv_kd``/``lstm_kd``/``self_kd`` already include
    ``kd_ratio`` so the four components add up to ``total`` exactly.
    Without a teacher the two teacher terms are exactly zero.
    """
    V = outputs.lstm_logp.shape[1]
    l_ctc = ctc_loss(outputs.lstm_logp, target)
    terms = [l_ctc]
    comps = {"c": 0.0, "b": 0.0, "s": 0.0}
    scale = weights.kd_ratio * weights.alpha
    if teacher is not None and scale > 0:
        if teacher.vocab_size != V:
            raise ValueError(f"teacher vocabulary {teacher.vocab_size} != student vocabulary {V}")
        teacher = align_teacher(teacher, outputs.frames)
        if weights.use_conv:
            lc = kd_kl(teacher.conv, outputs.conv_logp, scale)
            terms.append(lc)
            comps["c"] = float(lc.data)
        if weights.use_lstm:
            lb = kd_kl(teacher.lstm, outputs.lstm_logp, scale)
            terms.append(lb)
            comps["b"] = float(lb.data)
    elif teacher is not None and teacher.vocab_size != V:
        raise ValueError(f"teacher vocabulary {teacher.vocab_size} != student vocabulary {V}")
    if weights.use_self and scale > 0:
        ls = kd_self(outputs.lstm_probs, outputs.conv_logp, scale)
        terms.append(ls)
        comps["s"] = float(ls.data)
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return LossBreakdown(total, comps["c"], comps["b"], comps["s"], float(l_ctc.data))
