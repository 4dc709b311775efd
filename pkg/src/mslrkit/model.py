"""The landmark student network: 1D conv stack, BiLSTM, shared classifier."""
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DEFAULT_COORDS, DEFAULT_KEYPOINTS
from .tensor import Tensor, ops, parameter
from .tensor.ops import conv_out_len


@dataclass
class MslrConfig:
    input_dim: int = DEFAULT_KEYPOINTS * DEFAULT_COORDS
    vocab_size: int = 1300
    channels: tuple = (128, 128, 256, 256)
    strides: tuple = (1, 1, 2, 2)
    kernel_size: int = 5
    hidden: int = 256
    temperature: float = 1.0
    input_norm: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)

    def violations(self):
        errs = []
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            errs.append(f"model.kernel_size={self.kernel_size} must be odd and positive")
        if len(self.channels) < 1:
            errs.append("model.channels needs at least one conv layer")
        if len(self.strides) != len(self.channels):
            errs.append(f"model.strides has {len(self.strides)} entries for {len(self.channels)} conv layers")
        if any(c < 1 for c in self.channels) or self.input_dim < 1 or self.hidden < 1:
            errs.append("model widths must be positive")
        if any(s < 1 for s in self.strides):
            errs.append("model.strides must be >= 1")
        if self.vocab_size < 2:
            errs.append("model.vocab_size must be >= 2")
        if not self.temperature > 0:
            errs.append("model.temperature must be > 0")
        return errs

    def validate(self):
        errs = self.violations()
        if errs:
            raise ValueError("; ".join(errs))
        return self

    @property
    def feature_dim(self):
        return self.channels[-1]

    @property
    def needs_projection(self):
        return 2 * self.hidden != self.feature_dim

    def out_frames(self, T):
        for s in self.strides:
            T = conv_out_len(T, self.kernel_size, s, "same")
        return T

    def to_dict(self):
        return asdict(self)


@dataclass
class MslrOutputs:
    conv_probs: Tensor
    conv_logp: Tensor
    lstm_probs: Tensor
    lstm_logp: Tensor

    @property
    def frames(self):
        return self.conv_logp.shape[0]


def param_shapes(config):
    shapes = OrderedDict()
    din = config.input_dim
    K = config.kernel_size
    for i, c in enumerate(config.channels):
        shapes[f"conv{i}.w"] = (K, din, c)
        shapes[f"conv{i}.b"] = (c,)
        din = c
    H = config.hidden
    for d in ("fwd", "bwd"):
        shapes[f"lstm.{d}.w_ih"] = (din, 4 * H)
        shapes[f"lstm.{d}.w_hh"] = (H, 4 * H)
        shapes[f"lstm.{d}.b"] = (4 * H,)
    if config.needs_projection:
        shapes["proj.w"] = (2 * H, config.feature_dim)
        shapes["proj.b"] = (config.feature_dim,)
    shapes["cls.w"] = (config.feature_dim, config.vocab_size)
    shapes["cls.b"] = (config.vocab_size,)
    return shapes


def _fan_in(name, shapes, config):
    layer = name.rsplit(".", 1)[0]
    if name.startswith("lstm"):
        return config.hidden
    w = shapes[layer + ".w"]
    return w[0] * w[1] if name.startswith("conv") else w[0]


def init_params(config, seed):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every tensor; LSTM forget bias +1."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    shapes = param_shapes(config)
    for name, shape in shapes.items():
        bound = 1.0 / np.sqrt(_fan_in(name, shapes, config))
        data = rng.uniform(-bound, bound, size=shape)
        if name.startswith("lstm") and name.endswith(".b"):
            H = config.hidden
            data[H : 2 * H] += 1.0
        params[name] = parameter(data, name=name)
    return params


NORM_EPS = 1e-6


def normalize_input(x):
    """Shift and scale a whole sequence to zero mean, unit variance (one scalar each).

    Raw landmark coordinates sit around 0.5 with a small spread, which
    stalls optimisation; a single scalar pair keeps the relative layout of
    keypoints and coordinates intact.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x
    return (x - x.mean()) / max(float(x.std()), NORM_EPS)


def forward(x, params, config):
    """Run the network on ``x [T, input_dim]``; return both probability heads.

    Arrays go through :func:`normalize_input` when ``config.input_norm`` is
    set; a :class:`Tensor` is taken as already prepared.
    """
    if not isinstance(x, Tensor):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != config.input_dim:
            raise ValueError(f"expected input [T, {config.input_dim}], got {x.shape}")
        x = Tensor(normalize_input(x) if config.input_norm else x)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise ValueError(f"expected input [T, {config.input_dim}], got {x.shape}")
    T_out = config.out_frames(x.shape[0])
    if T_out < 1:
        raise ValueError(f"{x.shape[0]} frames collapse to {T_out} after striding")
    h = x
    for i, s in enumerate(config.strides):
        h = ops.relu(ops.conv1d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], stride=s, padding="same"))
    conv_logits = ops.linear(h, params["cls.w"], params["cls.b"])
    seq = ops.bilstm(
        h,
        (params["lstm.fwd.w_ih"], params["lstm.fwd.w_hh"], params["lstm.fwd.b"]),
        (params["lstm.bwd.w_ih"], params["lstm.bwd.w_hh"], params["lstm.bwd.b"]),
    )
    if config.needs_projection:
        seq = ops.linear(seq, params["proj.w"], params["proj.b"])
    lstm_logits = ops.linear(seq, params["cls.w"], params["cls.b"])
    cp, cl = ops.softmax_logsoftmax(conv_logits, config.temperature)
    lp, ll = ops.softmax_logsoftmax(lstm_logits, config.temperature)
    return MslrOutputs(cp, cl, lp, ll)


def forward_batch(xs, params, config):
    return [forward(x, params, config) for x in xs]


def count_flops(config, T):
    """Multiply-accumulate count of one forward pass over ``T`` input frames.

    Counts conv, LSTM (input and recurrent projections, both directions),
    the optional BiLSTM projection and both classifier applications.
    Elementwise work (activations, gates, softmax) is excluded.
    """
    K = config.kernel_size
    total = 0
    din = config.input_dim
    t = T
    for c, s in zip(config.channels, config.strides):
        t = conv_out_len(t, K, s, "same")
        total += t * K * din * c
        din = c
    H = config.hidden
    total += t * 2 * 4 * H * (din + H)
    if config.needs_projection:
        total += t * 2 * H * config.feature_dim
    total += 2 * t * config.feature_dim * config.vocab_size
    return total


def n_params(params):
    return int(sum(p.data.size for p in params.values()))


def params_to_arrays(params):
    return OrderedDict((k, v.data) for k, v in params.items())


def arrays_to_params(arrays, config):
    shapes = param_shapes(config)
    missing = [k for k in shapes if k not in arrays]
    if missing:
        raise KeyError(f"checkpoint lacks tensors: {missing}")
    out = OrderedDict()
    for k, shape in shapes.items():
        arr = np.asarray(arrays[k], dtype=np.float64)
        if arr.shape != shape:
            raise ValueError(f"{k}: checkpoint shape {arr.shape} != config shape {shape}")
        out[k] = parameter(arr.copy(), name=k)
    return out


@dataclass
class Mslr:
    config: MslrConfig
    params: OrderedDict = field(default=None)

    @classmethod
    def create(cls, config, seed):
        return cls(config, init_params(config, seed))

    def __call__(self, x):
        return forward(x, self.params, self.config)

    def parameters(self):
        return list(self.params.values())
