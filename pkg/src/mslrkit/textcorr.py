"""Two-stage transformer gloss corrector with self-supervised corruption pretraining.

Stage 1 is trained to undo heavy corruption, stage 2 to undo light
corruption; at inference the stages run back to back. Both are small
encoder-decoder transformers with more encoder than decoder layers.
"""
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import BOS, EOS, PAD, RESERVED, Vocabulary
from .tensor import Adam, Tape, ops, parameter
from .tensor.optim import linear_decay


# ---------------------------------------------------------------------------
# corruption
# ---------------------------------------------------------------------------

@dataclass
class CorruptionSpec:
    sub_rate: float = 0.0
    del_rate: float = 0.0
    ins_rate: float = 0.0
    shuffle_rate: float = 0.0
    window: int = 3
    vocab: tuple = ()
    seed: int = 0

    @classmethod
    def even(cls, total, vocab=(), window=3, seed=0):
        """Split ``total`` equally over shuffle, substitution, deletion and insertion."""
        r = total / 4.0
        return cls(r, r, r, r, window, tuple(vocab), seed)

    def violations(self):
        errs = []
        rates = (self.sub_rate, self.del_rate, self.ins_rate, self.shuffle_rate)
        if any(not 0.0 <= r <= 1.0 for r in rates):
            errs.append("corruption rates must lie in [0, 1]")
        if sum(rates) >= 1.0:
            errs.append(f"total corruption rate {sum(rates):.3f} must be < 1")
        if self.window < 2:
            errs.append("shuffle window must be >= 2")
        if (self.sub_rate > 0 or self.ins_rate > 0) and len(self.vocab) < 2:
            errs.append("substitution/insertion need a vocabulary of at least 2 tokens")
        return errs

    def validate(self):
        errs = self.violations()
        if errs:
            raise ValueError("; ".join(errs))
        return self


@dataclass(frozen=True)
class CorrectionPair:
    corrupted: tuple
    clean: tuple
    seed: int


def corrupt(clean, spec, seed=None):
    """Corrupt a non-empty token sequence: shuffle, substitute, delete, insert.

    Every op draws its coin flips for all positions up front, so the result
    is a pure function of ``(clean, spec, seed)``. Deletion never removes the
    last surviving token.
    """
    clean = list(clean)
    if not clean:
        raise ValueError("cannot corrupt an empty sequence")
    spec.validate()
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    vocab = list(spec.vocab)
    toks = list(clean)
    n = len(toks)

    # local shuffle: swap with a later token inside the window
    hits = rng.random(n) < spec.shuffle_rate
    offs = rng.integers(1, spec.window, size=n)
    for i in range(n):
        if hits[i]:
            j = min(i + int(offs[i]), n - 1)
            toks[i], toks[j] = toks[j], toks[i]

    hits = rng.random(n) < spec.sub_rate
    picks = rng.integers(0, max(len(vocab) - 1, 1), size=n)
    for i in range(n):
        if hits[i]:
            alternatives = [v for v in vocab if v != toks[i]]
            toks[i] = alternatives[int(picks[i]) % len(alternatives)]

    drop = rng.random(n) < spec.del_rate
    if drop.all():
        drop[int(rng.integers(0, n))] = False
    toks = [t for t, d in zip(toks, drop) if not d]

    n_ins = int(rng.binomial(n, spec.ins_rate)) if spec.ins_rate > 0 else 0
    for _ in range(n_ins):
        pos = int(rng.integers(0, len(toks) + 1))
        toks.insert(pos, vocab[int(rng.integers(0, len(vocab)))])
    return CorrectionPair(tuple(toks), tuple(clean), int(seed))


def preprocess(tokens):
    """Case-fold, normalise whitespace, collapse immediate repeats."""
    if isinstance(tokens, str):
        tokens = tokens.split()
    out = []
    for tok in tokens:
        for t in str(tok).lower().split():
            if not out or out[-1] != t:
                out.append(t)
    return out


# ---------------------------------------------------------------------------
# synthetic gloss corpus
# ---------------------------------------------------------------------------

_SLOTS = {
    "day": ["today", "tomorrow", "monday", "friday", "weekend"],
    "part": ["morning", "afternoon", "evening", "night"],
    "region": ["north", "south", "east", "west", "coast", "mountains"],
    "sky": ["sun", "cloud", "fog", "rain", "snow", "storm"],
    "temp": ["warm", "cold", "mild", "hot", "freezing"],
    "wind": ["calm", "breeze", "gust", "windy"],
}
_TEMPLATES = [
    ("day", "region", "sky"),
    ("day", "part", "region", "sky", "temp"),
    ("region", "sky", "wind"),
    ("day", "region", "temp", "wind"),
    ("part", "sky", "region", "temp"),
    ("day", "part", "sky", "wind", "temp"),
]


def synth_gloss_corpus(seed, n):
    """``n`` weather-report style gloss sentences from a fixed slot grammar."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        tmpl = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
        out.append(" ".join(_SLOTS[slot][int(rng.integers(len(_SLOTS[slot])))] for slot in tmpl))
    return out


def grammar_tokens():
    return [t for words in _SLOTS.values() for t in words]


# ---------------------------------------------------------------------------
# transformer
# ---------------------------------------------------------------------------

@dataclass
class StageConfig:
    enc_layers: int = 4
    dec_layers: int = 1
    width: int = 64
    heads: int = 4
    ff: int = 128
    max_len: int = 32


@dataclass
class CorrectorConfig:
    stage: StageConfig = field(default_factory=StageConfig)
    stage1_rate: float = 0.3
    stage2_rate: float = 0.1
    shuffle_window: int = 3
    clean_fraction: float = 0.3
    epochs: int = 30
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 1e-4
    use_stage2: bool = True
    preprocess: bool = True

    def __post_init__(self):
        if isinstance(self.stage, dict):
            self.stage = StageConfig(**self.stage)

    def violations(self):
        errs = []
        s = self.stage
        if not s.enc_layers > s.dec_layers >= 1:
            errs.append(f"corrector needs enc_layers > dec_layers >= 1, got {s.enc_layers}/{s.dec_layers}")
        if s.width < 1 or s.ff < 1 or s.heads < 1 or s.max_len < 2:
            errs.append("corrector widths must be positive and max_len >= 2")
        elif s.width % s.heads:
            errs.append(f"corrector width {s.width} not divisible by {s.heads} heads")
        for name in ("stage1_rate", "stage2_rate"):
            r = getattr(self, name)
            if not 0.0 <= r < 1.0:
                errs.append(f"corrector.{name}={r} must lie in [0, 1)")
        if not 0.0 <= self.clean_fraction <= 1.0:
            errs.append("corrector.clean_fraction must lie in [0, 1]")
        if self.shuffle_window < 2:
            errs.append("corrector.shuffle_window must be >= 2")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            errs.append("corrector.epochs, batch_size and lr must be positive")
        return errs

    def validate(self):
        errs = self.violations()
        if errs:
            raise ValueError("; ".join(errs))
        return self

    def to_dict(self):
        return asdict(self)


def _attn_shapes(prefix, d):
    return {f"{prefix}.w{k}": (d, d) for k in "qkvo"} | {f"{prefix}.b{k}": (d,) for k in "qkvo"}


def _ln_shapes(prefix, d):
    return {f"{prefix}.g": (d,), f"{prefix}.b": (d,)}


def _ff_shapes(prefix, d, ff):
    return {f"{prefix}.w1": (d, ff), f"{prefix}.b1": (ff,), f"{prefix}.w2": (ff, d), f"{prefix}.b2": (d,)}


def transformer_shapes(cfg, vocab_size):
    d = cfg.width
    shapes = OrderedDict(embed=(vocab_size, d))
    for i in range(cfg.enc_layers):
        p = f"enc{i}"
        shapes.update(_ln_shapes(f"{p}.ln1", d), **_attn_shapes(f"{p}.att", d))
        shapes.update(_ln_shapes(f"{p}.ln2", d), **_ff_shapes(f"{p}.ff", d, cfg.ff))
    shapes.update(_ln_shapes("enc.ln", d))
    for i in range(cfg.dec_layers):
        p = f"dec{i}"
        shapes.update(_ln_shapes(f"{p}.ln1", d), **_attn_shapes(f"{p}.self", d))
        shapes.update(_ln_shapes(f"{p}.ln2", d), **_attn_shapes(f"{p}.cross", d))
        shapes.update(_ln_shapes(f"{p}.ln3", d), **_ff_shapes(f"{p}.ff", d, cfg.ff))
    shapes.update(_ln_shapes("dec.ln", d))
    shapes["out.w"] = (d, vocab_size)
    shapes["out.b"] = (vocab_size,)
    return shapes


def init_transformer(cfg, vocab_size, seed):
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in transformer_shapes(cfg, vocab_size).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "embed":
            data = rng.normal(0.0, cfg.width**-0.5, size=shape)
        elif len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-bound, bound, size=shape)
        elif leaf == "g":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = parameter(data, name=name)
    return params


def positional_encoding(L, d):
    pos = np.arange(L)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _ln(x, params, prefix):
    return ops.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _ffn(x, params, prefix):
    h = ops.relu(ops.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return ops.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _attn_params(params, prefix):
    return {k: params[f"{prefix}.{k}"] for k in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")}


def _embed(params, ids, cfg):
    d = cfg.width
    e = ops.embedding(params["embed"], ids)
    return ops.add(ops.mul(e, np.sqrt(d)), positional_encoding(ids.shape[1], d))


def encode(params, src, cfg):
    """``src [B, Ls]`` ids (PAD-padded) -> memory ``[B, Ls, d]``."""
    key_ok = (src != PAD)[:, None, None, :]
    h = _embed(params, src, cfg)
    for i in range(cfg.enc_layers):
        p = f"enc{i}"
        x = _ln(h, params, f"{p}.ln1")
        h = ops.add(h, ops.multi_head_attention(x, x, _attn_params(params, f"{p}.att"), cfg.heads, key_ok))
        h = ops.add(h, _ffn(_ln(h, params, f"{p}.ln2"), params, f"{p}.ff"))
    return _ln(h, params, "enc.ln")


def decode_logits(params, memory, src, tgt_in, cfg):
    """Teacher-forced decoder: ``tgt_in [B, Lt]`` -> logits ``[B, Lt, V]``."""
    Lt = tgt_in.shape[1]
    self_ok = ops.causal_mask(Lt)[None, None] & (tgt_in != PAD)[:, None, None, :]
    self_ok = self_ok | np.eye(Lt, dtype=bool)[None, None]
    cross_ok = (src != PAD)[:, None, None, :]
    h = _embed(params, tgt_in, cfg)
    for i in range(cfg.dec_layers):
        p = f"dec{i}"
        x = _ln(h, params, f"{p}.ln1")
        h = ops.add(h, ops.multi_head_attention(x, x, _attn_params(params, f"{p}.self"), cfg.heads, self_ok))
        x = _ln(h, params, f"{p}.ln2")
        h = ops.add(h, ops.multi_head_attention(x, memory, _attn_params(params, f"{p}.cross"), cfg.heads, cross_ok))
        h = ops.add(h, _ffn(_ln(h, params, f"{p}.ln3"), params, f"{p}.ff"))
    h = _ln(h, params, "dec.ln")
    return ops.linear(h, params["out.w"], params["out.b"])


def pad_batch(seqs, length=None, prefix=(), suffix=()):
    rows = [list(prefix) + list(s) + list(suffix) for s in seqs]
    L = length or max(len(r) for r in rows)
    out = np.full((len(rows), L), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r[:L]
    return out


def seq2seq_loss(params, cfg, src_seqs, tgt_seqs):
    src = pad_batch(src_seqs)
    tgt_in = pad_batch(tgt_seqs, prefix=(BOS,))
    tgt_out = pad_batch(tgt_seqs, suffix=(EOS,))
    memory = encode(params, src, cfg)
    logits = decode_logits(params, memory, src, tgt_in, cfg)
    logp = ops.log_softmax(logits)
    return ops.nll_loss(logp, tgt_out, weights=(tgt_out != PAD))


def greedy_generate(params, cfg, src_seqs, max_len=None):
    """Batched greedy decoding; reserved ids other than EOS are never emitted."""
    max_len = max_len or cfg.max_len
    if not src_seqs:
        return []
    src = pad_batch(src_seqs)
    memory = encode(params, src, cfg)
    B = len(src_seqs)
    out = np.full((B, 1), BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    banned = [i for i in range(len(RESERVED)) if i != EOS]
    for _ in range(max_len):
        logits = decode_logits(params, memory, src, out, cfg).data[:, -1, :].copy()
        logits[:, banned] = -np.inf
        nxt = np.argmax(logits, axis=-1)
        nxt[done] = PAD
        out = np.concatenate([out, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    result = []
    for row in out[:, 1:]:
        toks = []
        for t in row:
            if t in (EOS, PAD):
                break
            toks.append(int(t))
        result.append(toks)
    return result


# ---------------------------------------------------------------------------
# pretraining and inference
# ---------------------------------------------------------------------------

def stage_spec(cfg, vocab, stage):
    rate = cfg.stage1_rate if stage == 1 else cfg.stage2_rate
    return CorruptionSpec.even(rate, vocab=tuple(vocab.gloss_ids), window=cfg.shuffle_window)


def make_pairs(clean_ids, spec, clean_fraction, seed, epoch):
    """One epoch of (source, target) id pairs; a seeded ``clean_fraction`` share stays uncorrupted."""
    rng = np.random.default_rng([seed, epoch, 0xC0])
    n = len(clean_ids)
    keep = rng.random(n) < clean_fraction
    seeds = rng.integers(0, 2**32, size=n)
    pairs = []
    for ids, k, s in zip(clean_ids, keep, seeds):
        src = ids if k else list(corrupt(ids, spec, seed=int(s)).corrupted)
        pairs.append((src, ids))
    return pairs


def train_stage(clean_ids, vocab, cfg, stage, seed, log=None):
    sc = cfg.stage
    if len(clean_ids) < 1:
        raise ValueError("pretraining corpus is empty")
    too_long = [i for i, s in enumerate(clean_ids) if len(s) + 1 > sc.max_len]
    if too_long:
        raise ValueError(f"{len(too_long)} sentences exceed max_len={sc.max_len}")
    params = init_transformer(sc, len(vocab), seed)
    spec = stage_spec(cfg, vocab, stage)
    steps = cfg.epochs * -(-len(clean_ids) // cfg.batch_size)
    opt = Adam(params.values(), lr=cfg.lr, weight_decay=cfg.weight_decay, schedule=linear_decay(steps))
    history = []
    for epoch in range(cfg.epochs):
        pairs = make_pairs(clean_ids, spec, cfg.clean_fraction, seed, epoch)
        order = np.random.default_rng([seed, epoch, 0xBA]).permutation(len(pairs))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [pairs[i] for i in order[start : start + cfg.batch_size]]
            src = [b[0][: sc.max_len] for b in batch]
            opt.zero_grad()
            with Tape() as tape:
                loss = seq2seq_loss(params, sc, src, [b[1] for b in batch])
            tape.backward(loss)
            opt.step()
            total += float(loss.data) * len(batch)
            count += len(batch)
        record = {"stage": stage, "epoch": epoch + 1, "loss": total / count}
        history.append(record)
        if log is not None:
            log(record)
    return params, history


@dataclass
class Corrector:
    vocab: Vocabulary
    config: CorrectorConfig
    stage1: OrderedDict
    stage2: OrderedDict = None

    def correct_ids(self, batch, use_stage2=None):
        use_stage2 = self.config.use_stage2 if use_stage2 is None else use_stage2
        sc = self.config.stage
        for s in batch:
            if len(s) > sc.max_len:
                raise ValueError(f"input of {len(s)} tokens exceeds max_len={sc.max_len}")
        out = greedy_generate(self.stage1, sc, [list(s) or [EOS] for s in batch])
        if use_stage2 and self.stage2 is not None:
            out = greedy_generate(self.stage2, sc, [s or [EOS] for s in out])
        return out

    def correct(self, sentences, use_stage2=None, use_preprocess=None):
        """Correct whitespace-tokenised sentences; returns lists of tokens."""
        use_preprocess = self.config.preprocess if use_preprocess is None else use_preprocess
        toks = [preprocess(s) if use_preprocess else (s.split() if isinstance(s, str) else list(s)) for s in sentences]
        ids = [self.vocab.encode(t) for t in toks]
        return [self.vocab.decode(o).split() for o in self.correct_ids(ids, use_stage2)]


def pretrain(corpus, cfg, seed=0, log=None, vocab=None):
    """Build the vocabulary and train both stages on self-made correction pairs."""
    cfg.validate()
    corpus = list(corpus)
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    if len(corpus) < cfg.batch_size:
        raise ValueError(f"corpus of {len(corpus)} sentences is shorter than one batch ({cfg.batch_size})")
    texts = [preprocess(s) if cfg.preprocess else s.split() for s in corpus]
    if vocab is None:
        vocab = Vocabulary(t for s in texts for t in s)
    clean_ids = [vocab.encode(t) for t in texts if t]
    p1, h1 = train_stage(clean_ids, vocab, cfg, 1, seed, log)
    p2, h2 = (None, [])
    if cfg.use_stage2:
        p2, h2 = train_stage(clean_ids, vocab, cfg, 2, seed + 1, log)
    return Corrector(vocab, cfg, p1, p2), h1 + h2


def corrector_arrays(corrector):
    out = OrderedDict()
    for k, v in corrector.stage1.items():
        out[f"stage1.{k}"] = v.data
    if corrector.stage2 is not None:
        for k, v in corrector.stage2.items():
            out[f"stage2.{k}"] = v.data
    return out


def corrector_from_arrays(arrays, vocab, cfg):
    stages = {}
    for stage in ("stage1", "stage2"):
        prefix = stage + "."
        got = OrderedDict((k[len(prefix):], parameter(np.asarray(v, dtype=np.float64), name=k))
                          for k, v in arrays.items() if k.startswith(prefix))
        stages[stage] = got or None
    if stages["stage1"] is None:
        raise KeyError("checkpoint has no stage1 tensors")
    expected = transformer_shapes(cfg.stage, len(vocab))
    for stage, params in stages.items():
        if params is None:
            continue
        for k, shape in expected.items():
            if k not in params or params[k].shape != shape:
                raise ValueError(f"{stage}.{k}: missing or wrong shape for this config/vocabulary")
    return Corrector(vocab, cfg, stages["stage1"], stages["stage2"])
