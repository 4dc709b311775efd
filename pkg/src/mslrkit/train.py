"""Training and evaluation loops for the landmark network."""
from dataclasses import asdict, dataclass

import numpy as np

from .augment import apply_policy
from .ctc import beam_decode, greedy_decode, min_frames
from .distill import KdWeights, load_teacher, total_loss
from .metrics import corpus_wer, wer
from .model import forward
from .tensor import Adam, Tape, linear_decay
from .tensor.optim import constant


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-4
    linear_decay: bool = True
    augment: bool = True
    grad_clip: float = 5.0

    def violations(self):
        errs = []
        if self.epochs < 1:
            errs.append("train.epochs must be >= 1")
        if self.batch_size < 1:
            errs.append("train.batch_size must be >= 1")
        if not self.lr > 0:
            errs.append("train.lr must be > 0")
        if self.weight_decay < 0:
            errs.append("train.weight_decay must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            errs.append("train.grad_clip must be > 0 or null")
        return errs

    def validate(self):
        errs = self.violations()
        if errs:
            raise ValueError("; ".join(errs))
        return self

    def to_dict(self):
        return asdict(self)


def sample_seed(seed, epoch, index):
    return np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0]


def _clip(params, max_norm):
    total = np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if total > max_norm:
        for p in params:
            p.grad *= max_norm / total
    return total


def decode(model, samples, beam_width=1):
    hyps = []
    for s in samples:
        out = model(s.seq.data)
        logp = out.lstm_logp.data
        hyps.append(greedy_decode(logp) if beam_width <= 1 else beam_decode(logp, beam_width))
    return hyps


def evaluate(model, samples, beam_width=1):
    """Corpus WER of greedy (or beam) decodes against sample targets."""
    hyps = decode(model, samples, beam_width)
    total = corpus_wer((s.target.tolist(), h) for s, h in zip(samples, hyps))
    per_sample = [(s.seq.sample_id, wer(s.target.tolist(), h)) for s, h in zip(samples, hyps)]
    return total, per_sample, hyps


def train_mslr(
    model,
    samples,
    train_cfg,
    kd=None,
    policy=None,
    seed=0,
    dev_samples=None,
    log=None,
    teachers=None,
):
    """Optimise the combined CTC + distillation objective.

    ``teachers`` optionally maps sample index to :class:`TeacherStreams`;
    otherwise each sample's ``teacher`` path (if any) is loaded once.
    ``log(record)`` receives one dict per epoch. Returns the list of records.
    """
    kd = kd or KdWeights(alpha=0.0)
    train_cfg.validate()
    kd.validate()
    if teachers is None:
        teachers = {i: load_teacher(s.teacher) for i, s in enumerate(samples) if s.teacher}
    params = model.parameters()
    steps_per_epoch = -(-len(samples) // train_cfg.batch_size)
    schedule = linear_decay(train_cfg.epochs * steps_per_epoch) if train_cfg.linear_decay else constant
    opt = Adam(params, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay, schedule=schedule)
    history = []
    for epoch in range(train_cfg.epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(samples))
        sums = {"L_total": 0.0, "L_c": 0.0, "L_b": 0.0, "L_s": 0.0, "L_CTC": 0.0}
        for start in range(0, len(order), train_cfg.batch_size):
            batch = order[start : start + train_cfg.batch_size]
            opt.zero_grad()
            for idx in batch:
                s = samples[idx]
                seq = s.seq
                if train_cfg.augment and policy is not None:
                    aug = apply_policy(seq, policy, sample_seed(seed, epoch, int(idx)))
                    if model.config.out_frames(aug.frames) >= max(min_frames(s.target), 1):
                        seq = aug
                with Tape() as tape:
                    out = forward(seq.data, model.params, model.config)
                    parts = total_loss(out, s.target, kd, teachers.get(int(idx)))
                tape.backward(parts.total)
                for k, v in parts.as_dict().items():
                    sums[k] += v
            for p in params:
                p.grad /= len(batch)
            if train_cfg.grad_clip:
                _clip(params, train_cfg.grad_clip)
            opt.step()
        record = {"epoch": epoch + 1}
        record.update({k: v / len(samples) for k, v in sums.items()})
        record["lr"] = opt.current_lr()
        if dev_samples:
            record["dev_wer"] = evaluate(model, dev_samples)[0].wer
        history.append(record)
        if log is not None:
            log(record)
    return history
