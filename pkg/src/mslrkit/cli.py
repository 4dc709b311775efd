"""``mslrkit`` command line: every subcommand reads one JSON config plus ``--set`` overrides.

Each run writes ``config.<command>.json`` (the resolved config and its hash)
next to its artifacts under ``output_dir``; every artifact embeds that hash.
"""
import argparse
import json
import os
import sys
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import bench, quant
from .augment import apply_policy
from .config import ConfigError, load
from .ctc import greedy_decode
from .data import (
    RESERVED,
    ManifestEntry,
    Vocabulary,
    load_manifest,
    load_samples,
    synth_dataset,
    write_landmarks,
    write_manifest,
)
from .distill import KdWeights, TeacherStreams, write_teacher
from .metrics import corpus_wer, format_report, wer
from .model import Mslr, MslrConfig, arrays_to_params, params_to_arrays
from .tensor import archive
from .textcorr import (
    CorrectorConfig,
    CorruptionSpec,
    corrector_arrays,
    corrector_from_arrays,
    corrupt,
    pretrain,
    synth_gloss_corpus,
)
from .train import TrainConfig, decode, evaluate, sample_seed, train_mslr

GAP_NOTE = (
    "# note: WERs here come from synthetic landmark data. Full-scale benchmark WERs\n"
    "# (PHOENIX14 / PHOENIX14T), full-scale FP32-vs-INT8 WER differences and absolute\n"
    "# FPS need the real video corpora and GPU-scale training; they are not reproduced.\n"
)


class CommandError(RuntimeError):
    def __init__(self, problems):
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("; ".join(self.problems))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _out(cfg, *parts):
    path = Path(cfg.output_dir, *parts)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_config(cfg, command):
    path = _out(cfg, f"config.{command}.json")
    payload = {"command": command, "config_hash": cfg.hash(), "config": cfg.to_dict()}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _data_path(cfg, split):
    given = getattr(cfg.data, split)
    return given or str(Path(cfg.output_dir, "data", f"{split}.tsv"))


def _vocab_path(cfg):
    return cfg.data.vocab or str(Path(cfg.output_dir, "data", "vocab.txt"))


def _require(paths):
    missing = [f"missing {what}: {p}" for what, p in paths if not p or not os.path.exists(p)]
    if missing:
        raise CommandError(missing)


def _fit_model_config(cfg, vocab, sample):
    cfg.model.vocab_size = len(vocab)
    cfg.model.input_dim = sample.seq.width
    errs = cfg.model.violations()
    if errs:
        raise CommandError(errs)


def _save_model(path, model, vocab, cfg):
    rec = OrderedDict(params_to_arrays(model.params))
    rec["meta.model"] = archive.meta_tensor(json.dumps(model.config.to_dict(), sort_keys=True))
    rec["meta.vocab"] = archive.meta_tensor("\n".join(vocab.itos))
    rec["meta.config_hash"] = archive.meta_tensor(cfg.hash())
    archive.save(path, rec)


def _vocab_from_meta(rec):
    itos = archive.meta_text(rec["meta.vocab"]).split("\n")
    vocab = Vocabulary(itos[len(RESERVED):])
    if vocab.itos != itos:
        raise CommandError("checkpoint vocabulary is malformed")
    return vocab


def _load_model(path):
    rec = archive.load(path)
    mcfg = MslrConfig(**json.loads(archive.meta_text(rec["meta.model"])))
    vocab = _vocab_from_meta(rec)
    params = arrays_to_params({k: v for k, v in rec.items() if not k.startswith("meta.")}, mcfg)
    return Mslr(mcfg, params), vocab


def _epoch_logger(cfg, path):
    fh = open(path, "w", encoding="utf-8")
    h = cfg.hash()

    def log(record):
        line = json.dumps({"config_hash": h, **record}, sort_keys=True)
        fh.write(line + "\n")
        fh.flush()
        print(line, flush=True)

    return fh, log


def _train_student(cfg, samples, dev, vocab, teachers, kd, tag):
    _fit_model_config(cfg, vocab, samples[0])
    model = Mslr.create(cfg.model, cfg.seed)
    fh, log = _epoch_logger(cfg, _out(cfg, f"{tag}.log.jsonl"))
    try:
        train_mslr(model, samples, cfg.train, kd=kd, policy=cfg.augment, seed=cfg.seed,
                   dev_samples=dev, log=log, teachers=teachers)
    finally:
        fh.close()
    _save_model(_out(cfg, f"{tag}.ckpt"), model, vocab, cfg)
    return model


def _splits(cfg, *names):
    paths = [(f"{n} manifest", _data_path(cfg, n)) for n in names] + [("vocabulary", _vocab_path(cfg))]
    _require(paths)
    vocab = Vocabulary.load(_vocab_path(cfg))
    out = [load_samples(load_manifest(_data_path(cfg, n), split=n), vocab) for n in names]
    return vocab, out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg):
    s = cfg.synth
    root = _out(cfg, "data", "x").parent
    made = {}
    for offset, (split, n) in enumerate((("train", s.train_samples), ("dev", s.dev_samples), ("test", s.test_samples))):
        man, _ = synth_dataset(root, seed=cfg.seed * 3 + offset, num_samples=n, vocab_size=s.vocab_size,
                               frames_per_gloss=s.frames_per_gloss, noise=s.noise,
                               min_glosses=s.min_glosses, max_glosses=s.max_glosses, split=split)
        made[split] = man
    (root / "config_hash.txt").write_text(cfg.hash() + "\n")
    return made


def cmd_augment(cfg):
    vocab, (train,) = _splits(cfg, "train")
    cfg.augment.validate()
    root = _out(cfg, "augmented", "x").parent
    entries, plans = [], []
    man = load_manifest(_data_path(cfg, "train"))
    for i, (s, e) in enumerate(zip(train, man)):
        aug, plan = apply_policy(s.seq, cfg.augment, sample_seed(cfg.seed, 0, i), return_plan=True)
        rel = f"{Path(e.landmarks).stem}.aug.lmk"
        write_landmarks(root / rel, aug)
        entries.append(ManifestEntry(rel, e.gloss))
        plans.append({"index": i, "frames": aug.frames, **{k: _jsonable(v) for k, v in plan.__dict__.items()}})
    write_manifest(root / "augmented.tsv", entries)
    with open(root / "plans.jsonl", "w", encoding="utf-8") as fh:
        for p in plans:
            fh.write(json.dumps({"config_hash": cfg.hash(), **p}, sort_keys=True) + "\n")
    return {"manifest": str(root / "augmented.tsv"), "samples": len(entries)}


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.integer, np.floating, np.bool_)):
        return v.item()
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def cmd_train(cfg):
    vocab, (train, dev) = _splits(cfg, "train", "dev")
    _train_student(cfg, train, dev, vocab, None, cfg.kd, "train")
    return {"checkpoint": str(_out(cfg, "train.ckpt")), "log": str(_out(cfg, "train.log.jsonl"))}


def _teacher_model(cfg, train, vocab):
    t = cfg.teacher
    if t.checkpoint:
        _require([("teacher checkpoint", t.checkpoint)])
        model, tv = _load_model(t.checkpoint)
        if tv.itos != vocab.itos:
            raise CommandError("teacher vocabulary differs from the dataset vocabulary")
        return model
    tcfg = MslrConfig(input_dim=train[0].seq.width, vocab_size=len(vocab), channels=tuple(t.channels),
                      strides=cfg.model.strides, kernel_size=cfg.model.kernel_size, hidden=t.hidden,
                      temperature=cfg.model.temperature, input_norm=cfg.model.input_norm)
    teacher = Mslr.create(tcfg, cfg.seed + 1)
    tc = TrainConfig(epochs=t.epochs, batch_size=cfg.train.batch_size, lr=t.lr,
                     weight_decay=cfg.train.weight_decay, augment=False, grad_clip=cfg.train.grad_clip)
    train_mslr(teacher, train, tc, kd=KdWeights(alpha=0.0), seed=cfg.seed + 1)
    _save_model(_out(cfg, "teacher.ckpt"), teacher, vocab, cfg)
    return teacher


def cmd_distill(cfg):
    vocab, (train, dev) = _splits(cfg, "train", "dev")
    _fit_model_config(cfg, vocab, train[0])
    teacher = _teacher_model(cfg, train, vocab)
    tdir = _out(cfg, "teachers", "x").parent
    man = load_manifest(_data_path(cfg, "train"))
    entries, teachers = [], {}
    for i, (s, e) in enumerate(zip(train, man)):
        o = teacher(s.seq.data)
        streams = TeacherStreams(o.conv_probs.data, o.lstm_probs.data)
        path = tdir / f"{i:05d}.tch"
        write_teacher(path, streams)
        teachers[i] = streams
        entries.append(ManifestEntry(os.path.abspath(man.resolve(e.landmarks)), e.gloss, str(path.resolve())))
    write_manifest(tdir / "train_kd.tsv", entries)
    teacher_dev = evaluate(teacher, dev)[0].wer if dev else None
    _train_student(cfg, train, dev, vocab, teachers, cfg.kd, "distill")
    return {"checkpoint": str(_out(cfg, "distill.ckpt")), "teacher_dev_wer": teacher_dev}


def cmd_eval(cfg):
    e = cfg.eval
    ref_path = _data_path(cfg, e.split)
    header = f"# config_hash={cfg.hash()} split={e.split}\n" + GAP_NOTE.rstrip("\n")
    if e.hypotheses:
        _require([("reference manifest", ref_path), ("hypothesis manifest", e.hypotheses)])
        ref = load_manifest(ref_path, check_files=False)
        hyp = load_manifest(e.hypotheses, check_files=False)
        if len(ref) != len(hyp):
            raise CommandError(f"hypothesis manifest has {len(hyp)} entries, reference has {len(ref)}")
        rows = [(Path(r.landmarks).stem, wer(r.gloss, h.gloss)) for r, h in zip(ref, hyp)]
    else:
        ckpt = e.checkpoint or str(Path(cfg.output_dir, "train.ckpt"))
        _require([("checkpoint", ckpt), ("reference manifest", ref_path)])
        model, vocab = _load_model(ckpt)
        samples = load_samples(load_manifest(ref_path, split=e.split), vocab)
        _, rows, _ = evaluate(model, samples, e.beam_width)
    total = rows[0][1]
    for _, b in rows[1:]:
        total = total + b
    report = format_report(rows, total, header)
    _out(cfg, "eval_report.txt").write_text(report)
    sys.stdout.write(report)
    return {"wer": total.wer, "report": str(_out(cfg, "eval_report.txt"))}


def _save_corrector(path, corrector, cfg):
    rec = corrector_arrays(corrector)
    rec["meta.vocab"] = archive.meta_tensor("\n".join(corrector.vocab.itos))
    rec["meta.corrector"] = archive.meta_tensor(json.dumps(corrector.config.to_dict(), sort_keys=True))
    rec["meta.config_hash"] = archive.meta_tensor(cfg.hash())
    archive.save(path, rec)


def _load_corrector(path):
    rec = archive.load(path)
    ccfg = CorrectorConfig(**json.loads(archive.meta_text(rec["meta.corrector"])))
    vocab = _vocab_from_meta(rec)
    return corrector_from_arrays({k: v for k, v in rec.items() if not k.startswith("meta.")}, vocab, ccfg)


def cmd_pretrain_corrector(cfg):
    c = cfg.corpus
    if c.path:
        _require([("corpus", c.path)])
        corpus = [ln.strip() for ln in open(c.path, encoding="utf-8") if ln.strip()]
    else:
        corpus = synth_gloss_corpus(cfg.seed, c.size)
    fh, log = _epoch_logger(cfg, _out(cfg, "corrector.log.jsonl"))
    try:
        corrector, _ = pretrain(corpus, cfg.corrector, seed=cfg.seed, log=log)
    finally:
        fh.close()
    _save_corrector(_out(cfg, "corrector.ckpt"), corrector, cfg)
    test = synth_gloss_corpus(cfg.seed + 1000, c.test_size)
    spec = CorruptionSpec.even(c.test_rate, vocab=tuple(corrector.vocab.itos[len(RESERVED):]),
                               window=cfg.corrector.shuffle_window)
    bad = [list(corrupt(s.split(), spec, seed=i).corrupted) for i, s in enumerate(test)]
    ref = [s.split() for s in test]
    with open(_out(cfg, "corrector_test_pairs.tsv"), "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={cfg.hash()}\n")
        for b, r in zip(bad, ref):
            fh.write(" ".join(b) + "\t" + " ".join(r) + "\n")
    report = {
        "config_hash": cfg.hash(),
        "test_rate": c.test_rate,
        "corrupted_wer": corpus_wer(zip(ref, bad)).wer,
        "single_stage_wer": corpus_wer(zip(ref, corrector.correct(bad, use_stage2=False))).wer,
    }
    if corrector.stage2 is not None:
        report["dual_stage_wer"] = corpus_wer(zip(ref, corrector.correct(bad, use_stage2=True))).wer
    _out(cfg, "corrector_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def cmd_correct(cfg):
    c = cfg.correct
    ckpt = c.checkpoint or str(Path(cfg.output_dir, "corrector.ckpt"))
    _require([("corrector checkpoint", ckpt), ("input text", c.input)])
    corrector = _load_corrector(ckpt)
    lines = [ln.rstrip("\n") for ln in open(c.input, encoding="utf-8")]
    live = [ln for ln in lines if ln.strip()]
    fixed = iter(corrector.correct(live, use_stage2=c.use_stage2)) if live else iter(())
    out = [" ".join(next(fixed)) if ln.strip() else "" for ln in lines]
    path = _out(cfg, "corrected.txt")
    path.write_text(f"# config_hash={cfg.hash()}\n" + "".join(ln + "\n" for ln in out))
    return {"output": str(path), "lines": len(out)}


def cmd_quantize(cfg):
    q = cfg.quant
    ckpt = q.checkpoint or str(Path(cfg.output_dir, "train.ckpt"))
    _require([("checkpoint", ckpt)])
    model, vocab = _load_model(ckpt)
    _require([("train manifest", _data_path(cfg, "train")), ("test manifest", _data_path(cfg, "test"))])
    calib = load_samples(load_manifest(_data_path(cfg, "train")), vocab)[: q.calibration_samples]
    test = load_samples(load_manifest(_data_path(cfg, "test")), vocab)
    ranges = quant.calibrate(model.params, model.config, calib)
    qm, size = quant.quantize_model(model.params, model.config, ranges)
    blob = quant.pack(qm)
    rec = archive.loads(blob)
    rec["meta.config_hash"] = archive.meta_tensor(cfg.hash())
    archive.save(_out(cfg, "model.q8"), rec)
    saturated, agree, frames, hyps = {}, 0, 0, []
    for s in test:
        o8 = quant.int8_forward(qm, s.seq, saturated)
        of = model(s.seq.data)
        a8, af = o8.lstm_logp.data.argmax(axis=1), of.lstm_logp.data.argmax(axis=1)
        agree += int(np.sum(a8 == af))
        frames += len(a8)
        hyps.append(greedy_decode(o8.lstm_logp.data))
    fp_wer = corpus_wer((s.target.tolist(), h) for s, h in zip(test, decode(model, test))).wer
    q8_wer = corpus_wer((s.target.tolist(), h) for s, h in zip(test, hyps)).wer
    fp_fps, q8_fps, ratio = quant.compare_throughput(model.params, model.config, qm, test, q.bench_repeats)
    default = bench.run_inference(repeats=1, n_inputs=1, seed=cfg.seed)
    report = {
        "config_hash": cfg.hash(),
        "fp32_checkpoint_bytes": quant.fp32_checkpoint_bytes(model.params),
        "int8_packed_bytes": size,
        "fp32_wer": fp_wer,
        "int8_wer": q8_wer,
        "frame_agreement": agree / max(frames, 1),
        "saturated": saturated,
        "fp32_fps": fp_fps,
        "int8_fps": q8_fps,
        "int8_over_fp32": ratio,
        "default_config_int8_mb": default["int8_bytes"] / 1e6,
        "reference_int8_mb": 12.93,
    }
    _out(cfg, "quant_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def cmd_bench(cfg):
    b = cfg.bench
    rows = bench.run_kernels(b.repeats, b.frames, cfg.seed)
    inf = bench.run_inference(b.repeats, b.frames, cfg.seed)
    print(bench.format_rows(rows))
    # published full-scale figure, for an order-of-magnitude comparison only
    report = {"config_hash": cfg.hash(), "kernels": rows, "inference": inf, "reference_flops": 4e8}
    _out(cfg, "bench.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


COMMANDS = OrderedDict(
    [
        ("synth", cmd_synth),
        ("augment", cmd_augment),
        ("train", cmd_train),
        ("distill", cmd_distill),
        ("eval", cmd_eval),
        ("pretrain-corrector", cmd_pretrain_corrector),
        ("correct", cmd_correct),
        ("quantize", cmd_quantize),
        ("bench", cmd_bench),
    ]
)


def build_parser():
    ap = argparse.ArgumentParser(prog="mslrkit", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. train.epochs=5 (repeatable)")
        p.add_argument("--out", help="shorthand for --set output_dir=DIR")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = list(args.set)
    if args.out:
        overrides.append(f"output_dir={json.dumps(args.out)}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        cfg = load(args.config, overrides)
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](cfg)
        _write_config(cfg, args.command)
    except ConfigError as exc:
        _fail(args.command, "invalid config", exc.violations)
        return 2
    except CommandError as exc:
        _fail(args.command, "cannot run", exc.problems)
        return 1
    except (OSError, ValueError) as exc:
        _fail(args.command, type(exc).__name__, [str(exc)])
        return 1
    print(json.dumps({"command": args.command, "status": "ok", "config_hash": cfg.hash(),
                      "result": _jsonable_tree(result)}, sort_keys=True))
    return 0


def _jsonable_tree(obj):
    if isinstance(obj, dict):
        return {k: _jsonable_tree(v) for k, v in obj.items()}
    return _jsonable(obj)


def _fail(command, kind, problems):
    print(json.dumps({"command": command, "status": "error", "kind": kind, "problems": problems}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
