import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mslrkit import cli
from mslrkit.config import ConfigError, apply_overrides, from_dict, load
from mslrkit.tensor import archive

TINY = {
    "synth": {"train_samples": 6, "dev_samples": 3, "test_samples": 3, "vocab_size": 4},
    "model": {"channels": [8, 8], "strides": [1, 2], "hidden": 4},
    "train": {"epochs": 2, "batch_size": 3, "lr": 0.003},
    "teacher": {"channels": [8, 8], "hidden": 4, "epochs": 1},
    "corrector": {"epochs": 1, "batch_size": 8,
                  "stage": {"enc_layers": 2, "dec_layers": 1, "width": 8, "heads": 2, "ff": 8}},
    "corpus": {"size": 16, "test_size": 8},
    "quant": {"calibration_samples": 2, "bench_repeats": 1},
    "bench": {"repeats": 1, "frames": 16},
}


def test_seed_is_required():
    with pytest.raises(ConfigError) as exc:
        from_dict({})
    assert any("seed" in v for v in exc.value.violations)


def test_every_violation_is_listed():
    tree = {"seed": -1, "bogus": {}, "model": {"kernel_size": 4, "colour": 1}, "train": {"epochs": 0, "lr": 0},
            "kd": {"alpha": -1}, "eval": {"beam_width": 0}}
    with pytest.raises(ConfigError) as exc:
        from_dict(tree)
    v = exc.value.violations
    for needle in ("seed", "bogus", "model.colour", "kernel_size", "train.epochs", "train.lr", "kd.alpha", "beam_width"):
        assert any(needle in s for s in v), needle


def test_missing_input_paths_are_violations(tmp_path):
    with pytest.raises(ConfigError) as exc:
        from_dict({"seed": 0, "data": {"train": str(tmp_path / "nope.tsv")}, "quant": {"checkpoint": "/x/y"}})
    assert len(exc.value.violations) == 2


def test_overrides_parse_json_and_nest():
    tree = apply_overrides({"seed": 1}, ["train.epochs=3", "model.channels=[4,4]", "model.strides=[1,2]", "output_dir=runs/x", "eval.split=dev"])
    assert tree["train"]["epochs"] == 3 and tree["model"]["channels"] == [4, 4]
    assert tree["output_dir"] == "runs/x" and tree["eval"]["split"] == "dev"
    cfg = from_dict(tree)
    assert cfg.model.channels == (4, 4)
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


def test_hash_is_stable_and_sensitive(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3}))
    a, b = load(p), load(p)
    assert a.hash() == b.hash() and len(a.hash()) == 16
    assert load(p, ["train.lr=0.01"]).hash() != a.hash()


def test_invalid_json_is_a_config_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{")
    with pytest.raises(ConfigError):
        load(p)


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    conf = root / "tiny.json"
    conf.write_text(json.dumps({"seed": 0, "output_dir": str(root / "out"), **TINY}))
    for cmd in ("synth", "train"):
        assert cli.main([cmd, "--config", str(conf)]) == 0
    return root, conf


def test_cli_exit_codes(capsys, tmp_path):
    code, out = run_cli(capsys, "train", "--set", "train.epochs=0")
    assert code == 2
    err = json.loads(out.err)
    assert err["status"] == "error" and len(err["problems"]) >= 2  # seed missing, epochs invalid
    code, out = run_cli(capsys, "eval", "--seed", "0", "--out", str(tmp_path / "empty"))
    assert code == 1 and "missing" in out.err


def test_train_replay_is_bit_identical(pipeline, capsys):
    root, conf = pipeline
    out = root / "out"
    first = (out / "train.ckpt").read_bytes()
    log1 = (out / "train.log.jsonl").read_text()
    assert cli.main(["train", "--config", str(conf)]) == 0
    assert (out / "train.ckpt").read_bytes() == first
    assert (out / "train.log.jsonl").read_text() == log1


def test_log_has_one_line_per_epoch(pipeline):
    root, _ = pipeline
    lines = [json.loads(l) for l in (root / "out" / "train.log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [1, 2]
    for r in lines:
        assert {"L_total", "L_c", "L_b", "L_s", "L_CTC", "dev_wer", "config_hash"} <= set(r)


def test_distill_alpha_zero_logs_zero_kd(pipeline, capsys):
    root, conf = pipeline
    out = root / "a0"
    code, _ = run_cli(capsys, "distill", "--config", str(conf), "--set", "kd.alpha=0",
                      "--set", f"data.train={json.dumps(str(root / 'out/data/train.tsv'))}",
                      "--set", f"data.dev={json.dumps(str(root / 'out/data/dev.tsv'))}",
                      "--set", f"data.vocab={json.dumps(str(root / 'out/data/vocab.txt'))}",
                      "--out", str(out))
    assert code == 0
    for line in (out / "distill.log.jsonl").read_text().splitlines():
        r = json.loads(line)
        assert r["L_c"] == r["L_b"] == r["L_s"] == 0.0
    assert len(list((out / "teachers").glob("*.tch"))) == 6


def test_eval_with_reference_as_hypothesis(pipeline, capsys):
    root, conf = pipeline
    ref = root / "out" / "data" / "test.tsv"
    code, out = run_cli(capsys, "eval", "--config", str(conf), "--set", f"eval.hypotheses={json.dumps(str(ref))}")
    assert code == 0
    report = (root / "out" / "eval_report.txt").read_text()
    assert report.splitlines()[-1].endswith("wer=0.000000")
    assert "PHOENIX14" in report


def test_eval_checkpoint(pipeline, capsys):
    root, conf = pipeline
    code, out = run_cli(capsys, "eval", "--config", str(conf), "--set", "eval.beam_width=2")
    assert code == 0
    assert json.loads(out.out.splitlines()[-1])["status"] == "ok"


def test_augment_quantize_corrector_bench(pipeline, capsys):
    root, conf = pipeline
    out = root / "out"
    for cmd in ("augment", "quantize", "pretrain-corrector", "bench"):
        code, o = run_cli(capsys, cmd, "--config", str(conf))
        assert code == 0, o.err
    q = json.loads((out / "quant_report.json").read_text())
    assert q["reference_int8_mb"] == 12.93 and q["int8_packed_bytes"] > 0
    assert {"corrupted_wer", "single_stage_wer", "dual_stage_wer"} <= set(json.loads((out / "corrector_report.json").read_text()))
    pairs = (out / "corrector_test_pairs.tsv").read_text().splitlines()
    assert pairs[0].startswith("# config_hash=") and all(l.count("\t") == 1 for l in pairs[1:])
    text = root / "in.txt"
    text.write_text("today north rain\n\nSUN sun coast\n")
    code, o = run_cli(capsys, "correct", "--config", str(conf), "--set", f"correct.input={json.dumps(str(text))}")
    assert code == 0
    lines = (out / "corrected.txt").read_text().splitlines()
    assert lines[0].startswith("# config_hash=") and len(lines) == 4 and lines[2] == ""


def test_every_artifact_carries_the_hash(pipeline):
    root, _ = pipeline
    out = root / "out"
    cfgs = {p.name: json.loads(p.read_text()) for p in out.glob("config.*.json")}
    h = cfgs["config.train.json"]["config_hash"]
    assert archive.meta_text(archive.load(out / "train.ckpt")["meta.config_hash"]) == h
    assert all(json.loads(l)["config_hash"] == h for l in (out / "train.log.jsonl").read_text().splitlines())
    assert (out / "data" / "config_hash.txt").read_text().strip() == cfgs["config.synth.json"]["config_hash"]
    if "config.quantize.json" in cfgs:
        hq = cfgs["config.quantize.json"]["config_hash"]
        assert archive.meta_text(archive.load(out / "model.q8")["meta.config_hash"]) == hq
        assert json.loads((out / "bench.json").read_text())["config_hash"] == cfgs["config.bench.json"]["config_hash"]
    for p in (out / "augmented").glob("plans.jsonl"):
        assert all("config_hash" in json.loads(l) for l in p.read_text().splitlines())


def test_disable_numba_flag_switches_backend():
    code = (
        "import numpy as np\n"
        "from mslrkit._accel import backend_name\n"
        "from mslrkit import kernels\n"
        "from mslrkit.metrics import wer\n"
        "print(backend_name(), wer('a b c d', 'a x c').wer)\n"
    )
    env = dict(os.environ, MSLRKIT_DISABLE_NUMBA="1")
    got = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert got.stdout.split() == ["numpy", "0.5"]
