"""One JSON run configuration for every CLI command, plus ``--set`` overrides."""
import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields

from .augment import AugmentPolicy
from .distill import KdWeights
from .model import MslrConfig
from .textcorr import CorrectorConfig, StageConfig
from .train import TrainConfig


class ConfigError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass
class SynthConfig:
    train_samples: int = 60
    dev_samples: int = 20
    test_samples: int = 20
    vocab_size: int = 10
    frames_per_gloss: int = 8
    noise: float = 0.05
    min_glosses: int = 1
    max_glosses: int = 4


@dataclass
class DataConfig:
    train: str = None
    dev: str = None
    test: str = None
    vocab: str = None


@dataclass
class TeacherConfig:
    """The stronger model that ``distill`` trains when no teacher files exist."""

    channels: tuple = (64, 64, 64, 64)
    hidden: int = 64
    epochs: int = 40
    lr: float = 3e-3
    checkpoint: str = None


@dataclass
class CorpusConfig:
    path: str = None
    size: int = 500
    test_size: int = 300
    test_rate: float = 0.2


@dataclass
class EvalConfig:
    checkpoint: str = None
    split: str = "test"
    beam_width: int = 1
    hypotheses: str = None


@dataclass
class QuantConfig:
    checkpoint: str = None
    calibration_samples: int = 16
    bench_repeats: int = 3


@dataclass
class BenchConfig:
    repeats: int = 5
    frames: int = 200


@dataclass
class CorrectConfig:
    checkpoint: str = None
    input: str = None
    use_stage2: bool = True


SECTIONS = {
    "synth": SynthConfig,
    "data": DataConfig,
    "model": MslrConfig,
    "augment": AugmentPolicy,
    "kd": KdWeights,
    "train": TrainConfig,
    "teacher": TeacherConfig,
    "corrector": CorrectorConfig,
    "corpus": CorpusConfig,
    "eval": EvalConfig,
    "quant": QuantConfig,
    "correct": CorrectConfig,
    "bench": BenchConfig,
}


def _to_plain(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _to_plain(v) for k, v in asdict(obj).items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


@dataclass
class RunConfig:
    seed: int = None
    output_dir: str = "runs/default"
    sections: dict = field(default_factory=dict)

    def __getattr__(self, name):
        secs = self.__dict__.get("sections", {})
        if name in secs:
            return secs[name]
        raise AttributeError(name)

    def to_dict(self):
        out = {"seed": self.seed, "output_dir": self.output_dir}
        for name in SECTIONS:
            out[name] = _to_plain(self.sections[name])
        return out

    def canonical(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def violations(self):
        errs = []
        if self.seed is None:
            errs.append("seed is required (no implicit entropy)")
        elif not isinstance(self.seed, int) or self.seed < 0:
            errs.append(f"seed must be a non-negative integer, got {self.seed!r}")
        for name in ("model", "augment", "kd", "train", "corrector"):
            errs.extend(self.sections[name].violations())
        s = self.sections["synth"]
        if min(s.train_samples, s.dev_samples, s.test_samples) < 1:
            errs.append("synth sample counts must be >= 1")
        if s.vocab_size < 2:
            errs.append("synth.vocab_size must be >= 2")
        if s.noise < 0:
            errs.append("synth.noise must be >= 0")
        if not 1 <= s.min_glosses <= s.max_glosses:
            errs.append("synth needs 1 <= min_glosses <= max_glosses")
        if self.sections["eval"].beam_width < 1:
            errs.append("eval.beam_width must be >= 1")
        if self.sections["eval"].split not in ("train", "dev", "test"):
            errs.append("eval.split must be train, dev or test")
        if self.sections["quant"].calibration_samples < 1:
            errs.append("quant.calibration_samples must be >= 1")
        errs.extend(self._missing_paths())
        c = self.sections["corpus"]
        if c.size < 1 or c.test_size < 1 or not 0 <= c.test_rate < 1:
            errs.append("corpus sizes must be >= 1 and test_rate in [0, 1)")
        return errs

    def _missing_paths(self):
        # only explicitly configured inputs; derived defaults are checked when a command runs
        keys = [("data", k) for k in ("train", "dev", "test", "vocab")] + [
            ("teacher", "checkpoint"), ("corpus", "path"), ("eval", "checkpoint"), ("eval", "hypotheses"),
            ("quant", "checkpoint"), ("correct", "checkpoint"), ("correct", "input"),
        ]
        errs = []
        for sec, key in keys:
            path = getattr(self.sections[sec], key)
            if path and not os.path.exists(path):
                errs.append(f"{sec}.{key}: no such file {path}")
        return errs


def _build_section(name, cls, values, errs):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    for k in unknown:
        errs.append(f"unknown key {name}.{k}")
    kwargs = {k: v for k, v in values.items() if k in known}
    if cls is CorrectorConfig and isinstance(kwargs.get("stage"), dict):
        stage_known = {f.name for f in fields(StageConfig)}
        for k in sorted(set(kwargs["stage"]) - stage_known):
            errs.append(f"unknown key corrector.stage.{k}")
        kwargs["stage"] = StageConfig(**{k: v for k, v in kwargs["stage"].items() if k in stage_known})
    for k, v in list(kwargs.items()):
        if isinstance(v, list):
            kwargs[k] = tuple(v) if k != "flip_map" else list(v)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        errs.append(f"{name}: {exc}")
        return cls()


def parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(tree, overrides):
    """Apply ``a.b.c=value`` strings to a nested dict; values parse as JSON when they can."""
    tree = copy.deepcopy(tree)
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not key=value"])
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = tree
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError([f"override {key!r} descends into a non-table value"])
        node[parts[-1]] = parse_value(raw)
    return tree


def from_dict(tree):
    """Build a :class:`RunConfig`; raises :class:`ConfigError` listing every problem."""
    errs = []
    tree = dict(tree)
    seed = tree.pop("seed", None)
    output_dir = tree.pop("output_dir", "runs/default")
    for k in sorted(set(tree) - set(SECTIONS)):
        errs.append(f"unknown section {k}")
    sections = {}
    for name, cls in SECTIONS.items():
        values = tree.get(name) or {}
        if not isinstance(values, dict):
            errs.append(f"section {name} must be a table")
            values = {}
        sections[name] = _build_section(name, cls, values, errs)
    cfg = RunConfig(seed, str(output_dir), sections)
    errs.extend(cfg.violations())
    if errs:
        raise ConfigError(errs)
    return cfg


def load(path=None, overrides=()):
    tree = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            try:
                tree = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
    return from_dict(apply_overrides(tree, overrides))
