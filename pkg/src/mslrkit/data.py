"""Landmark sequences, vocabularies, manifests and the synthetic corpus generator.

File formats
------------
``LMK1`` landmark file (little-endian)::

    b"LMK1" | T u32 | F u32 | C u32 | T*F*C float32, frame-major

Within a frame, values are keypoint-major: ``[k0.x, k0.y, k0.z, k1.x, ...]``.

Manifest: UTF-8 text, one sample per line,
``landmark_path<TAB>gloss text[<TAB>teacher_path]``. Relative paths resolve
against the manifest's directory.

Vocabulary file: one token per line; line ``i`` holds id ``len(RESERVED) + i``.
"""
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LMK_MAGIC = b"LMK1"
DEFAULT_KEYPOINTS = 92
DEFAULT_COORDS = 3  # 92 * 3 = 276 values per frame

BLANK, UNK, PAD, BOS, EOS = 0, 1, 2, 3, 4
RESERVED = ("<blank>", "<unk>", "<pad>", "<bos>", "<eos>")


class LandmarkFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# landmark sequences
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LandmarkSequence:
    data: np.ndarray
    keypoints: int
    coords: int
    sample_id: str = ""

    def __post_init__(self):
        arr = np.asarray(self.data)
        arr = np.array(arr, dtype=np.float32 if arr.dtype == np.float32 else np.float64)
        if arr.ndim != 2:
            raise ValueError(f"landmark data must be 2-D [T, F*C], got shape {arr.shape}")
        if self.keypoints < 1 or self.coords < 1:
            raise ValueError("keypoints and coords must be positive")
        if arr.shape[0] < 1:
            raise ValueError("sequence needs at least one frame")
        if arr.shape[1] != self.keypoints * self.coords:
            raise ValueError(f"row width {arr.shape[1]} != F*C = {self.keypoints * self.coords}")
        bad = ~np.isfinite(arr).all(axis=1)
        if bad.any():
            raise ValueError(f"non-finite coordinate in frame {int(np.argmax(bad))}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def frames(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    def points(self):
        """View as ``[T, F, C]``."""
        return self.data.reshape(self.frames, self.keypoints, self.coords)

    def replace(self, data):
        return LandmarkSequence(np.asarray(data).reshape(len(data), -1), self.keypoints, self.coords, self.sample_id)


def write_landmarks(path, seq):
    data = np.ascontiguousarray(seq.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(LMK_MAGIC)
        fh.write(struct.pack("<III", seq.frames, seq.keypoints, seq.coords))
        fh.write(data.tobytes())


def load_landmarks(path, sample_id=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != LMK_MAGIC:
        raise LandmarkFormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 16:
        raise LandmarkFormatError(f"{path}: truncated header")
    T, F, C = struct.unpack_from("<III", blob, 4)
    row = F * C
    if T < 1 or row < 1:
        raise LandmarkFormatError(f"{path}: degenerate header T={T} F={F} C={C}")
    payload = len(blob) - 16
    if payload % (4 * row):
        raise LandmarkFormatError(f"{path}: payload of {payload} bytes is not a whole number of {row}-value frames")
    rows = payload // (4 * row)
    if rows != T:
        raise LandmarkFormatError(f"{path}: header claims T={T} frames but file holds {rows}")
    data = np.frombuffer(blob, dtype="<f4", offset=16).reshape(T, row).astype(np.float32)
    bad = ~np.isfinite(data).all(axis=1)
    if bad.any():
        raise LandmarkFormatError(f"{path}: non-finite value in frame {int(np.argmax(bad))}")
    sid = Path(path).stem if sample_id is None else sample_id
    return LandmarkSequence(data, F, C, sid)


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

class Vocabulary:
    """Token/id bijection with the reserved ids fixed at the front."""

    def __init__(self, tokens=()):
        self.itos = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, tok):
        if tok not in self.stoi:
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)
        return self.stoi[tok]

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def __contains__(self, tok):
        return tok in self.stoi

    @property
    def gloss_ids(self):
        return range(len(RESERVED), len(self.itos))

    def encode(self, text):
        toks = text.split() if isinstance(text, str) else list(text)
        return [self.stoi.get(t, UNK) for t in toks]

    def decode(self, ids):
        return " ".join(self.itos[i] for i in ids)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.itos[len(RESERVED):]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            toks = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        vocab = cls(toks)
        if len(vocab) != len(RESERVED) + len(toks):
            raise ValueError(f"{path}: duplicate tokens")
        return vocab


def build_vocab(corpus):
    """Reserved ids first, then tokens in first-occurrence order."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    vocab = Vocabulary()
    for line in corpus:
        for tok in line.split():
            vocab.add(tok)
    return vocab


def check_glosses(ids, vocab_size):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ValueError(f"gloss id out of range [0, {vocab_size})")
    if np.any(ids == BLANK):
        raise ValueError("gloss sequence contains the blank id")
    return ids


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    landmarks: str
    gloss: str
    teacher: str = None


@dataclass
class DatasetManifest:
    split: str
    entries: list = field(default_factory=list)
    root: str = "."

    def resolve(self, rel):
        return rel if os.path.isabs(rel) else os.path.join(self.root, rel)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            cols = [e.landmarks, e.gloss] + ([e.teacher] if e.teacher else [])
            if any("\t" in c or "\n" in c for c in cols):
                raise ManifestError(f"tab or newline inside manifest field: {cols!r}")
            fh.write("\t".join(cols) + "\n")


def load_manifest(path, split=None, check_files=True):
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    missing = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) not in (2, 3):
                raise ManifestError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields, got {len(cols)}")
            entry = ManifestEntry(cols[0], cols[1], cols[2] if len(cols) == 3 and cols[2] else None)
            entries.append(entry)
            if check_files:
                for rel in (entry.landmarks, entry.teacher):
                    if rel and not os.path.exists(rel if os.path.isabs(rel) else os.path.join(root, rel)):
                        missing.append(f"{path}:{lineno}: missing file {rel}")
    if missing:
        raise ManifestError("; ".join(missing))
    return DatasetManifest(split or Path(path).stem, entries, root)


def load_splits(paths):
    """``{split_name: manifest_path}`` -> ``{split_name: DatasetManifest}``."""
    if len(set(paths)) != len(paths):
        raise ManifestError("split names must be unique")
    return {name: load_manifest(p, split=name) for name, p in paths.items()}


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def gloss_name(index):
    return f"G{index:03d}"


def gloss_motif(index, frames, keypoints=DEFAULT_KEYPOINTS, coords=DEFAULT_COORDS):
    """Deterministic ``[frames, F*C]`` trajectory template for gloss ``index``.

    Each keypoint coordinate oscillates around a fixed rest position with a
    gloss-specific frequency, phase and amplitude; coordinates stay in
    roughly ``[0, 1]`` like normalised camera landmarks.
    """
    rng = np.random.default_rng([0x4C4D4B, index, keypoints, coords])
    rest = rng.uniform(0.3, 0.7, size=(keypoints, coords))
    amp = rng.uniform(0.05, 0.2, size=(keypoints, coords))
    phase = rng.uniform(0, 2 * np.pi, size=(keypoints, coords))
    freq = 0.5 + 0.5 * (index % 4) + rng.uniform(0, 0.5)
    tau = np.arange(frames)[:, None, None] / max(frames, 1)
    traj = rest + amp * np.sin(2 * np.pi * freq * tau + phase)
    return traj.reshape(frames, keypoints * coords)


def synth_sample(glosses, frames_per_gloss, noise, rng, keypoints=DEFAULT_KEYPOINTS, coords=DEFAULT_COORDS):
    parts = [gloss_motif(g, frames_per_gloss, keypoints, coords) for g in glosses]
    data = np.concatenate(parts, axis=0)
    if noise > 0:
        data = data + rng.normal(0.0, noise, size=data.shape)
    return data.astype(np.float32)


def synth_dataset(
    out_dir,
    seed,
    num_samples,
    vocab_size,
    frames_per_gloss=8,
    noise=0.05,
    min_glosses=1,
    max_glosses=4,
    keypoints=DEFAULT_KEYPOINTS,
    coords=DEFAULT_COORDS,
    split="train",
):
    """Write ``num_samples`` LMK1 files, a manifest and a vocabulary file.

    Gloss ``i`` of the vocabulary is rendered by :func:`gloss_motif` with
    index ``i``, so splits generated with different seeds share motifs.
    Returns ``(manifest_path, vocab)``.
    """
    errors = []
    if vocab_size < 2:
        errors.append("vocab_size must be >= 2")
    if num_samples < 1:
        errors.append("num_samples must be >= 1")
    if frames_per_gloss < 1:
        errors.append("frames_per_gloss must be >= 1")
    if noise < 0:
        errors.append("noise must be >= 0")
    if not 1 <= min_glosses <= max_glosses:
        errors.append("need 1 <= min_glosses <= max_glosses")
    if errors:
        raise ValueError("; ".join(errors))

    out = Path(out_dir)
    (out / split).mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary(gloss_name(i) for i in range(vocab_size))
    vocab.save(out / "vocab.txt")
    rng = np.random.default_rng(seed)
    entries = []
    for n in range(num_samples):
        length = int(rng.integers(min_glosses, max_glosses + 1))
        glosses = rng.integers(0, vocab_size, size=length)
        data = synth_sample(glosses, frames_per_gloss, noise, rng, keypoints, coords)
        sid = f"{split}_{n:05d}"
        rel = f"{split}/{sid}.lmk"
        write_landmarks(out / rel, LandmarkSequence(data, keypoints, coords, sid))
        entries.append(ManifestEntry(rel, " ".join(gloss_name(g) for g in glosses)))
    manifest = out / f"{split}.tsv"
    write_manifest(manifest, entries)
    return str(manifest), vocab


@dataclass
class Sample:
    seq: LandmarkSequence
    target: np.ndarray
    teacher: str = None


def load_samples(manifest, vocab):
    out = []
    for e in manifest:
        seq = load_landmarks(manifest.resolve(e.landmarks))
        target = np.asarray(vocab.encode(e.gloss), dtype=np.int64)
        out.append(Sample(seq, target, manifest.resolve(e.teacher) if e.teacher else None))
    return out
