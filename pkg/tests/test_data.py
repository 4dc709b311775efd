import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mslrkit.data import (
    RESERVED,
    UNK,
    LandmarkFormatError,
    LandmarkSequence,
    ManifestEntry,
    ManifestError,
    Vocabulary,
    build_vocab,
    check_glosses,
    gloss_motif,
    load_landmarks,
    load_manifest,
    load_samples,
    load_splits,
    synth_dataset,
    write_landmarks,
    write_manifest,
)


@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_landmark_file_round_trip(T, F, C, seed):
    import tempfile

    data = np.random.default_rng(seed).normal(size=(T, F * C)).astype(np.float32)
    seq = LandmarkSequence(data, F, C, "x")
    with tempfile.TemporaryDirectory() as d:
        path = f"{d}/s.lmk"
        write_landmarks(path, seq)
        back = load_landmarks(path)
    assert (back.frames, back.keypoints, back.coords) == (T, F, C)
    np.testing.assert_array_equal(back.data, data)
    assert back.sample_id == "s"


def test_points_view_is_keypoint_major():
    data = np.arange(12, dtype=np.float64).reshape(2, 6)
    seq = LandmarkSequence(data, 2, 3)
    assert seq.points()[0, 1].tolist() == [3.0, 4.0, 5.0]


def test_sequence_is_read_only():
    seq = LandmarkSequence(np.zeros((2, 3)), 1, 3)
    with pytest.raises(ValueError):
        seq.data[0, 0] = 1.0


@pytest.mark.parametrize(
    "data,F,C",
    [(np.zeros((0, 3)), 1, 3), (np.zeros((2, 4)), 1, 3), (np.zeros(3), 1, 3), (np.array([[0, np.nan, 0]]), 1, 3)],
)
def test_sequence_validation(data, F, C):
    with pytest.raises(ValueError):
        LandmarkSequence(data, F, C)


def _write_raw(path, header, payload):
    with open(path, "wb") as fh:
        fh.write(b"LMK1" + struct.pack("<III", *header) + np.asarray(payload, dtype="<f4").tobytes())


def test_load_rejects_bad_files(tmp_path):
    p = tmp_path / "a.lmk"
    p.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(LandmarkFormatError, match="magic"):
        load_landmarks(p)
    _write_raw(p, (3, 1, 2), np.zeros(4))
    with pytest.raises(LandmarkFormatError, match="T=3"):
        load_landmarks(p)
    _write_raw(p, (2, 1, 2), [0, 0, 1, np.inf])
    with pytest.raises(LandmarkFormatError, match="frame 1"):
        load_landmarks(p)
    _write_raw(p, (0, 1, 2), [])
    with pytest.raises(LandmarkFormatError):
        load_landmarks(p)


def test_vocabulary_reserved_ids_and_unknowns(tmp_path):
    v = Vocabulary(["B", "A", "B"])
    assert v.itos[: len(RESERVED)] == list(RESERVED)
    assert v.encode("A B C") == [6, 5, UNK]
    assert v.decode([5, 6]) == "B A"
    v.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt") == v
    assert list(v.gloss_ids) == [5, 6]


def test_vocabulary_file_duplicates_rejected(tmp_path):
    (tmp_path / "v.txt").write_text("A\nA\n")
    with pytest.raises(ValueError):
        Vocabulary.load(tmp_path / "v.txt")


def test_build_vocab_first_occurrence_order():
    v = build_vocab(["b a", "c a"])
    assert v.itos[len(RESERVED):] == ["b", "a", "c"]
    with pytest.raises(ValueError):
        build_vocab([])


def test_check_glosses():
    assert check_glosses([5, 6], 7).tolist() == [5, 6]
    with pytest.raises(ValueError):
        check_glosses([7], 7)
    with pytest.raises(ValueError):
        check_glosses([0, 5], 7)


def test_manifest_round_trip_and_missing_files(tmp_path):
    write_landmarks(tmp_path / "a.lmk", LandmarkSequence(np.zeros((2, 3)), 1, 3))
    entries = [ManifestEntry("a.lmk", "X Y"), ManifestEntry("a.lmk", "Y", "t.tch")]
    write_manifest(tmp_path / "m.tsv", entries)
    m = load_manifest(tmp_path / "m.tsv", check_files=False)
    assert m.entries == entries and m.split == "m"
    with pytest.raises(ManifestError, match="t.tch"):
        load_manifest(tmp_path / "m.tsv")
    with pytest.raises(ManifestError):
        write_manifest(tmp_path / "bad.tsv", [ManifestEntry("a\tb", "X")])
    (tmp_path / "bad.tsv").write_text("only-one-field\n")
    with pytest.raises(ManifestError, match="2 or 3"):
        load_manifest(tmp_path / "bad.tsv", check_files=False)


def test_load_splits_names(tmp_path):
    write_manifest(tmp_path / "m.tsv", [])
    out = load_splits({"train": str(tmp_path / "m.tsv"), "dev": str(tmp_path / "m.tsv")})
    assert set(out) == {"train", "dev"} and out["dev"].split == "dev"


def test_synth_dataset_is_deterministic(tmp_path):
    m1, v1 = synth_dataset(tmp_path / "a", seed=3, num_samples=4, vocab_size=5)
    m2, v2 = synth_dataset(tmp_path / "b", seed=3, num_samples=4, vocab_size=5)
    s1 = load_samples(load_manifest(m1), v1)
    s2 = load_samples(load_manifest(m2), v2)
    assert v1 == v2
    for a, b in zip(s1, s2):
        np.testing.assert_array_equal(a.seq.data, b.seq.data)
        np.testing.assert_array_equal(a.target, b.target)
        assert a.seq.frames == 8 * len(a.target)


def test_synth_dataset_validation_lists_all_problems(tmp_path):
    with pytest.raises(ValueError) as exc:
        synth_dataset(tmp_path, seed=0, num_samples=0, vocab_size=1, noise=-1)
    msg = str(exc.value)
    assert "vocab_size" in msg and "num_samples" in msg and "noise" in msg


def test_gloss_motifs_are_distinct_and_fixed():
    a, b = gloss_motif(0, 8), gloss_motif(1, 8)
    assert a.shape == (8, 276)
    assert np.abs(a - b).mean() > 0.05
    np.testing.assert_array_equal(a, gloss_motif(0, 8))
