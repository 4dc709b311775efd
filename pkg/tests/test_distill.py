import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mslrkit.distill import (
    KdWeights,
    TeacherFormatError,
    TeacherStreams,
    align_teacher,
    kd_kl,
    load_teacher,
    total_loss,
    write_teacher,
)
from mslrkit.model import MslrConfig, forward, init_params
from mslrkit.tensor import Tape, parameter
from mslrkit.tensor.gradcheck import check_gradients
from mslrkit.tensor.ops import log_softmax


def rand_probs(rng, T, V, scale=2.0):
    z = rng.normal(size=(T, V)) * scale
    p = np.exp(z - z.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(2, 7))
def test_kl_zero_on_equal_and_nonnegative(seed, T, V):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(T, V)) * 3
    s = log_softmax(z, axis=-1).data
    assert float(kd_kl(np.exp(s), s).data) == 0.0
    p, q = rand_probs(rng, T, V), rand_probs(rng, T, V)
    assert float(kd_kl(p, np.log(q)).data) >= 0.0


def test_kl_closed_form_and_asymmetry():
    assert float(kd_kl(np.array([[1.0, 0.0]]), np.log([[0.5, 0.5]])).data) == pytest.approx(np.log(2))
    p, q = np.array([[0.9, 0.1]]), np.array([[0.5, 0.5]])
    assert float(kd_kl(p, np.log(q)).data) != pytest.approx(float(kd_kl(q, np.log(p)).data))


def test_kl_matches_direct_formula():
    rng = np.random.default_rng(0)
    p, q = rand_probs(rng, 4, 5), rand_probs(rng, 4, 5)
    want = 0.7 * np.sum(p * (np.log(p) - np.log(q)))
    assert float(kd_kl(p, np.log(q), 0.7).data) == pytest.approx(want, rel=1e-12)


def test_kl_gradient_and_teacher_is_constant():
    rng = np.random.default_rng(1)
    teacher = rand_probs(rng, 3, 4)
    z = parameter(rng.normal(size=(3, 4)))
    assert check_gradients(lambda: kd_kl(teacher, log_softmax(z, axis=-1), 2.0), [z]) < 1e-4


def test_kl_rejects_bad_teacher():
    with pytest.raises(ValueError):
        kd_kl(np.full((2, 3), 0.5), np.log(np.full((2, 3), 1 / 3)))
    with pytest.raises(ValueError):
        kd_kl(np.full((2, 3), 1 / 3), np.zeros((2, 4)))


def test_teacher_file_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    s = TeacherStreams(rand_probs(rng, 5, 4), rand_probs(rng, 5, 4))
    write_teacher(tmp_path / "a.tch", s)
    back = load_teacher(tmp_path / "a.tch")
    np.testing.assert_allclose(back.conv, s.conv, atol=1e-6)
    np.testing.assert_allclose(back.lstm.sum(axis=1), 1.0, atol=1e-12)
    (tmp_path / "b.tch").write_bytes((tmp_path / "a.tch").read_bytes()[:-4])
    with pytest.raises(TeacherFormatError):
        load_teacher(tmp_path / "b.tch")
    (tmp_path / "c.tch").write_bytes(b"XXXX" + (tmp_path / "a.tch").read_bytes()[4:])
    with pytest.raises(TeacherFormatError):
        load_teacher(tmp_path / "c.tch")


def test_teacher_heads_must_match():
    with pytest.raises(TeacherFormatError):
        TeacherStreams(np.full((2, 3), 1 / 3), np.full((3, 3), 1 / 3))


@given(st.integers(1, 9), st.integers(1, 9))
def test_align_teacher_rows_sum_to_one(T, frames):
    rng = np.random.default_rng(T * 31 + frames)
    s = TeacherStreams(rand_probs(rng, T, 3), rand_probs(rng, T, 3))
    out = align_teacher(s, frames)
    assert out.frames == frames
    np.testing.assert_allclose(out.conv.sum(axis=1), 1.0, atol=1e-12)
    if frames == T:
        np.testing.assert_array_equal(out.conv, s.conv)


def _setup(seed=3):
    cfg = MslrConfig(input_dim=6, vocab_size=5, channels=(4, 4), strides=(1, 1), kernel_size=3, hidden=2)
    rng = np.random.default_rng(seed)
    out = forward(rng.normal(size=(6, 6)), init_params(cfg, seed), cfg)
    teacher = TeacherStreams(rand_probs(rng, 8, 5), rand_probs(rng, 8, 5))
    return out, teacher


def test_components_add_up_to_total():
    out, teacher = _setup()
    parts = total_loss(out, [1, 2], KdWeights(alpha=0.6, kd_ratio=25.0), teacher)
    d = parts.as_dict()
    assert abs(d["L_total"] - (d["L_CTC"] + d["L_c"] + d["L_b"] + d["L_s"])) < 1e-9
    assert min(d["L_c"], d["L_b"], d["L_s"]) > 0


def test_alpha_zero_leaves_pure_ctc():
    out, teacher = _setup()
    d = total_loss(out, [1, 2], KdWeights(alpha=0.0), teacher).as_dict()
    assert d["L_c"] == d["L_b"] == d["L_s"] == 0.0
    assert d["L_total"] == d["L_CTC"]


def test_no_teacher_means_zero_teacher_terms():
    out, _ = _setup()
    d = total_loss(out, [1, 2], KdWeights(alpha=1.0)).as_dict()
    assert d["L_c"] == d["L_b"] == 0.0 and d["L_s"] > 0


def test_teacher_vocabulary_mismatch():
    out, _ = _setup()
    rng = np.random.default_rng(0)
    bad = TeacherStreams(rand_probs(rng, 6, 4), rand_probs(rng, 6, 4))
    with pytest.raises(ValueError):
        total_loss(out, [1], KdWeights(), bad)


def test_self_term_does_not_push_the_lstm_head():
    cfg = MslrConfig(input_dim=4, vocab_size=4, channels=(3,), strides=(1,), kernel_size=3, hidden=2)
    params = init_params(cfg, 0)
    x = np.random.default_rng(1).normal(size=(5, 4))
    weights = KdWeights(alpha=1.0, use_conv=False, use_lstm=False)
    with Tape() as tape:
        out = forward(x, params, cfg)
        from mslrkit.distill import kd_self

        loss = kd_self(out.lstm_probs, out.conv_logp)
    tape.backward(loss)
    # the BiLSTM weights only feed the teacher side, so they get no gradient
    assert np.all(params["lstm.fwd.w_hh"].grad == 0)
    assert np.any(params["conv0.w"].grad != 0)
    assert weights.violations() == []


def test_weights_validation():
    assert len(KdWeights(alpha=-1, kd_ratio=-1, temperature=0).violations()) == 3


def test_equal_heads_as_teacher_reduce_to_ctc():
    from mslrkit.model import MslrOutputs
    from mslrkit.tensor import Tensor
    from mslrkit.tensor.ops import softmax_logsoftmax

    z = np.random.default_rng(4).normal(size=(5, 4))
    p, lp = softmax_logsoftmax(Tensor(z))
    out = MslrOutputs(p, lp, p, lp)
    teacher = TeacherStreams(p.data, p.data)
    d = total_loss(out, [1, 3], KdWeights(alpha=1.0), teacher).as_dict()
    assert d["L_total"] == d["L_CTC"]
