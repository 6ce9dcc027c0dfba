import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rticlab import numkernel as nk
from rticlab.encoders import (ImageProjectorConfig, TextEncoderConfig, TextVariant, embed,
                              gru_forward, gru_params, image_project, image_projector_params,
                              lstm_forward, lstm_params, swem_encode, text_encode,
                              text_encoder_params, text_pool)
from rticlab.numkernel import ShapeError, Tensor


def _zero(params):
    for t in params.values():
        t.value[...] = 0.0
    return params


def test_embed_shape_and_repeats():
    table = Tensor(np.arange(12.0).reshape(4, 3))
    E = embed([2, 0, 2], table)
    assert E.shape == (3, 3)
    np.testing.assert_array_equal(E.value[0], E.value[2])


def test_embed_gradient_counts_uses():
    table = Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
    with nk.Tape() as tape:
        tape.backward(nk.reduce_sum(embed([2, 0, 2], table)))
    np.testing.assert_array_equal(table.grad[:, 0], [1, 0, 2, 0])
    assert nk.finite_diff_check(lambda: nk.reduce_sum(nk.tanh(embed([2, 0, 2], table))),
                                [table]) < 1e-6


def test_swem_hand_example():
    out = swem_encode(Tensor([[1.0, 3.0], [2.0, 0.0]]), [1, 1])
    np.testing.assert_array_equal(out.value, [1.5, 1.5, 2.0, 3.0])


def test_swem_single_row_and_padding():
    r = np.array([0.3, -1.2])
    np.testing.assert_array_equal(swem_encode(Tensor([r]), [1]).value, np.concatenate([r, r]))
    padded = swem_encode(Tensor([r, [99.0, 99.0]]), [1, 0])
    np.testing.assert_array_equal(padded.value, np.concatenate([r, r]))


def test_gru_zero_weights_is_fixed_point():
    p = _zero(gru_params("g", 3, 4, 2, np.random.default_rng(0)))
    E = Tensor(np.random.default_rng(1).normal(size=(5, 3)))
    np.testing.assert_array_equal(gru_forward(E, np.ones(5), p, "g").value, 0.0)


def test_lstm_zero_weights_is_fixed_point():
    p = _zero(lstm_params("l", 3, 4, 2, np.random.default_rng(0)))
    E = Tensor(np.random.default_rng(1).normal(size=(5, 3)))
    np.testing.assert_array_equal(lstm_forward(E, np.ones(5), p, "l").value, 0.0)


def test_gru_one_step_by_hand():
    # scalar GRU: input x=0.5, h0=0
    w_ir, w_iz, w_in = 0.4, -0.3, 0.8
    b_ir, b_iz, b_in = 0.1, 0.2, -0.1
    b_hr, b_hz, b_hn = 0.0, 0.05, 0.3
    p = {"g.l0.W_ih": Tensor([[w_ir, w_iz, w_in]]), "g.l0.W_hh": Tensor([[0.7, 0.7, 0.7]]),
         "g.l0.b_ih": Tensor([b_ir, b_iz, b_in]), "g.l0.b_hh": Tensor([b_hr, b_hz, b_hn])}
    x = 0.5
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    r = sig(w_ir * x + b_ir + b_hr)
    z = sig(w_iz * x + b_iz + b_hz)
    n = np.tanh(w_in * x + b_in + r * b_hn)
    h1 = (1 - z) * n
    out = gru_forward(Tensor([[x]]), [1], p, "g")
    assert abs(out.value[0] - h1) < 1e-15


def test_recurrent_padding_is_ignored():
    rng = np.random.default_rng(2)
    for make, fwd in ((gru_params, gru_forward), (lstm_params, lstm_forward)):
        p = make("t", 3, 4, 2, rng)
        E = rng.normal(size=(4, 3))
        short = fwd(Tensor(E[:3]), np.ones(3), p, "t").value
        padded = fwd(Tensor(E), [1, 1, 1, 0], p, "t").value
        np.testing.assert_array_equal(short, padded)


def test_gru_hidden_state_is_bounded():
    rng = np.random.default_rng(3)
    p = gru_params("g", 3, 5, 2, rng)
    for t in p.values():
        t.value *= 20
    h = gru_forward(Tensor(rng.normal(size=(6, 3)) * 10), np.ones(6), p, "g").value
    assert np.all(np.abs(h) <= 1.0)


@pytest.mark.parametrize("variant", list(TextVariant))
def test_text_encoder_gradcheck(variant):
    rng = np.random.default_rng(4)
    cfg = TextEncoderConfig(variant, e_word=5, hidden=4, layers=2, out_dim=6)
    p = text_encoder_params(cfg, 9, rng)
    ids = np.array([[4, 5, 6, 7, 3, 3], [8, 4, 4, 5, 6, 7]])
    mask = (ids != 3).astype(float)
    probe = rng.normal(size=(2, 6))
    f = lambda: nk.reduce_sum(nk.hadamard(text_encode(ids, mask, cfg, p), probe))
    assert nk.finite_diff_check(f, list(p.values())) < 1e-4


def test_pooled_widths():
    rng = np.random.default_rng(5)
    ids, mask = np.array([[4, 5]]), np.ones((1, 2))
    for variant, width in ((TextVariant.LSTM_PLUS_GRU, 14), (TextVariant.SWEM, 10),
                           (TextVariant.GRU, 7)):
        cfg = TextEncoderConfig(variant, e_word=5, hidden=7, out_dim=3)
        assert text_pool(ids, mask, cfg, text_encoder_params(cfg, 6, rng)).shape == (1, width)


def test_variants_differ():
    ids, mask = np.array([[4, 5, 4]]), np.ones((1, 3))
    outs = []
    for variant in (TextVariant.LSTM, TextVariant.GRU):
        cfg = TextEncoderConfig(variant, e_word=5, hidden=4, out_dim=4)
        outs.append(text_encode(ids, mask, cfg, text_encoder_params(cfg, 6, np.random.default_rng(6))))
    assert not np.allclose(outs[0].value, outs[1].value)


def test_image_projector_zero_and_gradcheck():
    rng = np.random.default_rng(7)
    p = image_projector_params(ImageProjectorConfig(6, 5, 4), rng)
    x = rng.normal(size=(3, 6))
    probe = rng.normal(size=(3, 4))
    f = lambda: nk.reduce_sum(nk.hadamard(image_project(x, p), probe))
    assert nk.finite_diff_check(f, list(p.values())) < 1e-6
    np.testing.assert_array_equal(image_project(x, _zero(p)).value, 0.0)


def test_image_projector_rejects_wrong_width():
    p = image_projector_params(ImageProjectorConfig(6, 5, 4), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        image_project(np.ones((2, 5)), p)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_image_projector_output_width(in_dim, out_dim, seed):
    rng = np.random.default_rng(seed)
    p = image_projector_params(ImageProjectorConfig(in_dim, 3, out_dim), rng)
    assert image_project(rng.normal(size=in_dim), p).shape == (out_dim,)
