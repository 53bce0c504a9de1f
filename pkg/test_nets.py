#!/usr/bin/env python3
"""Tests for the LSTM sentence VAE."""

import os
import sys
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

import numpy as np
import pytest
from scipy import stats

from data import EOS_ID, make_batch
from divergences import DiagGaussian
from flows import stack_forward
from grad_core import Tensor, gradcheck, no_grad, parameter
from nets import BatchNorm, DecoderConfig, LstmParams, TextVAE, reparameterize
from rnf_utils import ContractError, DimensionError, VocabularyError

V = 12


def small_model(seed=0, injection='init-state+concat', dropout=0.0, num_flows=0):
    return TextVAE.build(V, np.random.default_rng(seed), embed_dim=6, hidden=5, latent_dim=3, mlp_hidden=4,
                         num_flows=num_flows, decoder_cfg=DecoderConfig(injection, dropout, 6))


def sentences(rng, n, lo=4, hi=V, max_len=6):
    return [rng.integers(lo, hi, size=int(rng.integers(1, max_len + 1))) for _ in range(n)]


def zero_out(model):
    for name, p in model.parameters().items():
        if not name.endswith('norm.gamma'):
            p.data = np.zeros_like(p.data)


def test_zeroed_encoder_gives_the_prior():
    model = small_model()
    zero_out(model)
    batch = make_batch(sentences(np.random.default_rng(1), 4))
    q = model.encode(batch.ids, batch.mask)
    np.testing.assert_array_equal(q.mu.data, np.zeros((4, 3)))
    np.testing.assert_array_equal(q.log_sigma.data, np.zeros((4, 3)))


def test_identical_sequences_give_identical_rows():
    model = small_model()
    s = np.array([4, 7, 9])
    batch = make_batch([s, s, s])
    q = model.encode(batch.ids, batch.mask)
    np.testing.assert_array_equal(q.mu.data[0], q.mu.data[1])
    np.testing.assert_array_equal(q.mu.data[1], q.mu.data[2])


def test_out_of_range_ids():
    model = small_model()
    with pytest.raises(VocabularyError):
        model.encode(np.array([[V]]), np.ones((1, 1)))
    with pytest.raises(DimensionError):
        model.encode(np.array([1, 2]), np.ones(2))


def test_padding_does_not_change_encoding_or_scores():
    model = small_model()
    model.eval()
    rng = np.random.default_rng(2)
    sents = sentences(rng, 3)
    tight = make_batch(sents)
    padded = make_batch(sents, pad_to=tight.ids.shape[1] + 4)
    z = rng.normal(size=(3, 3))
    with no_grad():
        q1, q2 = model.encode(tight.ids, tight.mask), model.encode(padded.ids, padded.mask)
        s1 = model.decode_teacher_forced(z, tight.ids, tight.mask).sentence_loglik.data
        s2 = model.decode_teacher_forced(z, padded.ids, padded.mask).sentence_loglik.data
    assert q1.mu.data.tobytes() == q2.mu.data.tobytes()
    assert s1.tobytes() == s2.tobytes()


def test_reparameterize():
    q = DiagGaussian(np.array([[1.0, -2.0]]), np.array([[0.3, -0.5]]))
    np.testing.assert_array_equal(reparameterize(q, np.zeros((1, 2))).data, q.mu.data)
    tiny = DiagGaussian(np.array([[1.0, -2.0]]), np.array([[-40.0, -40.0]]))
    np.testing.assert_allclose(reparameterize(tiny, np.ones((1, 2))).data, tiny.mu.data, atol=1e-15)
    with pytest.raises(DimensionError):
        reparameterize(q, np.zeros((2, 2)))


def test_uniform_logits_score_minus_log_v():
    model = small_model()
    model.output.weight.data[:] = 0.0
    model.output.bias.data[:] = 0.0
    batch = make_batch([np.array([4, 5, 6])])
    out = model.decode_teacher_forced(np.zeros((1, 3)), batch.ids, batch.mask)
    np.testing.assert_allclose(out.token_loglik.data, [[-np.log(V)] * 4], rtol=1e-14)
    assert out.nll.item() == pytest.approx(4 * np.log(V), rel=1e-14)


def test_greedy_decoding_is_deterministic():
    model = small_model(seed=3)
    z = np.random.default_rng(4).normal(size=(5, 3))
    first = model.decode_sample(z, max_len=20)
    assert first == model.decode_sample(z, max_len=20)
    assert all(EOS_ID not in seq and len(seq) <= 20 for seq in first)


def test_zero_temperature_agrees_with_greedy():
    model = small_model(seed=3)
    z = np.random.default_rng(5).normal(size=(4, 3))
    greedy = model.decode_sample(z, max_len=15)
    cold = model.decode_sample(z, max_len=15, mode='temperature', temperature=1e-9,
                               rng=np.random.default_rng(0))
    assert cold == greedy


def test_decode_argument_errors():
    model = small_model()
    with pytest.raises(ContractError):
        model.decode_sample(np.zeros((1, 3)), max_len=201)
    with pytest.raises(ContractError):
        model.decode_sample(np.zeros((1, 3)), mode='beam')
    with pytest.raises(ContractError):
        model.decode_sample(np.zeros((1, 3)), mode='temperature', temperature=1.0)


@pytest.mark.slow
def test_uniform_decoder_samples_uniform_tokens():
    model = small_model()
    model.output.weight.data[:] = 0.0
    model.output.bias.data[:] = 0.0
    seqs = model.decode_sample(np.zeros((10_000, 3)), max_len=1, mode='temperature', temperature=1.0,
                               rng=np.random.default_rng(6))
    counts = np.zeros(V)
    for seq in seqs:
        counts[seq[0] if seq else EOS_ID] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_batch_norm_train_and_eval_modes():
    bn = BatchNorm.init(2)
    x = Tensor(np.array([[1.0, 2.0], [3.0, 6.0]]))
    out = bn(x, training=True)
    np.testing.assert_allclose(out.data.mean(axis=0), [0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(bn.running_mean, [0.2, 0.4])
    np.testing.assert_allclose(bn.running_var, [0.9 + 0.1, 0.9 + 0.4])
    evaluated = bn(Tensor(np.array([[0.2, 0.4]])), training=False)
    np.testing.assert_allclose(evaluated.data, [[0.0, 0.0]], atol=1e-12)


@pytest.mark.parametrize('seed', range(4))
def test_batch_norm_gradients(seed):
    rng = np.random.default_rng(seed)
    bn = BatchNorm.init(3)
    bn.gamma.data = rng.normal(size=3)
    x = parameter(rng.normal(size=(5, 3)))
    c = rng.normal(size=(5, 3))
    assert gradcheck(lambda x, g, b: (bn(x, True) * c).sum(), [x, bn.gamma, bn.beta]).passed


def test_lstm_gradients_through_time():
    rng = np.random.default_rng(7)
    cell = LstmParams.init(3, 4, rng, scale=0.5)
    xs = parameter(rng.normal(size=(6, 2, 3)))

    def fn(xs, w_ih, w_hh, bias):
        lstm = LstmParams(w_ih, w_hh, bias)
        h = Tensor(np.zeros((2, 4)))
        c = Tensor(np.zeros((2, 4)))
        for t in range(6):
            h, c = lstm.step(xs[t], h, c)
        return (h * h).sum() + c.sum()

    assert gradcheck(fn, [xs, cell.w_ih, cell.w_hh, cell.bias]).passed


@pytest.mark.parametrize('injection', ['init-state', 'init-state+concat'])
def test_full_model_gradients(injection):
    model = small_model(seed=8, injection=injection, num_flows=1)
    rng = np.random.default_rng(9)
    batch = make_batch(sentences(rng, 3, max_len=3))
    noise = rng.normal(size=(3, 3))
    names = ['encoder.w_hh', 'head.mu.out.weight', 'latent_to_state.weight', 'decoder.w_ih', 'embedding',
             'flows.flow0.u']
    params = model.parameters()
    tensors = [params[n] for n in names]

    def fn(*_):
        q = model.encode(batch.ids, batch.mask)
        z_t, _ = stack_forward(model.flows, reparameterize(q, noise))
        out = model.decode_teacher_forced(z_t, batch.ids, batch.mask)
        return -out.sentence_loglik.mean() + (q.log_sigma.square()).sum() * 0.01

    assert gradcheck(fn, tensors, rtol=1e-4).passed


def test_dropout_only_in_training():
    model = small_model(dropout=0.5)
    batch = make_batch(sentences(np.random.default_rng(10), 3))
    z = np.zeros((3, 3))
    model.eval()
    with no_grad():
        a = model.decode_teacher_forced(z, batch.ids, batch.mask, np.random.default_rng(1)).sentence_loglik.data
        b = model.decode_teacher_forced(z, batch.ids, batch.mask, np.random.default_rng(2)).sentence_loglik.data
    assert a.tobytes() == b.tobytes()
    model.train()
    with no_grad():
        c = model.decode_teacher_forced(z, batch.ids, batch.mask, np.random.default_rng(1)).sentence_loglik.data
    assert c.tobytes() != a.tobytes()


def test_parameter_names_and_buffers():
    model = small_model(num_flows=2)
    names = set(model.parameters())
    assert {'embedding', 'encoder.w_ih', 'decoder.bias', 'output.weight', 'flows.flow1.b',
            'head.sigma.norm.gamma'} <= names
    assert set(model.buffers()) == {'head.mu.norm.running_mean', 'head.mu.norm.running_var',
                                    'head.sigma.norm.running_mean', 'head.sigma.norm.running_var'}
