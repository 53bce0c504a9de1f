#!/usr/bin/env python3
"""Tests for the training objectives and the annealing schedule."""

import os
import sys
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

import numpy as np
import pytest

from data import make_batch
from divergences import log_normal_diag, log_standard_normal
from flows import FlowStack, PlanarFlowParams, stack_forward
from grad_core import gradcheck, no_grad
from nets import DecoderConfig, TextVAE, reparameterize
from objectives import (AnnealSchedule, anneal, combine, elbo, flow_elbo, nll_bound, objective_loss,
                        wae_loss, wae_rnf_loss)
from rnf import ClusterSet, KernelConfig
from rnf_utils import ContractError

V = 10
D = 2


def small_model(seed=0, num_flows=0):
    return TextVAE.build(V, np.random.default_rng(seed), embed_dim=5, hidden=4, latent_dim=D, mlp_hidden=3,
                         num_flows=num_flows, decoder_cfg=DecoderConfig('init-state+concat', 0.0, 5))


def uniform_prior_model():
    """Posterior equal to the prior and a decoder with uniform logits."""
    model = small_model()
    for name, p in model.parameters().items():
        if not name.endswith('norm.gamma'):
            p.data = np.zeros_like(p.data)
    return model


def batch_of(seed=1, n=4):
    rng = np.random.default_rng(seed)
    return make_batch([rng.integers(4, V, size=int(rng.integers(1, 5))) for _ in range(n)])


def test_anneal_endpoints_and_midpoint():
    sched = AnnealSchedule()
    assert anneal(0, sched) == (0.0, 10.0)
    assert anneal(21, sched) == (0.8, 10.0 - 0.8)
    assert anneal(48, sched) == (0.8, 10.0 - 0.8)
    alpha, lam = anneal(10.5, sched)
    assert alpha == pytest.approx(0.4, abs=1e-15)
    assert lam == pytest.approx(9.6, abs=1e-15)
    assert anneal(21, sched)[1] == pytest.approx(9.2, abs=1e-15)


def test_anneal_is_nondecreasing():
    sched = AnnealSchedule()
    alphas = [anneal(e, sched)[0] for e in np.linspace(0, 30, 301)]
    assert np.all(np.diff(alphas) >= 0)
    for e in range(0, 49):
        alpha, lam = anneal(e, sched)
        assert lam == 10.0 - alpha


def test_schedule_for_objective():
    assert AnnealSchedule.for_objective('wae-rnf').alpha_end == 0.8
    assert AnnealSchedule.for_objective('vae').alpha_end == 1.0
    constant = AnnealSchedule.for_objective('vae', kl_weight=1.0)
    assert anneal(0, constant)[0] == 1.0 and anneal(30, constant)[0] == 1.0
    with pytest.raises(ContractError):
        AnnealSchedule(ramp_epochs=0)


def test_combine_weights_each_objective():
    parts = dict(nll=10.0, kl=2.0, mmd=0.5, raw=0.25, reg=-0.75)
    assert combine('vae', *parts.values(), 0.5, 3.0) == 11.0
    assert combine('wae', *parts.values(), 0.5, 3.0) == 10.0 + 1.5 + 1.0
    assert combine('wae-nf', *parts.values(), 0.5, 3.0) == 10.0 + 1.5 + 0.5 * 1.75
    assert combine('wae-rnf', *parts.values(), 0.5, 3.0) == 10.0 + 1.5 + 0.5 * 2.75
    with pytest.raises(ContractError):
        combine('gan', *parts.values(), 0.5, 3.0)


def test_elbo_with_prior_posterior_and_uniform_decoder():
    model = uniform_prior_model()
    batch = batch_of()
    noise = np.random.default_rng(2).normal(size=(len(batch), D))
    loss = elbo(model, batch, noise)
    assert loss.kl.item() == 0.0
    assert loss.total.item() == pytest.approx(batch.num_tokens / len(batch) * np.log(V), rel=1e-13)


def test_elbo_with_zero_beta_is_reconstruction():
    model = small_model()
    batch = batch_of()
    noise = np.random.default_rng(3).normal(size=(len(batch), D))
    loss = elbo(model, batch, noise, beta=0.0)
    assert loss.total.item() == loss.nll.item()


def test_elbo_rejects_models_with_flows():
    model = small_model(num_flows=2)
    batch = batch_of()
    with pytest.raises(ContractError):
        elbo(model, batch, np.zeros((len(batch), D)))


def test_flow_elbo_with_identity_flows_equals_elbo():
    model = small_model()
    batch = batch_of()
    noise = np.random.default_rng(4).normal(size=(len(batch), D))
    plain = elbo(model, batch, noise)
    model.flows = FlowStack([PlanarFlowParams.identity(D) for _ in range(3)])
    flowed = flow_elbo(model, batch, noise)
    assert flowed.total.item() == plain.total.item()
    assert flowed.kl.item() == plain.kl.item()


def test_wae_with_zero_weights_is_reconstruction():
    model = small_model()
    batch = batch_of()
    rng = np.random.default_rng(5)
    noise, prior = rng.normal(size=(len(batch), D)), rng.normal(size=(len(batch), D))
    for flows in (False, True):
        if flows:
            model.flows = FlowStack.init(D, 2, rng)
        loss = wae_loss(model, batch, noise, prior, 0.0, 0.0, flows=flows)
        assert loss.total.item() == loss.nll.item()


def test_wae_rnf_on_cluster_centers_reduces_to_kl():
    model = small_model()
    model.flows = FlowStack([PlanarFlowParams.identity(D) for _ in range(3)])
    batch = batch_of()
    rng = np.random.default_rng(6)
    noise, prior = rng.normal(size=(len(batch), D)), rng.normal(size=(len(batch), D))
    q = model.encode(batch.ids, batch.mask)
    model.clusters = ClusterSet(reparameterize(q, noise).data)
    loss = wae_rnf_loss(model, batch, noise, prior, (0.8, 9.2), KernelConfig('gaussian', d=D))
    assert loss.sum_reg_logdet.item() == 0.0
    expected = loss.nll.item() + loss.mmd.item() * 9.2 + loss.kl.item() * 0.8
    assert loss.total.item() == pytest.approx(expected, rel=1e-14)


def test_wae_rnf_needs_clusters():
    model = small_model(num_flows=1)
    batch = batch_of()
    with pytest.raises(ContractError):
        wae_rnf_loss(model, batch, np.zeros((len(batch), D)), np.zeros((len(batch), D)), (0.0, 10.0),
                     KernelConfig(d=D))


@pytest.mark.parametrize('objective', ['vae', 'vae-nf', 'wae', 'wae-nf', 'wae-rnf'])
def test_reported_components_recombine_to_total(objective):
    rng = np.random.default_rng(7)
    model = small_model(num_flows=0 if objective in ('vae', 'wae') else 2)
    if objective == 'wae-rnf':
        model.clusters = ClusterSet(rng.normal(size=(5, D)))
    batch = batch_of()
    noise, prior = rng.normal(size=(len(batch), D)), rng.normal(size=(len(batch), D))
    loss = objective_loss(objective, model, batch, noise, prior, 0.3, 9.7, KernelConfig(d=D))
    assert loss.objective == objective
    assert loss.recombine() == pytest.approx(loss.total.item(), rel=1e-12)


def test_unknown_objective():
    with pytest.raises(ContractError):
        objective_loss('beta-vae', small_model(), batch_of(), None, None, 0.0, 0.0)


@pytest.mark.parametrize('kind', ['inverse-multiquadratic', 'gaussian'])
def test_wae_rnf_gradients(kind):
    rng = np.random.default_rng(8)
    model = small_model(seed=9, num_flows=2)
    model.clusters = ClusterSet(rng.normal(size=(4, D)))
    batch = batch_of(n=3)
    noise, prior = rng.normal(size=(3, D)), rng.normal(size=(3, D))
    params = model.parameters()
    tensors = [params[n] for n in ('flows.flow0.u', 'flows.flow1.w', 'flows.flow1.b', 'head.mu.out.weight',
                                   'head.sigma.norm.beta', 'output.bias')]
    kernel = KernelConfig(kind, beta=0.5, d=D)

    def fn(*_):
        return wae_rnf_loss(model, batch, noise, prior, (0.4, 9.6), kernel).total

    assert gradcheck(fn, tensors).passed


def test_nll_bound_is_exact_for_prior_posterior_and_uniform_decoder():
    model = uniform_prior_model()
    batch = batch_of()
    noise = np.random.default_rng(10).normal(size=(len(batch), D))
    bound = nll_bound(model, batch, noise)
    np.testing.assert_array_equal(bound.kl, np.zeros(len(batch)))
    np.testing.assert_allclose(bound.nll_bound, batch.lengths * np.log(V), rtol=1e-13)
    assert model.training


def test_nll_bound_reports_regularized_logdets_with_clusters():
    rng = np.random.default_rng(11)
    model = small_model(num_flows=2)
    batch = batch_of()
    noise = rng.normal(size=(len(batch), D))
    assert nll_bound(model, batch, noise).sum_reg_logdet is None
    model.clusters = ClusterSet(rng.normal(size=(3, D)))
    bound = nll_bound(model, batch, noise, KernelConfig(d=D))
    assert bound.sum_reg_logdet.shape == (len(batch),)
    assert np.all(bound.sum_reg_logdet <= bound.sum_raw_logdet + 2 * np.log(7.0) + 1e-12)


def test_nll_bound_kl_is_the_flow_posterior_kl():
    model = small_model(seed=3, num_flows=3)
    batch = batch_of(seed=4)
    noise = np.random.default_rng(12).normal(size=(len(batch), D))
    bound = nll_bound(model, batch, noise)
    model.eval()
    with no_grad():
        q = model.encode(batch.ids, batch.mask)
        z0 = reparameterize(q, noise)
        z_t, raw = stack_forward(model.flows, z0)
        expected = (log_normal_diag(z0, q.mu, q.log_sigma) - raw - log_standard_normal(z_t)).data
    model.train()
    np.testing.assert_allclose(bound.kl, expected, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(bound.nll_bound, bound.reconstruction + bound.kl, rtol=1e-12)
