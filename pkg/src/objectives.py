#!/usr/bin/env python3
"""
WAE-RNF - Training Objectives
VAE ELBO, flow ELBO, the Wasserstein variants (plain, with flows, with
kernel-regularized flows), the annealing schedule and the evaluation bound.

Every loss returns a ``LossBreakdown`` whose ``total`` is assembled from the
reported components with the same arithmetic ``recombine`` replays.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from data import Batch
from divergences import kl_diag_gaussian, log_standard_normal, mmd_gaussian, transformed_kl
from flows import stack_forward
from grad_core import Tensor, no_grad
from nets import TextVAE, reparameterize
from rnf import KernelConfig, stack_regularized_forward
from rnf_utils import ContractError

logger = logging.getLogger('objectives')

OBJECTIVES = ('vae', 'vae-nf', 'wae', 'wae-nf', 'wae-rnf')
WAE_OBJECTIVES = ('wae', 'wae-nf', 'wae-rnf')
FLOW_OBJECTIVES = ('vae-nf', 'wae-nf', 'wae-rnf')


@dataclass(frozen=True)
class AnnealSchedule:
    """Linear ramp of the KL weight α with the MMD weight λ = lambda_base − α."""
    alpha_start: float = 0.0
    alpha_end: float = 0.8
    ramp_epochs: float = 21.0
    lambda_base: float = 10.0

    def __post_init__(self):
        if self.ramp_epochs <= 0:
            raise ContractError(f"ramp_epochs must be positive, got {self.ramp_epochs}")
        if self.alpha_end < self.alpha_start:
            raise ContractError("anneal schedule must be nondecreasing (alpha_end < alpha_start)")

    @classmethod
    def for_objective(cls, objective: str, kl_weight: Optional[float] = None,
                      alpha_end: float = 0.8, ramp_epochs: float = 21.0) -> 'AnnealSchedule':
        """WAE objectives ramp α to ``alpha_end``; the others ramp the KL weight to 1."""
        if kl_weight is not None:
            return cls(kl_weight, kl_weight, ramp_epochs)
        if objective in WAE_OBJECTIVES:
            return cls(0.0, alpha_end, ramp_epochs)
        return cls(0.0, 1.0, ramp_epochs)


def anneal(epoch: float, sched: AnnealSchedule) -> Tuple[float, float]:
    """(α, λ) at ``epoch``: α(0) = alpha_start, α(e ≥ ramp) = alpha_end, λ = base − α."""
    if epoch >= sched.ramp_epochs:
        alpha = sched.alpha_end
    elif epoch <= 0:
        alpha = sched.alpha_start
    else:
        alpha = sched.alpha_start + (sched.alpha_end - sched.alpha_start) * (epoch / sched.ramp_epochs)
    return alpha, sched.lambda_base - alpha


@dataclass
class LossBreakdown:
    """
    Per-batch means: nll (nats/sentence), kl, mmd, Σ raw and Σ regularized
    log-dets, and the weighted total.
    """
    objective: str
    nll: Tensor
    kl: Tensor
    mmd: Tensor
    sum_raw_logdet: Tensor
    sum_reg_logdet: Tensor
    total: Tensor
    alpha: float = 1.0
    lam: float = 0.0

    def values(self) -> dict:
        return {
            'nll': self.nll.item(), 'kl': self.kl.item(), 'mmd': self.mmd.item(),
            'log_j_raw': self.sum_raw_logdet.item(), 'log_j_reg': self.sum_reg_logdet.item(),
            'total': self.total.item(),
        }

    def recombine(self) -> float:
        """Total recomputed from the reported components."""
        v = self.values()
        return combine(self.objective, v['nll'], v['kl'], v['mmd'],
                       v['log_j_raw'], v['log_j_reg'], self.alpha, self.lam)


def combine(objective: str, nll, kl, mmd, raw, reg, alpha: float, lam: float):
    """Objective-specific weighting; works on floats and Tensors alike."""
    if objective in ('vae', 'vae-nf'):
        return nll + kl * alpha
    if objective == 'wae':
        return nll + mmd * lam + kl * alpha
    if objective == 'wae-nf':
        return nll + mmd * lam + (kl - raw) * alpha
    if objective == 'wae-rnf':
        return nll + mmd * lam + (kl - reg) * alpha
    raise ContractError(f"unknown objective '{objective}', expected one of {OBJECTIVES}")


def _zero() -> Tensor:
    return Tensor(0.0)


def _reconstruction(model: TextVAE, z, batch: Batch, rng) -> Tensor:
    out = model.decode_teacher_forced(z, batch.ids, batch.mask, rng)
    return -(out.sentence_loglik.mean())


def elbo(model: TextVAE, batch: Batch, noise, beta: float = 1.0,
         rng: Optional[np.random.Generator] = None) -> LossBreakdown:
    """Negative ELBO: reconstruction NLL + β·KL(q(z|x) ‖ N(0, I))."""
    if model.flows.flows:
        raise ContractError("elbo: plain VAE objective used on a model with flows")
    q = model.encode(batch.ids, batch.mask, rng)
    z = reparameterize(q, noise)
    nll = _reconstruction(model, z, batch, rng)
    kl = kl_diag_gaussian(q).mean()
    zero = _zero()
    return LossBreakdown('vae', nll, kl, zero, zero, zero, combine('vae', nll, kl, zero, zero, zero, beta, 0.0),
                         alpha=beta)


def flow_elbo(model: TextVAE, batch: Batch, noise, beta: float = 1.0,
              rng: Optional[np.random.Generator] = None) -> LossBreakdown:
    """
    Negative flow ELBO with one sample per datum.

    The KL part is the closed-form KL(q(z0|x) ‖ N(0, I)) plus the sampled
    correction log p(z0) − log p(z_T) − Σ raw_logdet, which is the
    transformed-posterior KL in expectation and vanishes for identity flows.
    """
    q = model.encode(batch.ids, batch.mask, rng)
    z0 = reparameterize(q, noise)
    z_t, sum_logdet = stack_forward(model.flows, z0)
    nll = _reconstruction(model, z_t, batch, rng)
    correction = log_standard_normal(z0) - log_standard_normal(z_t) - sum_logdet
    kl = kl_diag_gaussian(q).mean() + correction.mean()
    raw = sum_logdet.mean()
    zero = _zero()
    return LossBreakdown('vae-nf', nll, kl, zero, raw, zero,
                         combine('vae-nf', nll, kl, zero, raw, zero, beta, 0.0), alpha=beta)


def wae_loss(model: TextVAE, batch: Batch, noise, prior_samples, alpha: float, lam: float,
             rng: Optional[np.random.Generator] = None, flows: bool = False) -> LossBreakdown:
    """
    Wasserstein objective without kernel regularization:
    NLL + λ·MMD(z0, prior) + α·KL, with − mean Σ raw_logdet inside the α-term
    when ``flows`` is set.
    """
    objective = 'wae-nf' if flows else 'wae'
    q = model.encode(batch.ids, batch.mask, rng)
    z0 = reparameterize(q, noise)
    if flows:
        z_t, sum_logdet = stack_forward(model.flows, z0)
        raw = sum_logdet.mean()
    else:
        z_t, raw = z0, _zero()
    nll = _reconstruction(model, z_t, batch, rng)
    mmd = mmd_gaussian(z0, prior_samples)
    kl = kl_diag_gaussian(q).mean()
    zero = _zero()
    return LossBreakdown(objective, nll, kl, mmd, raw, zero,
                         combine(objective, nll, kl, mmd, raw, zero, alpha, lam), alpha, lam)


def wae_rnf_loss(model: TextVAE, batch: Batch, noise, prior_samples,
                 sched_point: Tuple[float, float], kernel: KernelConfig,
                 rng: Optional[np.random.Generator] = None,
                 kernel_regularized: bool = True) -> LossBreakdown:
    """
    RNF-Wasserstein objective:
    NLL(x | z_T) + λ·MMD(z0, prior) + α·(KL(q(z0|x)) − mean Σ reg_logdet).

    MMD is taken in the pre-flow space; with ``kernel_regularized=False`` the
    α-term uses raw log-dets instead.
    """
    if model.clusters is None:
        raise ContractError("wae-rnf objective needs cluster centers on the model")
    alpha, lam = sched_point
    q = model.encode(batch.ids, batch.mask, rng)
    z0 = reparameterize(q, noise)
    z_t, raw_sum, reg_sum = stack_regularized_forward(model.flows, z0, model.clusters, kernel)
    nll = _reconstruction(model, z_t, batch, rng)
    mmd = mmd_gaussian(z0, prior_samples)
    kl = kl_diag_gaussian(q).mean()
    raw, reg = raw_sum.mean(), reg_sum.mean()
    if not kernel_regularized:
        reg = raw
    return LossBreakdown('wae-rnf', nll, kl, mmd, raw, reg,
                         combine('wae-rnf', nll, kl, mmd, raw, reg, alpha, lam), alpha, lam)


def objective_loss(objective: str, model: TextVAE, batch: Batch, noise, prior_samples,
                   alpha: float, lam: float, kernel: Optional[KernelConfig] = None,
                   rng: Optional[np.random.Generator] = None,
                   kernel_regularized: bool = True) -> LossBreakdown:
    """Dispatch by objective name; α doubles as the KL weight for the VAE objectives."""
    if objective == 'vae':
        return elbo(model, batch, noise, alpha, rng)
    if objective == 'vae-nf':
        return flow_elbo(model, batch, noise, alpha, rng)
    if objective == 'wae':
        return wae_loss(model, batch, noise, prior_samples, alpha, lam, rng, flows=False)
    if objective == 'wae-nf':
        return wae_loss(model, batch, noise, prior_samples, alpha, lam, rng, flows=True)
    if objective == 'wae-rnf':
        return wae_rnf_loss(model, batch, noise, prior_samples, (alpha, lam), kernel, rng,
                            kernel_regularized)
    raise ContractError(f"unknown objective '{objective}', expected one of {OBJECTIVES}")


@dataclass
class NllBound:
    """Per-sentence evaluation terms (numpy, length B)."""
    nll_bound: np.ndarray
    reconstruction: np.ndarray
    kl: np.ndarray
    sum_raw_logdet: np.ndarray
    sum_reg_logdet: Optional[np.ndarray]
    mu: np.ndarray
    log_sigma: np.ndarray


def nll_bound(model: TextVAE, batch: Batch, noise,
              kernel: Optional[KernelConfig] = None) -> NllBound:
    """
    −[log p(x|z_T) − log q(z0|x) + log p(z_T) + Σ raw_logdet] per sentence,
    one sample each, in eval mode without recording a graph.

    Raw log-dets give the density; regularized ones are computed alongside
    for reporting only, when clusters and a kernel are available.
    """
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            q = model.encode(batch.ids, batch.mask)
            z0 = reparameterize(q, noise)
            reg = None
            if model.clusters is not None and kernel is not None and model.flows.flows:
                z_t, raw_sum, reg_sum = stack_regularized_forward(model.flows, z0, model.clusters, kernel)
                reg = reg_sum.data.copy()
            else:
                z_t, raw_sum = stack_forward(model.flows, z0)
            out = model.decode_teacher_forced(z_t, batch.ids, batch.mask)
            rec = -out.sentence_loglik.data
            kl = transformed_kl(q, model.flows, noise).data
    finally:
        model.training = was_training
    raw = np.broadcast_to(raw_sum.data, rec.shape).copy()
    return NllBound(rec + kl, rec, kl, raw, reg, q.mu.data.copy(), q.log_sigma.data.copy())
