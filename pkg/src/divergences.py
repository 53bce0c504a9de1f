#!/usr/bin/env python3
"""
WAE-RNF - Divergence Estimators
Closed-form diagonal-Gaussian KL, unbiased Gaussian-kernel MMD and a
Monte-Carlo mutual information estimator over a minibatch mixture.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import logsumexp

from flows import FlowStack, stack_forward
from grad_core import Tensor, as_tensor, no_grad
from rnf_utils import ContractError, DimensionError

logger = logging.getLogger('divergences')

LOG_2PI = float(np.log(2.0 * np.pi))
SAMPLE_SOURCES = ('prior', 'aggregate-posterior', 'flow-image')
DEFAULT_MI_SAMPLES = 512


@dataclass
class DiagGaussian:
    """q(z|x) = N(mu, diag(exp(log_sigma)²)); row-wise when batched."""
    mu: Tensor
    log_sigma: Tensor

    def __post_init__(self):
        self.mu = as_tensor(self.mu)
        self.log_sigma = as_tensor(self.log_sigma)
        if self.mu.shape != self.log_sigma.shape:
            raise DimensionError(f"DiagGaussian: mu {self.mu.shape} and log_sigma {self.log_sigma.shape} differ")

    @property
    def sigma(self) -> Tensor:
        return self.log_sigma.exp()

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    def __len__(self) -> int:
        return self.mu.shape[0] if self.mu.ndim == 2 else 1

    def constant(self) -> 'DiagGaussian':
        return DiagGaussian(self.mu.detach(), self.log_sigma.detach())


@dataclass
class SampleSet:
    """n × d latent samples tagged with where they came from."""
    points: Tensor
    source: str = 'prior'

    def __post_init__(self):
        self.points = as_tensor(self.points)
        if self.points.ndim != 2:
            raise DimensionError(f"SampleSet needs an n × d matrix, got {self.points.shape}")
        if self.source not in SAMPLE_SOURCES:
            raise ContractError(f"SampleSet source must be one of {SAMPLE_SOURCES}, got '{self.source}'")

    def __len__(self) -> int:
        return self.points.shape[0]


def kl_diag_gaussian(q: DiagGaussian) -> Tensor:
    """
    KL(q ‖ N(0, I)) = ½ Σ_j (μ_j² + σ_j² − 1 − 2 log σ_j).

    Returns one value per row for a batched posterior, a scalar otherwise.
    """
    terms = q.mu.square() + (q.log_sigma * 2.0).exp() - 1.0 - q.log_sigma * 2.0
    return terms.sum(axis=-1) * 0.5


def log_normal_diag(z, mu, log_sigma) -> Tensor:
    """Row-wise log N(z; mu, diag σ²)."""
    z, mu, log_sigma = as_tensor(z), as_tensor(mu), as_tensor(log_sigma)
    scaled = (z - mu) * (-log_sigma).exp()
    terms = scaled.square() + log_sigma * 2.0 + LOG_2PI
    return terms.sum(axis=-1) * -0.5


def log_standard_normal(z) -> Tensor:
    z = as_tensor(z)
    zeros = np.zeros(z.shape)
    return log_normal_diag(z, zeros, zeros)


def _points(s: Union[SampleSet, Tensor, np.ndarray]) -> Tensor:
    return s.points if isinstance(s, SampleSet) else as_tensor(s)


def _gaussian_gram(a: Tensor, b: Tensor) -> Tensor:
    n, d = a.shape
    m = b.shape[0]
    diff = a.reshape(n, 1, d) - b.reshape(1, m, d)
    return (-(diff.square().sum(axis=-1))).exp()


def _off_diagonal_mean(k: Tensor) -> Tensor:
    n = k.shape[0]
    mask = 1.0 - np.eye(n)
    return (k * mask).sum() / float(n * (n - 1))


def mmd_gaussian(x, y) -> Tensor:
    """
    Unbiased MMD² with the unit-bandwidth kernel k(z, z') = exp(−‖z − z'‖²).

    With equal sample sizes the cross term skips the paired i = j entries, so
    identical sets give exactly 0. Differentiable in both sample sets.
    """
    xp, yp = _points(x), _points(y)
    if xp.ndim != 2 or yp.ndim != 2:
        raise DimensionError(f"mmd: samples must be n × d matrices, got {xp.shape} and {yp.shape}")
    if xp.shape[1] != yp.shape[1]:
        raise DimensionError(f"mmd: sample widths differ ({xp.shape[1]} vs {yp.shape[1]})")
    n, m = xp.shape[0], yp.shape[0]
    if n < 2 or m < 2:
        raise ContractError(f"mmd: need at least 2 samples on each side, got {n} and {m}")

    within = _off_diagonal_mean(_gaussian_gram(xp, xp)) + _off_diagonal_mean(_gaussian_gram(yp, yp))
    cross_gram = _gaussian_gram(xp, yp)
    cross = _off_diagonal_mean(cross_gram) if n == m else cross_gram.mean()
    return within - cross * 2.0


def transformed_kl(q: DiagGaussian, stack: FlowStack, noise) -> Tensor:
    """
    One-sample Monte-Carlo KL(q(z'|x) ‖ N(0, I)) per row for a flow posterior:
    log q(z0|x) − Σ raw_logdet − log p(z_T).
    """
    noise = as_tensor(noise)
    if noise.shape != q.mu.shape:
        raise DimensionError(f"transformed kl: noise {noise.shape} does not match posterior {q.mu.shape}")
    z0 = q.mu + q.sigma * noise
    z_t, sum_logdet = stack_forward(stack, z0)
    return log_normal_diag(z0, q.mu, q.log_sigma) - sum_logdet - log_standard_normal(z_t)


@dataclass
class MIEstimate:
    """I(z; x) = E_x[KL(q(z|x) ‖ p)] − KL(q(z) ‖ p)."""
    value: float
    raw: float
    stderr: float
    kl_posterior: float
    kl_marginal: float
    samples: int


def mutual_information(posterior: Union[DiagGaussian, Callable[..., DiagGaussian]],
                       data=None, m: int = DEFAULT_MI_SAMPLES,
                       rng: Optional[np.random.Generator] = None,
                       stack: Optional[FlowStack] = None) -> MIEstimate:
    """
    Monte-Carlo mutual information between latent codes and inputs.

    Args:
        posterior: Batched DiagGaussian, or an encoder callable applied to ``data``
        data: Batch handed to the encoder callable
        m: Number of reparameterized samples (>= 100), spread evenly over the batch
        rng: Generator for the sampling noise
        stack: Optional flow stack; densities are then evaluated in the flow image

    Returns:
        MIEstimate with the value clamped at 0 and the raw difference
    """
    if m < 100:
        raise ContractError(f"mutual information needs m >= 100 samples, got {m}")
    rng = rng or np.random.default_rng(0)
    with no_grad():
        q = posterior(data) if callable(posterior) else posterior
        mu = np.atleast_2d(q.mu.data)
        log_sigma = np.atleast_2d(q.log_sigma.data)
        B, d = mu.shape

        owner = np.arange(m) % B
        eps = rng.standard_normal((m, d))
        z = mu[owner] + np.exp(log_sigma[owner]) * eps

        # log q(z_i | x_b) for every component b, shape (m, B)
        scaled = (z[:, None, :] - mu[None, :, :]) * np.exp(-log_sigma)[None, :, :]
        comp = -0.5 * (scaled ** 2 + 2.0 * log_sigma[None, :, :] + LOG_2PI).sum(axis=-1)
        log_mix = logsumexp(comp, axis=1) - np.log(B)

        base_prior = log_standard_normal(Tensor(z)).data
        if stack is not None and stack.flows:
            z_t, sum_logdet = stack_forward(stack, Tensor(z))
            logdet = sum_logdet.data
            log_prior = log_standard_normal(z_t).data
        else:
            logdet = np.zeros(m)
            log_prior = base_prior
        closed_kl = kl_diag_gaussian(DiagGaussian(Tensor(mu), Tensor(log_sigma))).data

    # Closed-form base KL, corrected by the sampled change the flows make
    kl_posterior = float(closed_kl[owner].mean() - (logdet + log_prior - base_prior).mean())
    marginal_terms = log_mix - logdet - log_prior
    kl_marginal = float(marginal_terms.mean())
    raw = kl_posterior - kl_marginal
    # Sampled part of raw is mean(base_prior - log_mix)
    stderr = float((log_mix - base_prior).std(ddof=1) / np.sqrt(m))
    logger.debug(f"MI estimate {raw:.4f} ± {stderr:.4f} over B={B}, m={m}")
    return MIEstimate(max(raw, 0.0), raw, stderr, kl_posterior, kl_marginal, m)
