#!/usr/bin/env python3
"""
WAE-RNF - Planar Flows
Planar normalizing flows f(z) = z + û·tanh(wᵀz + b), their analytic
log-Jacobian-determinants, and ordered composition into flow stacks.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from grad_core import Tensor, as_tensor, no_grad, parameter, softplus, tanh
from rnf_utils import DegenerateDirectionError, DimensionError, SingularityError

logger = logging.getLogger('flows')

SINGULARITY_TOL = 1e-12
DEFAULT_NUM_FLOWS = 3


@dataclass
class PlanarFlowParams:
    """Parameters (u, w, b) of one planar flow in R^d."""
    u: Tensor
    w: Tensor
    b: Tensor

    def __post_init__(self):
        if self.u.shape != self.w.shape or self.u.ndim != 1:
            raise DimensionError(f"planar flow: u {self.u.shape} and w {self.w.shape} must be equal 1-D")
        if self.b.size != 1:
            raise DimensionError(f"planar flow: b must be scalar, got {self.b.shape}")

    @property
    def dim(self) -> int:
        return self.u.shape[0]

    @classmethod
    def from_arrays(cls, u, w, b, requires_grad: bool = True) -> 'PlanarFlowParams':
        return cls(Tensor(u, requires_grad), Tensor(w, requires_grad),
                   Tensor(np.reshape(b, ()), requires_grad))

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, scale: float = 0.1) -> 'PlanarFlowParams':
        w = rng.normal(0.0, 1.0, d) / np.sqrt(d)
        return cls(parameter(rng.normal(0.0, scale, d)), parameter(w), parameter(0.0))

    @classmethod
    def identity(cls, d: int, requires_grad: bool = True) -> 'PlanarFlowParams':
        return cls.from_arrays(np.zeros(d), np.ones(d) / np.sqrt(d), 0.0, requires_grad)

    def parameters(self) -> Dict[str, Tensor]:
        return {'u': self.u, 'w': self.w, 'b': self.b}

    def constant(self) -> 'PlanarFlowParams':
        """Detached copy; used wherever flow parameters are read but not trained."""
        return PlanarFlowParams(self.u.detach(), self.w.detach(), self.b.detach())


@dataclass
class FlowStack:
    """Ordered composition f_T ∘ … ∘ f_1; flow 1 applies first."""
    flows: List[PlanarFlowParams] = field(default_factory=list)

    def __post_init__(self):
        dims = {f.dim for f in self.flows}
        if len(dims) > 1:
            raise DimensionError(f"flow stack mixes latent dimensions {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.flows)

    @property
    def dim(self) -> Optional[int]:
        return self.flows[0].dim if self.flows else None

    @classmethod
    def init(cls, d: int, num_flows: int, rng: np.random.Generator) -> 'FlowStack':
        return cls([PlanarFlowParams.init(d, rng) for _ in range(num_flows)])

    def parameters(self) -> Dict[str, Tensor]:
        params = {}
        for t, flow in enumerate(self.flows):
            for name, tensor in flow.parameters().items():
                params[f"flow{t}.{name}"] = tensor
        return params

    def constant(self) -> 'FlowStack':
        return FlowStack([f.constant() for f in self.flows])


def project_u(p: PlanarFlowParams) -> Tensor:
    """
    Map u to û with ûᵀw = -1 + softplus(wᵀu) >= -1, keeping f invertible.

    A zero u is the identity flow and is returned unchanged (wᵀu = 0 already
    satisfies the condition).
    """
    w_norm2 = (p.w * p.w).sum()
    if w_norm2.item() < SINGULARITY_TOL ** 2:
        raise DegenerateDirectionError(f"planar flow: |w| = {np.sqrt(w_norm2.item()):.3g} < {SINGULARITY_TOL}")
    if not np.any(p.u.data):
        return p.u
    wu = (p.w * p.u).sum()
    m = softplus(wu) - 1.0
    return p.u + (m - wu) * p.w / w_norm2


def _as_batch(z, d: int) -> Tuple[Tensor, bool]:
    z = as_tensor(z)
    single = z.ndim == 1
    if single:
        z = z.reshape(1, -1)
    if z.ndim != 2 or z.shape[1] != d:
        raise DimensionError(f"planar flow: latent batch {z.shape} does not have width {d}")
    return z, single


def planar_forward(p: PlanarFlowParams, z) -> Tuple[Tensor, Tensor]:
    """
    Apply one planar flow to a latent batch.

    Returns (z', raw_logdet) with raw_logdet = log|1 + ûᵀφ(z)w|, φ = tanh'(wᵀz + b).
    A single vector input yields a single vector and a scalar.
    """
    zb, single = _as_batch(z, p.dim)
    u_hat = project_u(p)
    h = tanh(zb @ p.w + p.b)
    z_new = zb + h.reshape(-1, 1) * u_hat
    det = 1.0 + (1.0 - h.square()) * (u_hat * p.w).sum()
    if np.any(np.abs(det.data) < SINGULARITY_TOL):
        raise SingularityError(f"planar flow: |1 + ûᵀφw| = {np.abs(det.data).min():.3g} below {SINGULARITY_TOL}")
    raw_logdet = det.abs().log()
    if single:
        return z_new.reshape(-1), raw_logdet.reshape(())
    return z_new, raw_logdet


def stack_forward(s: FlowStack, z0) -> Tuple[Tensor, Tensor]:
    """Sequentially apply every flow; returns (z_T, Σ_t raw_logdet_t)."""
    z = as_tensor(z0)
    if not s.flows:
        return z, Tensor(np.zeros(z.shape[:-1]))
    total = None
    for flow in s.flows:
        z, logdet = planar_forward(flow, z)
        total = logdet if total is None else total + logdet
    return z, total


def log_density(s: FlowStack, z0, log_q0) -> Tuple[Tensor, Tensor]:
    """Change of variables: log q(z_T) = log q(z_0) - Σ raw_logdet."""
    z_t, sum_logdet = stack_forward(s, z0)
    return z_t, as_tensor(log_q0) - sum_logdet


def planar_jacobian(p: PlanarFlowParams, z: np.ndarray) -> np.ndarray:
    """Dense Jacobians I + û φ(z) wᵀ for a batch of points, shape (B, d, d)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    with no_grad():
        u_hat = project_u(p).data
    w, b = p.w.data, p.b.data
    phi = 1.0 - np.tanh(z @ w + b) ** 2
    eye = np.eye(p.dim)
    return eye[None, :, :] + phi[:, None, None] * np.outer(u_hat, w)[None, :, :]
