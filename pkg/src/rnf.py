#!/usr/bin/env python3
"""
WAE-RNF - Riemannian Normalizing Flow
Kernel regularization of the planar-flow Jacobian against latent clusters.

The regularized determinant |1 + ûᵀφ(z)w| · 𝒦(z, c_k) rewards large Jacobians
away from the cluster centers c_k gathered from a pre-trained plain VAE, which
curves the transformed latent space around the data manifold.
"""

import logging
import os
import struct
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from flows import FlowStack, PlanarFlowParams, planar_forward
from grad_core import Tensor, as_tensor
from rnf_utils import ContractError, DimensionError

logger = logging.getLogger('rnf')

DEFAULT_NUM_CLUSTERS = 20
DEFAULT_SCALES = (0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0)
DEFAULT_BETA = 10.0
KERNEL_KINDS = ('inverse-multiquadratic', 'gaussian')

_HEADER = struct.Struct('<qq')


@dataclass(frozen=True, eq=False)
class ClusterSet:
    """K × d matrix of latent cluster centers; immutable once built."""
    centers: np.ndarray

    def __post_init__(self):
        centers = np.array(self.centers, dtype=np.float64)
        if centers.ndim != 2 or centers.shape[0] < 1:
            raise ContractError(f"cluster set needs a non-empty K × d matrix, got shape {centers.shape}")
        if len(np.unique(centers, axis=0)) != len(centers):
            raise ContractError("cluster set contains identical centers")
        centers.setflags(write=False)
        object.__setattr__(self, 'centers', centers)

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def save(self, path: str) -> None:
        """Header {K, d} as two little-endian int64, then row-major float64 centers."""
        tmp_path = path + '.tmp'
        with open(tmp_path, 'wb') as f:
            f.write(_HEADER.pack(self.K, self.dim))
            f.write(self.centers.astype('<f8').tobytes(order='C'))
        os.replace(tmp_path, path)
        logger.info(f"Saved {self.K} cluster centers (d={self.dim}) to {path}")

    @classmethod
    def load(cls, path: str) -> 'ClusterSet':
        with open(path, 'rb') as f:
            raw = f.read()
        if len(raw) < _HEADER.size:
            raise ContractError(f"cluster artifact {path} is truncated")
        k, d = _HEADER.unpack_from(raw)
        body = np.frombuffer(raw, dtype='<f8', offset=_HEADER.size)
        if body.size != k * d:
            raise ContractError(f"cluster artifact {path}: header says {k}×{d}, found {body.size} values")
        return cls(body.reshape(k, d).astype(np.float64))


@dataclass(frozen=True)
class KernelConfig:
    """Kernel family 𝒦 regularizing the flow Jacobian."""
    kind: str = 'inverse-multiquadratic'
    s_values: Tuple[float, ...] = DEFAULT_SCALES
    beta: float = DEFAULT_BETA
    d: int = 32

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ContractError(f"kernel kind must be one of {KERNEL_KINDS}, got '{self.kind}'")
        object.__setattr__(self, 's_values', tuple(float(s) for s in self.s_values))
        if self.kind == 'inverse-multiquadratic':
            if not self.s_values or any(s <= 0 for s in self.s_values):
                raise ContractError("inverse-multiquadratic kernel needs positive s-values")
        if self.kind == 'gaussian' and self.beta <= 0:
            raise ContractError(f"gaussian kernel needs beta > 0, got {self.beta}")

    @property
    def max_value(self) -> float:
        return float(len(self.s_values)) if self.kind == 'inverse-multiquadratic' else 1.0


def nearest_clusters(z: np.ndarray, cs: ClusterSet) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized argmin over centers for a batch; ties go to the lowest index."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != cs.dim:
        raise DimensionError(f"nearest cluster: latent width {z.shape[1]} != cluster width {cs.dim}")
    dist2 = ((z[:, None, :] - cs.centers[None, :, :]) ** 2).sum(axis=-1)
    k = np.argmin(dist2, axis=1)
    return k, dist2[np.arange(len(z)), k]


def nearest_cluster(z, cs: ClusterSet) -> Tuple[int, float]:
    if cs is None or cs.K == 0:
        raise ContractError("nearest cluster: empty cluster set")
    k, dist2 = nearest_clusters(np.asarray(z, dtype=np.float64).reshape(1, -1), cs)
    return int(k[0]), float(dist2[0])


def kernel_value(z, c, cfg: KernelConfig) -> Tensor:
    """
    𝒦(z, c), differentiable in z. Works on a vector or row-wise on a batch.

    inverse-multiquadratic: Σ_s 2ds / (2ds + ‖z - c‖²)
    gaussian:               exp(-β ‖z - c‖²)
    """
    z = as_tensor(z)
    c = np.asarray(c, dtype=np.float64)
    if z.shape[-1] != c.shape[-1]:
        raise DimensionError(f"kernel: latent width {z.shape[-1]} != center width {c.shape[-1]}")
    if z.shape[-1] != cfg.d:
        raise DimensionError(f"kernel: latent width {z.shape[-1]} != configured width {cfg.d}")
    dist2 = (z - c).square().sum(axis=-1)
    if cfg.kind == 'gaussian':
        return (dist2 * -cfg.beta).exp()
    total = None
    for s in cfg.s_values:
        scale = 2.0 * cfg.d * s
        term = scale / (dist2 + scale)
        total = term if total is None else total + term
    return total


def regularized_logdet(p: PlanarFlowParams, z, cs: ClusterSet, cfg: KernelConfig) -> Tensor:
    """raw_logdet(z) + log 𝒦(z, c_nearest(z)); the argmin choice is held constant."""
    _, logdet = planar_forward(p, z)
    z = as_tensor(z)
    k, _ = nearest_clusters(z.data.reshape(-1, cs.dim), cs)
    centers = cs.centers[k] if z.ndim == 2 else cs.centers[k[0]]
    return logdet + kernel_value(z, centers, cfg).log()


def stack_regularized_forward(s: FlowStack, z0, cs: ClusterSet,
                              cfg: KernelConfig) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Run the stack, regularizing every layer at its own input point.

    Returns (z_T, Σ raw_logdet, Σ regularized_logdet).
    """
    z = as_tensor(z0)
    zeros = Tensor(np.zeros(z.shape[:-1]))
    if not s.flows:
        return z, zeros, zeros
    raw_total = reg_total = None
    for flow in s.flows:
        k, _ = nearest_clusters(z.data.reshape(-1, cs.dim), cs)
        centers = cs.centers[k] if z.ndim == 2 else cs.centers[k[0]]
        log_kernel = kernel_value(z, centers, cfg).log()
        z, logdet = planar_forward(flow, z)
        raw_total = logdet if raw_total is None else raw_total + logdet
        reg = logdet + log_kernel
        reg_total = reg if reg_total is None else reg_total + reg
    return z, raw_total, reg_total


def _kmeans_plus_plus(codes: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(codes)
    chosen: List[int] = [int(rng.integers(n))]
    closest = ((codes - codes[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = closest.sum()
        if total <= 0.0:
            raise ContractError(f"gather clusters: fewer than {K} distinct codes")
        idx = int(rng.choice(n, p=closest / total))
        chosen.append(idx)
        closest = np.minimum(closest, ((codes - codes[idx]) ** 2).sum(axis=1))
    return codes[chosen].copy()


def update_centers(codes: np.ndarray, centers: np.ndarray, labels: np.ndarray,
                   dist2: np.ndarray) -> np.ndarray:
    """One Lloyd update. Empty clusters restart at distinct far-away codes."""
    n = len(codes)
    spread = dist2[np.arange(n), labels].copy()
    updated = centers.copy()
    for j in range(len(centers)):
        members = codes[labels == j]
        if len(members):
            updated[j] = members.mean(axis=0)
        else:
            far = int(np.argmax(spread))
            spread[far] = -np.inf
            updated[j] = codes[far]
    return updated


def gather_clusters(codes: np.ndarray, K: int = DEFAULT_NUM_CLUSTERS, seed: int = 0,
                    max_iter: int = 100) -> ClusterSet:
    """
    Lloyd's k-means with k-means++ seeding; stops at an assignment fixpoint
    or after ``max_iter`` iterations. Deterministic under ``seed``.
    """
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim != 2:
        raise DimensionError(f"gather clusters: codes must be N × d, got {codes.shape}")
    n = len(codes)
    if K < 1 or n < K:
        raise ContractError(f"gather clusters: need N >= K >= 1, got N={n}, K={K}")

    rng = np.random.default_rng(seed)
    centers = _kmeans_plus_plus(codes, K, rng)
    labels = np.full(n, -1)
    for iteration in range(max_iter):
        dist2 = ((codes[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
        new_labels = np.argmin(dist2, axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centers = update_centers(codes, centers, labels, dist2)
    logger.info(f"k-means: {K} clusters from {n} codes after {iteration + 1} iterations")
    return ClusterSet(centers)


def kernel_config_from(kind: str, s_values: Sequence[float], beta: float, d: int) -> KernelConfig:
    aliases = {'imq': 'inverse-multiquadratic', 'rbf': 'gaussian'}
    return KernelConfig(aliases.get(kind, kind), tuple(s_values), beta, d)
