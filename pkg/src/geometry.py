#!/usr/bin/env python3
"""
WAE-RNF - Latent Geometry
Pull-back Riemannian metric G = JᵀJ of a flow stack, discrete curve length and
energy, and a gradient-descent geodesic solver with fixed endpoints.
"""

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from flows import FlowStack, planar_jacobian, project_u, stack_forward
from grad_core import Tensor, backward, concat, no_grad, tanh
from rnf_utils import ContractError, DimensionError, NonFiniteError

logger = logging.getLogger('geometry')

MAX_HALVINGS = 30


@dataclass(eq=False)
class Curve:
    """Discretized path γ_0 … γ_N on a uniform grid over [a, b]."""
    points: np.ndarray
    a: float = 0.0
    b: float = 1.0
    converged: bool = True
    energy_trace: Tuple[float, ...] = ()

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise ContractError(f"curve needs at least two points (N >= 1), got shape {pts.shape}")
        if not self.b > self.a:
            raise ContractError(f"curve parameter domain [{self.a}, {self.b}] is empty")
        pts.setflags(write=False)
        self.points = pts

    @property
    def N(self) -> int:
        return self.points.shape[0] - 1

    @property
    def dt(self) -> float:
        return (self.b - self.a) / self.N

    @property
    def start(self) -> np.ndarray:
        return self.points[0]

    @property
    def end(self) -> np.ndarray:
        return self.points[-1]

    @classmethod
    def straight(cls, za, zb, N: int, a: float = 0.0, b: float = 1.0) -> 'Curve':
        za, zb = np.asarray(za, dtype=np.float64), np.asarray(zb, dtype=np.float64)
        t = np.linspace(0.0, 1.0, N + 1)[:, None]
        pts = (1.0 - t) * za[None, :] + t * zb[None, :]
        pts[0], pts[-1] = za, zb
        return cls(pts, a, b)

    def with_interior(self, interior: np.ndarray) -> 'Curve':
        pts = np.vstack([self.start[None, :], interior, self.end[None, :]])
        return Curve(pts, self.a, self.b)

    def reversed(self) -> 'Curve':
        return Curve(self.points[::-1].copy(), self.a, self.b, self.converged, self.energy_trace)


@dataclass(eq=False)
class MetricTensor:
    """G(z) = J(z)ᵀ J(z) at one latent point."""
    G: np.ndarray
    source: FlowStack

    def inner(self, u, v) -> float:
        """⟨u, v⟩_G = uᵀ G v."""
        return float(np.asarray(u) @ self.G @ np.asarray(v))

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.G))


def _flow_numpy(s: FlowStack):
    """Per-flow (û, w, b) arrays for repeated numpy evaluation."""
    with no_grad():
        return [(project_u(f).data, f.w.data, float(f.b.data)) for f in s.flows]


def stack_jacobians(s: FlowStack, z) -> np.ndarray:
    """Batched Jacobian of the whole stack, J = J_T ⋯ J_1, shape (B, d, d)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    J = np.broadcast_to(np.eye(z.shape[1]), (len(z), z.shape[1], z.shape[1])).copy()
    for flow, (u_hat, w, b) in zip(s.flows, _flow_numpy(s)):
        J = planar_jacobian(flow, z) @ J
        z = z + np.tanh(z @ w + b)[:, None] * u_hat[None, :]
    return J


def stack_jacobian(s: FlowStack, z) -> np.ndarray:
    return stack_jacobians(s, np.asarray(z, dtype=np.float64).reshape(1, -1))[0]


def pullback_metric(s: FlowStack, z) -> MetricTensor:
    J = stack_jacobian(s, z)
    return MetricTensor(J.T @ J, s)


def det_metrics(s: FlowStack, z) -> np.ndarray:
    """|det G| = exp(2 Σ raw_logdet) for a batch of points."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if not s.flows:
        return np.ones(len(z))
    with no_grad():
        _, sum_logdet = stack_forward(s, Tensor(z))
    return np.exp(2.0 * sum_logdet.data)


def det_metric(s: FlowStack, z) -> float:
    return float(det_metrics(s, np.asarray(z, dtype=np.float64).reshape(1, -1))[0])


def _pushed_increments(s: FlowStack, c: Curve) -> np.ndarray:
    """J(γ_i) Δγ_i for every segment (left-endpoint rule)."""
    delta = np.diff(c.points, axis=0)
    J = stack_jacobians(s, c.points[:-1])
    return np.einsum('nij,nj->ni', J, delta)


def curve_length(s: FlowStack, c: Curve) -> float:
    """Σ_i sqrt(Δγ_iᵀ G(γ_i) Δγ_i)."""
    return float(np.linalg.norm(_pushed_increments(s, c), axis=1).sum())


def curve_energy(s: FlowStack, c: Curve) -> float:
    """(1/2) Σ_i Δγ_iᵀ G(γ_i) Δγ_i / Δt."""
    return float(0.5 * (_pushed_increments(s, c) ** 2).sum() / c.dt)


def energy_tensor(flows: List[Tuple[np.ndarray, np.ndarray, float]], start: np.ndarray,
                  interior: Tensor, end: np.ndarray, dt: float) -> Tensor:
    """
    Differentiable discrete energy in the interior points.

    J(γ)Δ is carried through the planar chain as a Jacobian-vector product:
    v ← v + û φ(z) (wᵀv), z ← f(z).
    """
    pts = concat([Tensor(start[None, :]), interior, Tensor(end[None, :])], axis=0)
    z = pts[:-1]
    v = pts[1:] - z
    for u_hat, w, b in flows:
        h = tanh(z @ w + b)
        phi = 1.0 - h.square()
        v = v + (phi * (v @ w)).reshape(-1, 1) * u_hat
        z = z + h.reshape(-1, 1) * u_hat
    return v.square().sum() * (0.5 / dt)


def geodesic(s: FlowStack, za, zb, N: int = 32, iters: int = 500,
             step: float = None, tol: float = 1e-10) -> Curve:
    """
    Minimize the discrete curve energy with fixed endpoints.

    Starts from the straight segment and runs gradient descent with Armijo
    backtracking (halving, at most 30 halvings), so the energy never increases.
    When ``iters`` runs out the best iterate is returned with ``converged=False``.
    """
    za, zb = np.asarray(za, dtype=np.float64), np.asarray(zb, dtype=np.float64)
    if za.shape != zb.shape or za.ndim != 1:
        raise DimensionError(f"geodesic: endpoints {za.shape} and {zb.shape} must be equal vectors")
    if s.dim is not None and s.dim != za.shape[0]:
        raise DimensionError(f"geodesic: endpoints have width {za.shape[0]}, flows have {s.dim}")
    if np.array_equal(za, zb):
        raise ContractError("geodesic: endpoints coincide")
    if N < 1:
        raise ContractError(f"geodesic: need N >= 1 segments, got {N}")

    init = Curve.straight(za, zb, N)
    if N == 1:
        return Curve(init.points, converged=True, energy_trace=(curve_energy(s, init),))

    flows = _flow_numpy(s)
    dt = init.dt
    interior = init.points[1:-1].copy()

    def evaluate(x: np.ndarray, with_grad: bool):
        if not with_grad:
            with no_grad():
                return energy_tensor(flows, za, Tensor(x), zb, dt).item(), None
        leaf = Tensor(x, requires_grad=True)
        energy = energy_tensor(flows, za, leaf, zb, dt)
        backward(energy)
        return energy.item(), leaf.grad

    energy, grad = evaluate(interior, True)
    trace = [energy]
    step = dt / 4.0 if step is None else step
    converged = False
    for _ in range(iters):
        g2 = float((grad ** 2).sum())
        if g2 <= tol ** 2:
            converged = True
            break
        trial = step
        accepted = None
        for _ in range(MAX_HALVINGS + 1):
            candidate = interior - trial * grad
            try:
                cand_energy, _ = evaluate(candidate, False)
            except NonFiniteError:
                trial *= 0.5
                continue
            if cand_energy <= energy - 1e-4 * trial * g2 and cand_energy < energy:
                accepted = candidate
                break
            trial *= 0.5
        if accepted is None:
            converged = True
            break
        improvement = energy - cand_energy
        interior = accepted
        energy, grad = evaluate(interior, True)
        trace.append(energy)
        step = 2.0 * trial
        if improvement <= tol * max(energy, 1.0):
            converged = True
            break

    if not converged:
        logger.warning(f"⚠️  geodesic solver stopped after {iters} iterations without converging "
                       f"(energy {trace[0]:.6g} → {trace[-1]:.6g})")
    pts = np.vstack([za[None, :], interior, zb[None, :]])
    return Curve(pts, init.a, init.b, converged, tuple(trace))


def curvature_grid(s: FlowStack, lo: float = -3.0, hi: float = 3.0,
                   n: int = 100) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """sqrt det G on an n × n grid over [lo, hi]²; 2-D latent spaces only."""
    if s.dim is not None and s.dim != 2:
        raise DimensionError(f"curvature grid needs a 2-D latent space, flows have d={s.dim}")
    xs = np.linspace(lo, hi, n)
    ys = np.linspace(lo, hi, n)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    values = np.sqrt(det_metrics(s, pts)).reshape(n, n)
    return xs, ys, values
