#!/usr/bin/env python3
"""Tests for cluster gathering, kernels and kernel-regularized log-dets."""

import os
import sys
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

import numpy as np
import pytest

from flows import FlowStack, PlanarFlowParams, planar_jacobian
from grad_core import gradcheck, parameter
from rnf import (DEFAULT_SCALES, ClusterSet, KernelConfig, gather_clusters, kernel_config_from, kernel_value,
                 nearest_cluster, nearest_clusters, regularized_logdet, stack_regularized_forward,
                 update_centers)
from rnf_utils import ContractError, DimensionError

GAUSS = KernelConfig('gaussian', beta=10.0, d=2)
IMQ = KernelConfig('inverse-multiquadratic', DEFAULT_SCALES, d=3)


def test_nearest_cluster_on_a_center():
    centers = np.random.default_rng(0).normal(size=(8, 3))
    assert nearest_cluster(centers[5], ClusterSet(centers)) == (5, 0.0)


def test_nearest_cluster_simple_geometry():
    cs = ClusterSet(np.array([[0.0, 0.0], [4.0, 0.0]]))
    assert nearest_cluster(np.array([1.0, 0.0]), cs) == (0, 1.0)


def test_nearest_clusters_match_exhaustive_scan():
    rng = np.random.default_rng(1)
    cs = ClusterSet(rng.normal(size=(20, 32)))
    z = rng.normal(size=(50, 32))
    k, dist2 = nearest_clusters(z, cs)
    for i in range(len(z)):
        scan = [float(((z[i] - c) ** 2).sum()) for c in cs.centers]
        assert k[i] == int(np.argmin(scan))
        assert dist2[i] == pytest.approx(min(scan), rel=1e-12)


def test_cluster_set_validation():
    with pytest.raises(ContractError):
        ClusterSet(np.zeros((0, 2)))
    with pytest.raises(ContractError):
        ClusterSet(np.array([[1.0, 2.0], [1.0, 2.0]]))
    with pytest.raises(DimensionError):
        nearest_cluster(np.zeros(3), ClusterSet(np.eye(2)))


def test_cluster_set_save_load_round_trip(tmp_path):
    cs = ClusterSet(np.random.default_rng(2).normal(size=(20, 4)))
    path = str(tmp_path / 'clusters.bin')
    cs.save(path)
    assert os.path.getsize(path) == 16 + 20 * 4 * 8
    loaded = ClusterSet.load(path)
    assert loaded.centers.tobytes() == cs.centers.tobytes()


def test_truncated_cluster_file(tmp_path):
    path = tmp_path / 'broken.bin'
    path.write_bytes(b'\x02\x00')
    with pytest.raises(ContractError):
        ClusterSet.load(str(path))


def test_kernel_values_on_the_center():
    c = np.array([0.3, -0.2, 1.0])
    assert kernel_value(c, c, IMQ).item() == pytest.approx(7.0, abs=1e-15)
    assert kernel_value(c, c, KernelConfig('gaussian', d=3)).item() == 1.0


def test_gaussian_kernel_value():
    z = np.array([0.1, 0.0])
    assert kernel_value(z, np.zeros(2), GAUSS).item() == pytest.approx(np.exp(-0.1), rel=1e-14)
    assert np.exp(-0.1) == pytest.approx(0.904837, abs=1e-6)


def test_kernel_rejects_a_width_other_than_configured():
    z = np.zeros((4, 3))
    with pytest.raises(DimensionError):
        kernel_value(z, np.zeros(3), KernelConfig('inverse-multiquadratic', d=2))
    with pytest.raises(DimensionError):
        kernel_value(z, np.zeros(3), KernelConfig('gaussian', d=5))


def test_kernel_config_validation():
    with pytest.raises(ContractError):
        KernelConfig('laplace')
    with pytest.raises(ContractError):
        KernelConfig('gaussian', beta=0.0)
    with pytest.raises(ContractError):
        KernelConfig('inverse-multiquadratic', s_values=())
    assert kernel_config_from('rbf', (1.0,), 2.0, 4).kind == 'gaussian'
    assert kernel_config_from('imq', (1.0,), 2.0, 4).kind == 'inverse-multiquadratic'


def test_regularized_logdet_identity_flow_on_center():
    cs = ClusterSet(np.array([[0.0, 0.0], [2.0, 2.0]]))
    p = PlanarFlowParams.identity(2)
    assert regularized_logdet(p, np.array([2.0, 2.0]), cs, GAUSS).item() == 0.0
    assert regularized_logdet(p, np.array([0.1, 0.0]), cs, GAUSS).item() == pytest.approx(-0.1, rel=1e-12)


@pytest.mark.parametrize('seed', range(10))
def test_regularized_logdet_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    d = 3
    cs = ClusterSet(rng.normal(size=(5, d)))
    p = PlanarFlowParams.from_arrays(rng.normal(size=d), rng.normal(size=d), rng.normal())
    z = rng.normal(size=d)
    k, dist2 = nearest_cluster(z, cs)
    kernel = sum(2 * d * s / (2 * d * s + dist2) for s in IMQ.s_values)
    dense = np.log(abs(np.linalg.det(planar_jacobian(p, z[None, :])[0])) * kernel)
    assert regularized_logdet(p, z, cs, IMQ).item() == pytest.approx(dense, abs=1e-10)


def test_kernel_never_exceeds_its_maximum():
    rng = np.random.default_rng(4)
    cs = ClusterSet(rng.normal(size=(6, 3)))
    z = rng.normal(size=(200, 3)) * 3
    for cfg in (IMQ, KernelConfig('gaussian', d=3)):
        k, _ = nearest_clusters(z, cs)
        values = kernel_value(z, cs.centers[k], cfg).data
        assert np.all(values <= cfg.max_value + 1e-12)
        assert np.all(values > 0)


def test_stack_regularized_forward_reduces_to_raw_on_centers():
    cs = ClusterSet(np.array([[0.0, 0.0], [1.0, 1.0]]))
    stack = FlowStack([PlanarFlowParams.identity(2) for _ in range(3)])
    z_t, raw, reg = stack_regularized_forward(stack, cs.centers.copy(), cs, GAUSS)
    np.testing.assert_array_equal(z_t.data, cs.centers)
    np.testing.assert_array_equal(raw.data, [0.0, 0.0])
    np.testing.assert_array_equal(reg.data, [0.0, 0.0])


def test_stack_regularized_forward_empty_stack():
    cs = ClusterSet(np.eye(2))
    z = np.ones((3, 2))
    z_t, raw, reg = stack_regularized_forward(FlowStack(), z, cs, GAUSS)
    np.testing.assert_array_equal(z_t.data, z)
    np.testing.assert_array_equal(reg.data, np.zeros(3))


@pytest.mark.parametrize('seed', range(8))
def test_regularized_logdet_gradients(seed):
    rng = np.random.default_rng(50 + seed)
    cs = ClusterSet(rng.normal(size=(4, 3)))
    p = PlanarFlowParams.from_arrays(rng.normal(size=3), rng.normal(size=3), rng.normal())
    z = parameter(rng.normal(size=(5, 3)))
    for cfg in (IMQ, KernelConfig('gaussian', beta=0.5, d=3)):
        def fn(z, u, w, b):
            return regularized_logdet(PlanarFlowParams(u, w, b), z, cs, cfg).sum()
        assert gradcheck(fn, [z, p.u, p.w, p.b]).passed


def test_gather_clusters_with_n_equal_k():
    points = np.random.default_rng(5).normal(size=(6, 2))
    cs = gather_clusters(points, K=6, seed=3)
    got = sorted(map(tuple, cs.centers))
    assert got == sorted(map(tuple, points))


def test_gather_clusters_finds_blob_means():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(200, 2)) * 0.3 + np.array([-5.0, 0.0])
    b = rng.normal(size=(200, 2)) * 0.3 + np.array([5.0, 1.0])
    cs = gather_clusters(np.vstack([a, b]), K=2, seed=0)
    centers = sorted(map(tuple, cs.centers))
    np.testing.assert_allclose(centers[0], a.mean(axis=0), atol=0.1)
    np.testing.assert_allclose(centers[1], b.mean(axis=0), atol=0.1)


def test_gather_clusters_is_deterministic():
    codes = np.random.default_rng(7).normal(size=(300, 4))
    first = gather_clusters(codes, K=20, seed=11)
    second = gather_clusters(codes, K=20, seed=11)
    assert first.centers.tobytes() == second.centers.tobytes()


def test_gather_clusters_needs_enough_codes():
    with pytest.raises(ContractError):
        gather_clusters(np.zeros((3, 2)) + np.arange(3)[:, None], K=5)


def test_empty_clusters_restart_at_distinct_codes():
    codes = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 0.0], [5.1, 0.0]])
    centers = np.array([[0.0, 0.0], [100.0, 100.0], [-100.0, -100.0]])
    dist2 = ((codes[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    labels = np.argmin(dist2, axis=1)
    assert set(labels) == {0}
    updated = update_centers(codes, centers, labels, dist2)
    np.testing.assert_allclose(updated[0], [2.55, 0.0])
    np.testing.assert_array_equal(updated[1], [5.1, 0.0])
    np.testing.assert_array_equal(updated[2], [5.0, 0.0])
    ClusterSet(updated)
