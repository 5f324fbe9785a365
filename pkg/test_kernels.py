"""
Covariance kernels and jittered Cholesky
"""
import numpy as np
import pytest
from pydantic import ValidationError

from errors import NetworkError, NotPositiveDefiniteError
from kernels import JITTER_START, KernelParams, diffusion_kernel, normalized_laplacian, se_kernel, stabilized_cholesky


def path_graph(n):
    J = np.zeros((n, n))
    for i in range(n - 1):
        J[i, i + 1] = J[i + 1, i] = 1.0
    return J


def test_cholesky_of_well_conditioned_matrix():
    K = np.array([[4.0, 1.0], [1.0, 3.0]])
    L, jitter = stabilized_cholesky(K)
    assert jitter == JITTER_START
    assert np.allclose(L @ L.T, K, atol=1e-8)
    assert np.allclose(L, np.tril(L))


def test_cholesky_rejects_negative_definite():
    with pytest.raises(NotPositiveDefiniteError):
        stabilized_cholesky(-np.eye(3))


def test_cholesky_rejects_asymmetric():
    with pytest.raises(NotPositiveDefiniteError, match="not symmetric"):
        stabilized_cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_normalized_laplacian_spectrum():
    L = normalized_laplacian(path_graph(5))
    eig = np.linalg.eigvalsh(L)
    assert eig[0] == pytest.approx(0.0, abs=1e-10)
    assert eig[-1] <= 2.0 + 1e-10
    assert np.allclose(np.diag(L), 1.0)


def test_normalized_laplacian_rejects_isolated_vertex():
    J = path_graph(4)
    J[3, 2] = J[2, 3] = 0.0
    with pytest.raises(NetworkError, match="isolated"):
        normalized_laplacian(J)


def test_diffusion_kernel_alpha_zero_is_identity():
    K = diffusion_kernel(path_graph(4), 0.0)
    assert np.allclose(K.values, np.eye(4))


def test_diffusion_kernel_is_correlated_along_edges():
    K = diffusion_kernel(path_graph(5), 0.5)
    assert np.allclose(K.values, K.values.T)
    eig = np.linalg.eigvalsh(K.values)
    assert eig.min() >= np.exp(-1.0) - 1e-10
    assert eig.max() <= 1.0 + 1e-10
    assert K.values[0, 1] > K.values[0, 4] > -1e-12
    assert K.dim == 5


def test_se_kernel_entries():
    params = KernelParams(alpha=0.2, lengthscale=2.0, variance=1.5)
    K = se_kernel(5, params)
    assert np.allclose(np.diag(K.values), 1.5)
    assert K.values[0, 1] == pytest.approx(1.5 * np.exp(-1.0 / 8.0))
    assert K.values[0, 4] == pytest.approx(1.5 * np.exp(-16.0 / 8.0))


def test_kernel_sample_uses_cholesky_factor():
    K = se_kernel(3, KernelParams())
    rng = np.random.default_rng(0)
    draws = np.stack([K.sample(rng) for _ in range(4000)])
    assert np.allclose(np.cov(draws.T), K.values, atol=0.1)


def test_kernel_params_must_be_positive():
    with pytest.raises(ValidationError):
        KernelParams(lengthscale=0.0)
    with pytest.raises(ValidationError):
        KernelParams(alpha=-0.1)
