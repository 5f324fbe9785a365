"""
Covariance kernels for the GP priors on the station and time factors.

K_S is a diffusion kernel expm(-alpha * L_norm) over the station graph and K_T
a squared-exponential kernel over interval indices. Both are factorized once
with escalating jitter and shared read-only by every chain.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
from pydantic import BaseModel, field_validator

from errors import NetworkError, NotPositiveDefiniteError

logger = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_CAP = 1e-4
SYMMETRY_TOL = 1e-10


class KernelParams(BaseModel):
    alpha: float = 0.2
    lengthscale: float = 3.0
    variance: float = 1.0

    @field_validator('alpha', 'lengthscale', 'variance')
    @classmethod
    def validate_positive(cls, v):
        if not v > 0:
            raise ValueError('kernel parameters must be > 0')
        return v


@dataclass(frozen=True, eq=False)
class KernelMatrix:
    values: np.ndarray
    chol: np.ndarray
    jitter: float

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """One draw from N(0, K)"""
        return self.chol @ rng.standard_normal(self.dim)


def stabilized_cholesky(K: np.ndarray, jitter_start: float = JITTER_START,
                        jitter_cap: float = JITTER_CAP) -> tuple[np.ndarray, float]:
    """
    Lower Cholesky factor of K + jitter*I. Jitter starts at jitter_start and
    grows by x10 until the factorization succeeds or exceeds jitter_cap.
    """
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise NotPositiveDefiniteError(f"Expected a square matrix, got shape {K.shape}")
    asymmetry = np.max(np.abs(K - K.T)) if K.size else 0.0
    if asymmetry > SYMMETRY_TOL * max(1.0, np.max(np.abs(K))):
        raise NotPositiveDefiniteError(f"Matrix is not symmetric (max asymmetry {asymmetry:.3g})")
    K = 0.5 * (K + K.T)

    eye = np.eye(K.shape[0])
    jitter = jitter_start
    while jitter <= jitter_cap * (1 + 1e-12):
        try:
            L = la.cholesky(K + jitter * eye, lower=True)
            if jitter > jitter_start:
                logger.warning(f"[Kernel] Cholesky needed jitter {jitter:.1e}")
            return L, jitter
        except la.LinAlgError:
            jitter *= 10.0
    raise NotPositiveDefiniteError(
        f"Matrix is not positive definite even with jitter {jitter_cap:.1e}")


def normalized_laplacian(adjacency: np.ndarray) -> np.ndarray:
    """D^-1/2 (D - J) D^-1/2"""
    J = np.asarray(adjacency, dtype=float)
    if J.ndim != 2 or J.shape[0] != J.shape[1]:
        raise NetworkError(f"Adjacency must be square, got shape {J.shape}")
    if not np.allclose(J, J.T, atol=SYMMETRY_TOL):
        raise NetworkError("Adjacency must be symmetric")
    if np.any(J < 0) or np.any(np.diag(J) != 0):
        raise NetworkError("Adjacency must be non-negative with a zero diagonal")
    degree = J.sum(axis=1)
    isolated = np.flatnonzero(degree <= 0)
    if isolated.size:
        raise NetworkError("Normalized Laplacian undefined for isolated vertices",
                           [f"vertex {i} has degree 0" for i in isolated])
    d = 1.0 / np.sqrt(degree)
    return np.eye(J.shape[0]) - d[:, None] * J * d[None, :]


def diffusion_kernel(adjacency: np.ndarray, alpha: float, jitter_start: float = JITTER_START,
                     jitter_cap: float = JITTER_CAP) -> KernelMatrix:
    """expm(-alpha * L_norm), evaluated through the symmetric eigendecomposition"""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    L = normalized_laplacian(adjacency)
    eigvals, eigvecs = np.linalg.eigh(L)
    K = (eigvecs * np.exp(-alpha * eigvals)) @ eigvecs.T
    K = 0.5 * (K + K.T)
    chol, jitter = stabilized_cholesky(K, jitter_start, jitter_cap)
    logger.debug(f"[Kernel] Diffusion kernel n={K.shape[0]} alpha={alpha}")
    return KernelMatrix(values=K, chol=chol, jitter=jitter)


def se_kernel(T: int, params: KernelParams, jitter_start: float = JITTER_START,
              jitter_cap: float = JITTER_CAP) -> KernelMatrix:
    """Squared-exponential covariance over interval indices 1..T"""
    if T < 1:
        raise ValueError("T must be >= 1")
    t = np.arange(1, T + 1, dtype=float)
    d2 = (t[:, None] - t[None, :]) ** 2
    K = params.variance * np.exp(-d2 / (2.0 * params.lengthscale ** 2))
    chol, jitter = stabilized_cholesky(K, jitter_start, jitter_cap)
    return KernelMatrix(values=K, chol=chol, jitter=jitter)
