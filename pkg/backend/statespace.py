"""
Linear-Gaussian state-space core.

Observation: a trip on path k at interval t has travel time
    y ~ N(A_k x_t, A_k (clamp(x_t) * sigma)^2)
State: x_1 ~ N(m0, P0), x_{t+1} = x_t + N(0, diag(tau2)).

Within one Gibbs sweep the observation variances are evaluated at the previous
iterate of x, so the conditional model FFBS sees is exactly linear-Gaussian.
Trips are aggregated by (path, interval) because every trip on the same path
in the same interval shares its routing row and its variance.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.linalg as la
from scipy import sparse
from scipy.stats import norm

from errors import ConfigError, DataValidationError, NotPositiveDefiniteError
from kernels import stabilized_cholesky
from network import COST_KINDS, NetworkModel, PathTable, RoutingRow

logger = logging.getLogger(__name__)

VARIANCE_FLOOR_S = 1.0
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class NoiseScale:
    """Coefficients of variation of the four cost kinds"""
    sigma_a: float
    sigma_h: float
    sigma_u: float
    sigma_e: float

    def __post_init__(self):
        bad = [name for name, v in zip(("sigma_a", "sigma_h", "sigma_u", "sigma_e"), self.as_array())
               if not (np.isfinite(v) and v > 0)]
        if bad:
            raise ConfigError("Coefficients of variation must be positive", bad)

    @classmethod
    def from_array(cls, values) -> "NoiseScale":
        a, h, u, e = (float(v) for v in values)
        return cls(a, h, u, e)

    def as_array(self) -> np.ndarray:
        return np.array([self.sigma_a, self.sigma_h, self.sigma_u, self.sigma_e])

    def expand(self, net: NetworkModel) -> np.ndarray:
        """(sigma_a 1_l, sigma_h 1_l, sigma_u 1_s, sigma_e 1_n)"""
        sizes = [net.index_map.sizes[k] for k in COST_KINDS]
        return np.repeat(self.as_array(), sizes)


@dataclass(eq=False)
class CostState:
    x: np.ndarray      # T x c, seconds
    tau2: np.ndarray   # c
    m0: np.ndarray     # c
    P0: np.ndarray     # c x c

    def __post_init__(self):
        problems = []
        c = self.m0.shape[0]
        if self.x.ndim != 2 or self.x.shape[1] != c:
            problems.append(f"x must be T x {c}, got {self.x.shape}")
        if self.tau2.shape != (c,):
            problems.append(f"tau2 must have length {c}")
        elif np.any(self.tau2 <= 0):
            problems.append("tau2 must be strictly positive")
        if self.P0.shape != (c, c):
            problems.append(f"P0 must be {c} x {c}")
        elif not np.allclose(self.P0, self.P0.T) or np.min(np.linalg.eigvalsh(self.P0)) <= 0:
            problems.append("P0 must be symmetric positive definite")
        if problems:
            raise ConfigError("Invalid cost state", problems)

    @property
    def T(self) -> int:
        return self.x.shape[0]


@dataclass(eq=False)
class FilterState:
    mu_filt: np.ndarray   # T x c
    P_filt: np.ndarray    # T x c x c
    mu_pred: np.ndarray   # T x c, mu_pred[0] = m0
    P_pred: np.ndarray    # T x c x c, P_pred[0] = P0


@dataclass(eq=False)
class ObservationStats:
    """Sufficient statistics of trip travel times per (path, interval)"""
    counts: np.ndarray   # P x T
    sums: np.ndarray
    sumsq: np.ndarray

    @property
    def n_trips(self) -> int:
        return int(self.counts.sum())


def aggregate_observations(path_index: np.ndarray, t_index: np.ndarray, y: np.ndarray,
                           n_paths: int, T: int) -> ObservationStats:
    """Bin trips by (path, interval); t_index is 0-based"""
    path_index = np.asarray(path_index, dtype=int)
    t_index = np.asarray(t_index, dtype=int)
    y = np.asarray(y, dtype=float)
    cell = path_index * T + t_index
    size = n_paths * T
    counts = np.bincount(cell, minlength=size).reshape(n_paths, T).astype(float)
    sums = np.bincount(cell, weights=y, minlength=size).reshape(n_paths, T)
    sumsq = np.bincount(cell, weights=y * y, minlength=size).reshape(n_paths, T)
    return ObservationStats(counts=counts, sums=sums, sumsq=sumsq)


def _sigma_vector(sigma: Union[NoiseScale, np.ndarray], net: Optional[NetworkModel], c: int) -> np.ndarray:
    if isinstance(sigma, NoiseScale):
        if net is None:
            raise ConfigError("Expanding a NoiseScale needs the network layout")
        return sigma.expand(net)
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (c,):
        raise ConfigError(f"Noise vector has shape {sigma.shape}, expected ({c},)")
    return sigma


def observation_variance(x_t: np.ndarray, sigma: Union[NoiseScale, np.ndarray], row: RoutingRow,
                         net: Optional[NetworkModel] = None,
                         floor_s: float = VARIANCE_FLOOR_S) -> float:
    """row . (max(x_t, floor) * sigma)^2, in seconds^2"""
    x_t = np.asarray(x_t, dtype=float)
    s = _sigma_vector(sigma, net, len(x_t))
    scaled = np.maximum(x_t[row.cols], floor_s) * s[row.cols]
    return float(np.sum(scaled ** 2))


def trip_loglik(y: float, x_t: np.ndarray, sigma: Union[NoiseScale, np.ndarray], row: RoutingRow,
                net: Optional[NetworkModel] = None, floor_s: float = VARIANCE_FLOOR_S) -> float:
    if not np.isfinite(y):
        raise DataValidationError(f"Non-finite travel time {y}")
    var = observation_variance(x_t, sigma, row, net, floor_s)
    return float(norm.logpdf(y, loc=row.dot(x_t), scale=np.sqrt(var)))


# ── Vectorized path moments ──

def path_means(x: np.ndarray, table: PathTable) -> np.ndarray:
    """(P, T) predicted travel times A_k x_t"""
    return np.asarray(table.routing @ x.T)


def block_squares(x: np.ndarray, table: PathTable, floor_s: float = VARIANCE_FLOOR_S) -> np.ndarray:
    """
    (4, P, T) per-kind sums of clamp(x)^2 along every path, so that the
    observation variance is sum_b sigma_b^2 * S[b].
    """
    sq = (np.maximum(x, floor_s) ** 2).T
    return np.stack([np.asarray(Ab @ sq) for Ab in table.routing_blocks])


def path_variances(x: np.ndarray, sigma4: np.ndarray, table: PathTable,
                   floor_s: float = VARIANCE_FLOOR_S) -> np.ndarray:
    return np.tensordot(np.asarray(sigma4) ** 2, block_squares(x, table, floor_s), axes=1)


def gaussian_loglik_stats(stats: ObservationStats, means: np.ndarray, variances: np.ndarray) -> float:
    """Sum of log N(y; mean, var) over all trips, from per-(path, t) statistics"""
    occupied = stats.counts > 0
    n = stats.counts[occupied]
    mu = means[occupied]
    var = variances[occupied]
    rss = stats.sumsq[occupied] - 2.0 * mu * stats.sums[occupied] + n * mu * mu
    rss = np.maximum(rss, 0.0)
    return float(-0.5 * np.sum(n * (LOG_2PI + np.log(var)) + rss / var))


# ── Filtering and sampling ──

def _chol(M: np.ndarray, what: str) -> np.ndarray:
    M = 0.5 * (M + M.T)
    try:
        return la.cholesky(M, lower=True)
    except la.LinAlgError:
        pass
    try:
        L, _ = stabilized_cholesky(M)
    except NotPositiveDefiniteError as e:
        raise NotPositiveDefiniteError(f"{what} is not positive definite", [str(e)]) from e
    return L


def _inverse(M: np.ndarray, what: str) -> np.ndarray:
    L = _chol(M, what)
    inv = la.cho_solve((L, True), np.eye(M.shape[0]))
    return 0.5 * (inv + inv.T)


def measurement_information(stats: ObservationStats, variances: np.ndarray,
                            table: PathTable, t: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Lambda_t = A_t^T Sigma_t^-1 A_t and eta_t = A_t^T Sigma_t^-1 y_t, accumulated
    over paths instead of trips. Never forms an M_t x M_t matrix.
    """
    w = stats.counts[:, t] / variances[:, t]
    A = table.routing
    Lam = (A.T @ sparse.diags(w) @ A).toarray()
    eta = np.asarray(A.T @ (stats.sums[:, t] / variances[:, t])).ravel()
    return Lam, eta


def information_filter(stats: ObservationStats, variances: np.ndarray, table: PathTable,
                       m0: np.ndarray, P0: np.ndarray, tau2: np.ndarray) -> FilterState:
    """Forward pass in information form. An interval without trips is a pure prediction step."""
    T = stats.counts.shape[1]
    c = m0.shape[0]
    mu_filt = np.empty((T, c))
    P_filt = np.empty((T, c, c))
    mu_pred = np.empty((T, c))
    P_pred = np.empty((T, c, c))
    Q = np.diag(tau2)

    for t in range(T):
        if t == 0:
            mu_pred[0], P_pred[0] = m0, P0
        else:
            mu_pred[t] = mu_filt[t - 1]
            P_pred[t] = P_filt[t - 1] + Q

        if stats.counts[:, t].sum() == 0:
            mu_filt[t], P_filt[t] = mu_pred[t], P_pred[t]
            continue

        Lam, eta = measurement_information(stats, variances, table, t)
        prior_info = _inverse(P_pred[t], f"Predictive covariance at t={t + 1}")
        P = _inverse(prior_info + Lam, f"Posterior information at t={t + 1}")
        mu_filt[t] = P @ (prior_info @ mu_pred[t] + eta)
        P_filt[t] = P

    return FilterState(mu_filt=mu_filt, P_filt=P_filt, mu_pred=mu_pred, P_pred=P_pred)


def information_gain(P_pred: np.ndarray, A: np.ndarray, obs_var: np.ndarray) -> np.ndarray:
    """K = P_{t|t} A^T Sigma^-1 with P_{t|t} = (P_pred^-1 + A^T Sigma^-1 A)^-1"""
    A = np.asarray(A, dtype=float)
    At_Sinv = A.T / np.asarray(obs_var, dtype=float)
    P = _inverse(_inverse(P_pred, "Predictive covariance") + At_Sinv @ A, "Posterior information")
    return P @ At_Sinv


def backward_sample(fs: FilterState, rng: np.random.Generator) -> np.ndarray:
    T, c = fs.mu_filt.shape
    x = np.empty((T, c))
    x[T - 1] = fs.mu_filt[T - 1] + _chol(fs.P_filt[T - 1], "Filtered covariance") @ rng.standard_normal(c)
    for t in range(T - 2, -1, -1):
        L_pred = _chol(fs.P_pred[t + 1], f"Predictive covariance at t={t + 2}")
        # J = P_filt P_pred^-1, both symmetric
        J = la.cho_solve((L_pred, True), fs.P_filt[t]).T
        mean = fs.mu_filt[t] + J @ (x[t + 1] - fs.mu_pred[t + 1])
        cov = fs.P_filt[t] - J @ fs.P_pred[t + 1] @ J.T
        x[t] = mean + _chol(cov, f"Backward covariance at t={t + 1}") @ rng.standard_normal(c)
    return x


def rts_smoother(fs: FilterState) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed means (T x c) and covariances (T x c x c)"""
    T, _ = fs.mu_filt.shape
    mu_s = fs.mu_filt.copy()
    P_s = fs.P_filt.copy()
    for t in range(T - 2, -1, -1):
        L_pred = _chol(fs.P_pred[t + 1], f"Predictive covariance at t={t + 2}")
        J = la.cho_solve((L_pred, True), fs.P_filt[t]).T
        mu_s[t] = fs.mu_filt[t] + J @ (mu_s[t + 1] - fs.mu_pred[t + 1])
        P = fs.P_filt[t] + J @ (P_s[t + 1] - fs.P_pred[t + 1]) @ J.T
        P_s[t] = 0.5 * (P + P.T)
    return mu_s, P_s


def ffbs_sample(stats: ObservationStats, x_prev: np.ndarray, sigma4: np.ndarray, table: PathTable,
                m0: np.ndarray, P0: np.ndarray, tau2: np.ndarray, rng: np.random.Generator,
                floor_s: float = VARIANCE_FLOOR_S) -> tuple[np.ndarray, FilterState]:
    """
    Draw {x_t} from its full conditional given path choices (folded into
    stats) and sigma. Variances are evaluated at x_prev.
    """
    variances = path_variances(x_prev, sigma4, table, floor_s)
    fs = information_filter(stats, variances, table, m0, P0, tau2)
    x = backward_sample(fs, rng)
    logger.debug(f"[FFBS] Sampled trajectory T={x.shape[0]} from {stats.n_trips} trips")
    return x, fs
