"""
MCMC building blocks used by the Gibbs sweep: scalar slice sampling,
elliptical slice sampling, the conjugate inverse-Wishart draw of K_U, the
collapsed mixture likelihood of the choice parameters and the categorical
path-choice update.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as la
from scipy.special import logsumexp
from scipy.stats import norm

from choice import ChoiceTensor, log_choice_probabilities, reconstruct_coefficients
from errors import ConfigError, NotPositiveDefiniteError, SamplerError
from network import PathTable

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SliceConfig:
    epsilon: float
    max_shrink: int = 200

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("Slice bracket width must be > 0")
        if self.max_shrink < 1:
            raise ConfigError("max_shrink must be >= 1")


@dataclass(eq=False)
class EllipseState:
    current: np.ndarray
    prior_chol: np.ndarray

    def __post_init__(self):
        self.current = np.asarray(self.current, dtype=float)
        if self.prior_chol.shape != (self.current.size, self.current.size):
            raise ConfigError(f"Prior factor {self.prior_chol.shape} does not match "
                              f"state of size {self.current.size}")


@dataclass
class SamplerStats:
    """Counters of recoverable numeric events, written to the posterior manifest"""
    slice_fallbacks: int = 0
    choice_underflows: int = 0
    empty_choice_set: int = 0
    clamped_travel_times: int = 0
    ess_evaluations: int = 0
    slice_evaluations: int = 0
    extra: dict = field(default_factory=dict)

    def merge(self, other: "SamplerStats") -> "SamplerStats":
        merged = SamplerStats(**{k: getattr(self, k) + getattr(other, k)
                                 for k in asdict(self) if k != "extra"})
        merged.extra = {**self.extra, **other.extra}
        return merged

    def as_dict(self) -> dict:
        return asdict(self)


# ── Slice sampling ──

def slice_sample_scalar(current: float, logpost: Callable[[float], float], cfg: SliceConfig,
                        rng: np.random.Generator, stats: Optional[SamplerStats] = None) -> float:
    """
    One slice-sampling update: random bracket of width epsilon placed around
    the current point, shrunk towards it after every rejection.
    """
    lp = logpost(current)
    if not np.isfinite(lp):
        raise SamplerError(f"Log posterior is not finite at the current point {current}")
    log_f = lp + math.log(1.0 - rng.random())
    kappa = rng.uniform(0.0, cfg.epsilon)
    lo = current - kappa
    hi = lo + cfg.epsilon

    for _ in range(cfg.max_shrink):
        proposal = rng.uniform(lo, hi)
        if stats is not None:
            stats.slice_evaluations += 1
        if logpost(proposal) > log_f:
            return float(proposal)
        if proposal < current:
            lo = proposal
        else:
            hi = proposal

    if stats is not None:
        stats.slice_fallbacks += 1
    logger.warning(f"[Slice] Bracket not accepted after {cfg.max_shrink} shrinks, keeping current value")
    return float(current)


def ess_sample(state: EllipseState, loglik: Callable[[np.ndarray], float], rng: np.random.Generator,
               cur_loglik: Optional[float] = None,
               stats: Optional[SamplerStats] = None) -> tuple[np.ndarray, float]:
    """
    Elliptical slice update of a vector with prior N(0, L L^T).
    Returns the new vector and its log likelihood.
    """
    xx = state.current
    if cur_loglik is None:
        cur_loglik = loglik(xx)
    if not np.isfinite(cur_loglik):
        raise SamplerError("Log likelihood is not finite at the current state")

    nu = state.prior_chol @ rng.standard_normal(xx.size)
    log_eta = cur_loglik + math.log(1.0 - rng.random())
    phi = rng.uniform(0.0, 2.0 * math.pi)
    phi_min, phi_max = phi - 2.0 * math.pi, phi

    while True:
        proposal = xx * math.cos(phi) + nu * math.sin(phi)
        ll = loglik(proposal)
        if stats is not None:
            stats.ess_evaluations += 1
        if ll > log_eta:
            return proposal, float(ll)
        if phi <= 0:
            phi_min = phi
        else:
            phi_max = phi
        if phi_max - phi_min < 1e-300:
            # shrunk onto the current point
            return xx.copy(), float(cur_loglik)
        phi = rng.uniform(phi_min, phi_max)


# ── Inverse-Wishart ──

def sample_wishart(scale: np.ndarray, df: float, rng: np.random.Generator) -> np.ndarray:
    """Bartlett decomposition: W = L A A^T L^T with L = chol(scale)"""
    p = scale.shape[0]
    try:
        L = la.cholesky(scale, lower=True)
    except la.LinAlgError as e:
        raise NotPositiveDefiniteError("Wishart scale matrix is not positive definite") from e
    A = np.zeros((p, p))
    for i in range(p):
        A[i, i] = math.sqrt(rng.chisquare(df - i))
        A[i, :i] = rng.standard_normal(i)
    LA = L @ A
    return LA @ LA.T


def sample_Ku(U: np.ndarray, omega0: np.ndarray, nu0: float, rng: np.random.Generator) -> np.ndarray:
    """K_U | U ~ IW(omega0 + U U^T, nu0 + R)"""
    if nu0 <= 1:
        raise ConfigError("nu0 must be > 1")
    scale = omega0 + U @ U.T
    try:
        scale_inv = la.cho_solve(la.cho_factor(scale, lower=True), np.eye(scale.shape[0]))
    except la.LinAlgError as e:
        raise NotPositiveDefiniteError("Inverse-Wishart scale matrix is not positive definite") from e
    W = sample_wishart(0.5 * (scale_inv + scale_inv.T), nu0 + U.shape[1], rng)
    K = la.cho_solve(la.cho_factor(W, lower=True), np.eye(W.shape[0]))
    return 0.5 * (K + K.T)


# ── Mixture likelihood over path choices ──

@dataclass(eq=False)
class MixtureTerms:
    """Per-trip Gaussian log densities of every candidate path, -inf in unused slots"""
    od: np.ndarray      # M, index into PathTable.ods
    t: np.ndarray       # M, 0-based interval
    gauss: np.ndarray   # M x k_max

    @property
    def size(self) -> int:
        return self.od.size


def mixture_terms(od: np.ndarray, t: np.ndarray, y: np.ndarray, means: np.ndarray,
                  variances: np.ndarray, table: PathTable) -> MixtureTerms:
    """log N(y; A_k x_t, var_k) for each trip and each path slot of its O-D pair"""
    od = np.asarray(od, dtype=int)
    t = np.asarray(t, dtype=int)
    paths = table.od_paths[od]                 # M x k_max
    valid = paths >= 0
    safe = np.where(valid, paths, 0)
    mu = means[safe, t[:, None]]
    sd = np.sqrt(variances[safe, t[:, None]])
    gauss = norm.logpdf(np.asarray(y, dtype=float)[:, None], loc=mu, scale=sd)
    gauss = np.where(valid, gauss, -np.inf)
    return MixtureTerms(od=od, t=t, gauss=gauss)


class CollapsedLikelihood:
    """
    Likelihood of the choice parameters with path choices summed out,
    restricted to trips of O-D pairs with more than one path.
    """

    def __init__(self, terms: MixtureTerms, invehicle: np.ndarray, transfer: np.ndarray,
                 table: PathTable, time_unit_s: float = 1.0,
                 stats: Optional[SamplerStats] = None):
        keep = table.od_n_paths[terms.od] > 1
        self.terms = MixtureTerms(od=terms.od[keep], t=terms.t[keep], gauss=terms.gauss[keep])
        self.invehicle = invehicle
        self.transfer = transfer
        self.table = table
        self.time_unit_s = time_unit_s
        self.stats = stats
        self._warned = False

    def log_probs(self, ct: ChoiceTensor) -> np.ndarray:
        theta, phi = reconstruct_coefficients(ct)
        return log_choice_probabilities(theta, phi, self.invehicle, self.transfer,
                                        self.table, self.time_unit_s)

    def __call__(self, ct: ChoiceTensor) -> float:
        if self.terms.size == 0:
            if not self._warned:
                logger.warning("[Choice] No trips on multi-path O-D pairs; choice parameters are unidentified")
                if self.stats is not None:
                    self.stats.empty_choice_set += 1
                self._warned = True
            return 0.0
        logp = self.log_probs(ct)
        weights = logp[self.terms.od, :, self.terms.t]          # M x k_max
        return float(np.sum(logsumexp(self.terms.gauss + weights, axis=1)))


def collapsed_loglik(ct: ChoiceTensor, model: CollapsedLikelihood) -> float:
    return model(ct)


# ── Path choices ──

def categorical_posterior(gauss: np.ndarray, log_prior: np.ndarray,
                          stats: Optional[SamplerStats] = None) -> np.ndarray:
    """
    Normalized p(z = k) proportional to N(y | k) MNL(k), row-wise in log space.
    Rows whose likelihood underflows everywhere fall back to the MNL weights.
    """
    logits = gauss + log_prior
    dead = ~np.isfinite(logits).any(axis=1)
    if np.any(dead):
        logits[dead] = log_prior[dead]
        if stats is not None:
            stats.choice_underflows += int(dead.sum())
        logger.warning(f"[Choice] Path densities underflowed for {int(dead.sum())} trips, using MNL weights")
    logits = logits - logsumexp(logits, axis=1, keepdims=True)
    return np.exp(logits)


def sample_path_choices(terms: MixtureTerms, log_probs: np.ndarray, table: PathTable,
                        rng: np.random.Generator,
                        stats: Optional[SamplerStats] = None) -> np.ndarray:
    """
    Draw the path slot of every trip. Trips of single-path O-D pairs get slot
    0 without consuming randomness.
    """
    z = np.zeros(terms.size, dtype=int)
    multi = np.flatnonzero(table.od_n_paths[terms.od] > 1)
    if multi.size == 0:
        return z
    log_prior = log_probs[terms.od[multi], :, terms.t[multi]]
    probs = categorical_posterior(terms.gauss[multi].copy(), log_prior, stats)
    u = rng.random(multi.size)
    cum = np.cumsum(probs, axis=1)
    slot = np.sum(cum < u[:, None], axis=1)
    z[multi] = np.minimum(slot, table.od_n_paths[terms.od[multi]] - 1)
    return z


def sample_prior_choices(od: np.ndarray, t: np.ndarray, log_probs: np.ndarray, table: PathTable,
                         rng: np.random.Generator) -> np.ndarray:
    """Path slots drawn from the MNL probabilities alone"""
    od = np.asarray(od, dtype=int)
    t = np.asarray(t, dtype=int)
    z = np.zeros(od.size, dtype=int)
    multi = np.flatnonzero(table.od_n_paths[od] > 1)
    if multi.size == 0:
        return z
    probs = np.exp(log_probs[od[multi], :, t[multi]])
    cum = np.cumsum(probs, axis=1)
    u = rng.random(multi.size)
    z[multi] = np.minimum(np.sum(cum < u[:, None], axis=1), table.od_n_paths[od[multi]] - 1)
    return z
