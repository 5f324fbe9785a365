"""
Spatiotemporal multinomial-logit path choice.

The in-vehicle and transfer sensitivities Theta[o, t], Phi[o, t] are the two
slices of a 2 x n x T tensor written as a baseline plus a rank-R CP sum:

    F = Q + sum_r u_r o v_r o w_r,   Q(1,:,:) = q1,  Q(2,:,:) = q2

No identifiability constraints are put on U, V, W; everything downstream uses
the reconstructed Theta and Phi only.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import khatri_rao
from scipy.special import log_softmax

from errors import ConfigError, SamplerError
from network import NetworkModel, PathSet, PathTable

logger = logging.getLogger(__name__)

# Modes held fixed by each benchmark restriction of the full model
FROZEN_MODES = {
    "spatiotemporal": (),
    "spatial": ("W",),
    "temporal": ("V",),
    "static": ("V", "W"),
}


@dataclass(frozen=True, eq=False)
class ChoiceTensor:
    U: np.ndarray  # 2 x R, choice-type mode
    V: np.ndarray  # n x R, station mode
    W: np.ndarray  # T x R, time mode
    q1: float
    q2: float

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def with_column(self, mode: str, r: int, column: np.ndarray) -> "ChoiceTensor":
        factor = getattr(self, mode).copy()
        factor[:, r] = column
        return replace(self, **{mode: factor})

    def validate(self) -> None:
        R = self.U.shape[1] if self.U.ndim == 2 else -1
        problems = []
        if self.U.ndim != 2 or self.U.shape[0] != 2:
            problems.append(f"U must be 2 x R, got {self.U.shape}")
        if self.V.ndim != 2 or self.V.shape[1] != R:
            problems.append(f"V must be n x {R}, got {self.V.shape}")
        if self.W.ndim != 2 or self.W.shape[1] != R:
            problems.append(f"W must be T x {R}, got {self.W.shape}")
        if problems:
            raise ConfigError("Choice tensor dimension mismatch", problems)


@dataclass(frozen=True, eq=False)
class UtilityContext:
    invehicle_sum: np.ndarray  # seconds, one entry per path
    transfer_sum: np.ndarray


def reconstruct_coefficients(ct: ChoiceTensor) -> tuple[np.ndarray, np.ndarray]:
    """Theta and Phi (each n x T) from the baseline and the CP factors"""
    ct.validate()
    theta = ct.q1 + (ct.V * ct.U[0]) @ ct.W.T
    phi = ct.q2 + (ct.V * ct.U[1]) @ ct.W.T
    return theta, phi


def unfold_mode1(ct: ChoiceTensor) -> np.ndarray:
    """F_(1) = Q_(1) + U (W kr V)^T; row i is vec() of the i-th slice, column-major"""
    ct.validate()
    n, T = ct.V.shape[0], ct.W.shape[0]
    baseline = np.repeat(np.array([[ct.q1], [ct.q2]]), n * T, axis=1)
    if ct.rank == 0:
        return baseline
    return baseline + ct.U @ khatri_rao(ct.W, ct.V).T


def apply_variant(ct: ChoiceTensor, variant: str) -> ChoiceTensor:
    """Pin the frozen factor modes of a benchmark restriction"""
    if variant not in FROZEN_MODES:
        raise ConfigError(f"Unknown choice variant '{variant}'")
    frozen = FROZEN_MODES[variant]
    if variant == "static":
        return replace(ct, V=np.zeros_like(ct.V), W=np.zeros_like(ct.W))
    if "W" in frozen:
        return replace(ct, W=np.ones_like(ct.W))
    if "V" in frozen:
        return replace(ct, V=np.ones_like(ct.V))
    return ct


def utility_context(x_t: np.ndarray, paths: PathSet, net: NetworkModel) -> UtilityContext:
    imap = net.index_map
    x_t = np.asarray(x_t, dtype=float)
    inv = [sum(x_t[imap.position("invehicle", k)] for k in p.invehicle) for p in paths.paths]
    trf = [sum(x_t[imap.position("transfer", k)] for k in p.transfers) for p in paths.paths]
    return UtilityContext(invehicle_sum=np.asarray(inv, dtype=float),
                          transfer_sum=np.asarray(trf, dtype=float))


def path_utilities(x_t: np.ndarray, paths: PathSet, theta_ot: float, phi_ot: float,
                   net: NetworkModel, time_unit_s: float = 1.0) -> np.ndarray:
    """
    V_odt^k = theta * (in-vehicle time) + phi * (transfer time), times expressed
    in units of time_unit_s. Access and egress do not enter the utility.
    """
    if len(x_t) != net.c:
        raise ConfigError(f"Cost vector has length {len(x_t)}, network expects {net.c}")
    ctx = utility_context(x_t, paths, net)
    return (theta_ot * ctx.invehicle_sum + phi_ot * ctx.transfer_sum) / time_unit_s


def choice_probabilities(utilities) -> np.ndarray:
    """Logit probabilities, normalized in log space"""
    u = np.asarray(utilities, dtype=float)
    if u.size == 0:
        raise ConfigError("Choice set is empty")
    if not np.all(np.isfinite(u)):
        raise SamplerError("Non-finite path utility")
    return np.exp(log_softmax(u))


def log_choice_probabilities(theta: np.ndarray, phi: np.ndarray, invehicle: np.ndarray,
                             transfer: np.ndarray, table: PathTable,
                             time_unit_s: float = 1.0) -> np.ndarray:
    """
    Log MNL probabilities for every O-D pair, path slot and interval.

    invehicle, transfer are (P, T) per-path time sums. Returns (n_od, k_max, T)
    with -inf in unused slots.
    """
    origin = table.od_origin[table.path_od]
    util = (theta[origin] * invehicle + phi[origin] * transfer) / time_unit_s
    T = util.shape[1]
    padded = np.full((len(table.ods), table.k_max, T), -np.inf)
    mask = table.slot_mask()
    padded[mask] = util[table.od_paths[mask]]
    if not np.all(np.isfinite(padded[mask])):
        raise SamplerError("Non-finite path utility")
    return log_softmax(padded, axis=1)
