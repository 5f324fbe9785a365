"""
Synthetic ground truth and trip generation for recovery experiments.

Costs follow the random walk from m0, the choice coefficients come from
factor draws under their GP priors and trips are sampled path-first from the
logit model, then given a heteroscedastic Gaussian travel time.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from choice import ChoiceTensor, log_choice_probabilities, reconstruct_coefficients
from config import RunConfig
from errors import ConfigError, DataValidationError
from kernels import KernelParams, diffusion_kernel, se_kernel
from network import NetworkModel, NetworkSpec, PathTable, build_network, with_enumerated_paths
from samplers import SamplerStats, sample_Ku
from statespace import NoiseScale, path_means, path_variances
from trips import TripTable

logger = logging.getLogger(__name__)

TRUE_SIGMA = NoiseScale(sigma_a=0.32, sigma_h=0.155, sigma_u=0.31, sigma_e=0.25)
TRUE_Q = (-0.2, -0.4)
MAX_RESAMPLE = 100

SCALES = {
    "desk": {"n_intervals": 8, "rank": 2},
    "full": {"n_intervals": 32, "rank": 4},
}


@dataclass(eq=False)
class GroundTruth:
    x: np.ndarray             # T x c
    m0: np.ndarray
    tau2: float
    sigma: NoiseScale
    ct: ChoiceTensor
    Ku: np.ndarray
    theta: np.ndarray         # n x T
    phi: np.ndarray
    demand: Optional[np.ndarray] = None   # n_od x T
    z: Optional[np.ndarray] = None        # true path slot per trip

    @property
    def T(self) -> int:
        return self.x.shape[0]


def desk_network_spec() -> NetworkSpec:
    """
    Twelve stations on two lines. Line A runs S01..S07; line B runs
    S08-S02-S09-S10-S11-S06-S12 and meets line A at S02 and S06, so the S02-S06
    section can be ridden on either line.
    """
    line_a = [f"S{i:02d}" for i in range(1, 8)]
    line_b = ["S08", "S02", "S09", "S10", "S11", "S06", "S12"]
    stations = [{"id": f"S{i:02d}", "name": f"Station {i}"} for i in range(1, 13)]
    links = []
    for line, seq in (("A", line_a), ("B", line_b)):
        for a, b in zip(seq[:-1], seq[1:]):
            links.append({"id": f"{line}:{a}-{b}", "from": a, "to": b, "line": line, "time_s": 120.0})
            links.append({"id": f"{line}:{b}-{a}", "from": b, "to": a, "line": line, "time_s": 120.0})
    transfers = []
    for st in ("S02", "S06"):
        transfers.append({"id": f"X:{st}:A-B", "station": st, "from_line": "A", "to_line": "B", "time_s": 180.0})
        transfers.append({"id": f"X:{st}:B-A", "station": st, "from_line": "B", "to_line": "A", "time_s": 180.0})
    return NetworkSpec.model_validate({
        "name": "desk", "stations": stations, "invehicle_links": links, "transfer_links": transfers,
    })


def desk_network(k_max: int = 5, detour_cap: float = 1.5) -> NetworkModel:
    return with_enumerated_paths(build_network(desk_network_spec()), k_max=k_max, detour_cap=detour_cap)


def generate_truth(net: NetworkModel, T: int, R: int, cfg: RunConfig, rng: np.random.Generator,
                   sigma: NoiseScale = TRUE_SIGMA, q: tuple[float, float] = TRUE_Q,
                   m0: Optional[np.ndarray] = None, tau2: Optional[float] = None) -> GroundTruth:
    if T < 2:
        raise ConfigError("Simulation needs T >= 2")
    tau2 = cfg.tau2 if tau2 is None else tau2
    if tau2 < 0:
        raise ConfigError("tau2 must be >= 0")
    m0 = net.nominal_costs.copy() if m0 is None else np.asarray(m0, dtype=float)

    steps = np.sqrt(tau2) * rng.standard_normal((T - 1, net.c))
    x = m0 + np.vstack([np.zeros((1, net.c)), np.cumsum(steps, axis=0)])

    K_S = diffusion_kernel(net.adjacency, cfg.alpha, cfg.jitter_start, cfg.jitter_cap)
    K_T = se_kernel(T, KernelParams(alpha=cfg.alpha, lengthscale=cfg.lengthscale, variance=cfg.se_variance),
                    cfg.jitter_start, cfg.jitter_cap)
    Ku = sample_Ku(np.zeros((2, 0)), cfg.omega0_matrix, cfg.nu0, rng)
    U = np.linalg.cholesky(Ku) @ rng.standard_normal((2, R))
    V = K_S.chol @ rng.standard_normal((net.n, R))
    W = K_T.chol @ rng.standard_normal((T, R))
    ct = ChoiceTensor(U=U, V=V, W=W, q1=float(q[0]), q2=float(q[1]))
    theta, phi = reconstruct_coefficients(ct)
    logger.info(f"[Simulate] Ground truth: T={T} R={R} c={net.c} theta in "
                f"[{theta.min():.3f}, {theta.max():.3f}] phi in [{phi.min():.3f}, {phi.max():.3f}]")
    return GroundTruth(x=x, m0=m0, tau2=float(tau2), sigma=sigma, ct=ct, Ku=Ku, theta=theta, phi=phi)


def default_demand(table: PathTable, T: int, multi_path: int = 50, single_path: int = 10) -> np.ndarray:
    """Trips per (O-D, interval) cell"""
    per_od = np.where(table.od_n_paths > 1, multi_path, single_path)
    return np.repeat(per_od[:, None], T, axis=1).astype(int)


def generate_trips(truth: GroundTruth, net: NetworkModel, demand: np.ndarray, rng: np.random.Generator,
                   time_unit_s: float = 60.0, floor_s: float = 1.0,
                   stats: Optional[SamplerStats] = None) -> TripTable:
    """
    Sample trips cell by cell in (O-D, interval) order: a path from the logit
    probabilities, then a travel time, redrawn until positive.
    """
    table = net.path_table
    T = truth.T
    demand = np.asarray(demand)
    if demand.shape != (len(table.ods), T):
        raise DataValidationError(f"Demand must be {len(table.ods)} x {T}, got {demand.shape}")
    if np.any(demand < 0) or not np.issubdtype(demand.dtype, np.integer):
        raise DataValidationError("Demand must be non-negative integers")

    inv = np.asarray(table.invehicle @ truth.x.T)
    trf = np.asarray(table.transfer @ truth.x.T)
    probs = np.exp(log_choice_probabilities(truth.theta, truth.phi, inv, trf, table, time_unit_s))
    means = path_means(truth.x, table)
    sds = np.sqrt(path_variances(truth.x, truth.sigma.as_array(), table, floor_s))

    origin, destination, interval, y, z = [], [], [], [], []
    clamped = 0
    for i, od in enumerate(table.ods):
        k = table.od_n_paths[i]
        for t in range(T):
            m = int(demand[i, t])
            if m == 0:
                continue
            slots = rng.choice(k, size=m, p=probs[i, :k, t] / probs[i, :k, t].sum()) if k > 1 \
                else np.zeros(m, dtype=int)
            paths = table.od_paths[i, slots]
            mu, sd = means[paths, t], sds[paths, t]
            times = mu + sd * rng.standard_normal(m)
            for _ in range(MAX_RESAMPLE):
                bad = times <= 0
                if not bad.any():
                    break
                times[bad] = mu[bad] + sd[bad] * rng.standard_normal(int(bad.sum()))
            bad = times <= 0
            if bad.any():
                clamped += int(bad.sum())
                times[bad] = floor_s
            origin += [od[0]] * m
            destination += [od[1]] * m
            interval += [t + 1] * m
            y.append(times)
            z.append(slots)

    if clamped:
        logger.warning(f"[Simulate] Clamped {clamped} travel times to {floor_s}s after {MAX_RESAMPLE} redraws")
    if stats is not None:
        stats.clamped_travel_times += clamped
    truth.demand = demand
    truth.z = np.concatenate(z).astype(int) if z else np.zeros(0, dtype=int)
    trips = TripTable(
        origin=np.array(origin, dtype=object),
        destination=np.array(destination, dtype=object),
        interval=np.array(interval, dtype=int),
        travel_time_s=np.concatenate(y) if y else np.zeros(0),
    )
    logger.info(f"[Simulate] Generated {len(trips)} trips over {T} intervals")
    return trips


def simulate_dataset(cfg: RunConfig, scale: str = "desk", net: Optional[NetworkModel] = None,
                     demand: Optional[np.ndarray] = None) -> tuple[NetworkModel, GroundTruth, TripTable]:
    """Network, truth and trips for one seed, at desk or full scale"""
    if scale not in SCALES:
        raise ConfigError(f"Unknown scale '{scale}', expected one of {sorted(SCALES)}")
    if net is None:
        if scale == "full":
            raise ConfigError("The full scale needs a network file")
        net = desk_network(cfg.k_max, cfg.detour_cap)
    elif not net.path_sets:
        net = with_enumerated_paths(net, k_max=cfg.k_max, detour_cap=cfg.detour_cap)
    T, R = SCALES[scale]["n_intervals"], SCALES[scale]["rank"]
    if (cfg.n_intervals, cfg.rank) != (T, R):
        logger.warning(f"[Simulate] Scale '{scale}' fixes T={T} and R={R}, "
                       f"ignoring n_intervals={cfg.n_intervals} and rank={cfg.rank}")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7919]))
    truth = generate_truth(net, T, R, cfg, rng)
    if demand is None:
        demand = default_demand(net.path_table, T)
    trips = generate_trips(truth, net, demand, rng, cfg.utility_time_unit_s, cfg.variance_floor_s)
    return net, truth, trips


def save_truth(truth: GroundTruth, path: str, net: NetworkModel) -> None:
    np.savez(path, x=truth.x, m0=truth.m0, tau2=truth.tau2, sigma=truth.sigma.as_array(),
             U=truth.ct.U, V=truth.ct.V, W=truth.ct.W, q=np.array([truth.ct.q1, truth.ct.q2]),
             Ku=truth.Ku, theta=truth.theta, phi=truth.phi,
             demand=truth.demand if truth.demand is not None else np.zeros((0, 0), dtype=int),
             z=truth.z if truth.z is not None else np.zeros(0, dtype=int),
             network_hash=np.array(net.network_hash))


def load_truth(path: str) -> tuple[GroundTruth, str]:
    """Ground truth and the hash of the network it was generated on"""
    try:
        data = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise DataValidationError(f"Ground-truth file not found: {path}")
    ct = ChoiceTensor(U=data["U"], V=data["V"], W=data["W"], q1=float(data["q"][0]), q2=float(data["q"][1]))
    truth = GroundTruth(
        x=data["x"], m0=data["m0"], tau2=float(data["tau2"]), sigma=NoiseScale.from_array(data["sigma"]),
        ct=ct, Ku=data["Ku"], theta=data["theta"], phi=data["phi"],
        demand=data["demand"] if data["demand"].size else None,
        z=data["z"] if data["z"].size else None,
    )
    return truth, str(data["network_hash"])
