"""
Posterior-predictive evaluation, recovery scoring against simulation truth
and MCMC diagnostics.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from numpy.fft import irfft, rfft
from sklearn.metrics import mean_absolute_error, mean_squared_error

from choice import log_choice_probabilities
from errors import DataValidationError, ScoringError
from gibbs import SIGMA_NAMES, PosteriorDraws, credible_interval
from network import NetworkModel
from simulate import GroundTruth
from statespace import aggregate_observations, information_filter, path_means, path_variances, rts_smoother
from trips import TripObservation, TripTable

logger = logging.getLogger(__name__)

ESS_THRESHOLD = 200.0


@dataclass
class MetricReport:
    rmse: float
    mae: float
    crps: float
    n_trips: int
    per_od: pd.DataFrame = field(default_factory=pd.DataFrame, repr=False)

    def as_dict(self) -> dict:
        out = asdict(self)
        out.pop("per_od")
        return out


# ── Predictive distribution ──

def _draw_subset(draws: PosteriorDraws, max_draws: Optional[int]) -> np.ndarray:
    D = draws.n_draws
    if max_draws is None or max_draws >= D:
        return np.arange(D)
    return np.unique(np.linspace(0, D - 1, max_draws).round().astype(int))


def predictive_samples(trips: TripTable, draws: PosteriorDraws, net: NetworkModel,
                       rng: np.random.Generator, replicates: int = 1, max_draws: Optional[int] = None,
                       time_unit_s: float = 60.0, floor_s: float = 1.0) -> np.ndarray:
    """
    Compositional sampling from the posterior predictive: for each stored draw
    pick a path from the logit probabilities, then a travel time. Returns an
    (M, draws * replicates) array.
    """
    table = net.path_table
    T = draws.theta.shape[2]
    if len(trips) and (trips.interval.min() < 1 or trips.interval.max() > T):
        raise DataValidationError(f"Trip intervals must lie in [1, {T}] for this posterior")
    od = trips.od_index(table)
    t = trips.t0
    subset = _draw_subset(draws, max_draws)
    out = np.empty((len(trips), len(subset) * replicates))

    col = 0
    for d in subset:
        x = draws.x[d]
        inv = np.asarray(table.invehicle @ x.T)
        trf = np.asarray(table.transfer @ x.T)
        logp = log_choice_probabilities(draws.theta[d], draws.phi[d], inv, trf, table, time_unit_s)
        cum = np.cumsum(np.exp(logp[od, :, t]), axis=1)
        means = path_means(x, table)
        sds = np.sqrt(path_variances(x, draws.sigma[d], table, floor_s))
        for _ in range(replicates):
            slot = np.minimum(np.sum(cum < rng.random(len(od))[:, None], axis=1), table.od_n_paths[od] - 1)
            paths = table.od_paths[od, slot]
            out[:, col] = means[paths, t] + sds[paths, t] * rng.standard_normal(len(od))
            col += 1
    return out


def predictive_sample(trip: TripObservation, draws: PosteriorDraws, net: NetworkModel,
                      rng: np.random.Generator, replicates: int = 1, **kwargs) -> np.ndarray:
    return predictive_samples(TripTable.from_records([trip]), draws, net, rng, replicates, **kwargs)[0]


# ── Scores ──

def point_metrics(observed, predicted) -> tuple[float, float]:
    """(RMSE, MAE) in seconds"""
    observed = np.asarray(observed, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    if observed.shape != predicted.shape:
        raise ScoringError(f"Length mismatch: {observed.shape} observed vs {predicted.shape} predicted")
    if observed.size == 0:
        raise ScoringError("No observations to score")
    return float(np.sqrt(mean_squared_error(observed, predicted))), float(mean_absolute_error(observed, predicted))


def crps_from_samples(samples, y: float) -> float:
    """
    Energy-form estimator mean|X - y| - 0.5 mean|X - X'|, with the pairwise
    term taken from the order statistics.
    """
    x = np.sort(np.asarray(samples, dtype=float))
    m = x.size
    if m < 2:
        raise ScoringError("CRPS needs at least 2 samples")
    spread = 2.0 * np.sum((2.0 * np.arange(1, m + 1) - m - 1) * x) / (m * m)
    return float(np.mean(np.abs(x - y)) - 0.5 * spread)


def crps_batch(samples: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise CRPS of an (M, m) sample matrix"""
    x = np.sort(np.asarray(samples, dtype=float), axis=1)
    m = x.shape[1]
    if m < 2:
        raise ScoringError("CRPS needs at least 2 samples")
    weights = 2.0 * np.arange(1, m + 1) - m - 1
    spread = 2.0 * (x @ weights) / (m * m)
    return np.mean(np.abs(x - np.asarray(y, dtype=float)[:, None]), axis=1) - 0.5 * spread


def evaluate_predictions(trips: TripTable, draws: PosteriorDraws, net: NetworkModel, rng: np.random.Generator,
                         replicates: int = 1, max_draws: Optional[int] = None,
                         time_unit_s: float = 60.0, floor_s: float = 1.0) -> MetricReport:
    """RMSE and MAE of the predictive mean, and mean CRPS, over held-out trips"""
    if len(trips) == 0:
        raise ScoringError("Validation set is empty")
    samples = predictive_samples(trips, draws, net, rng, replicates, max_draws, time_unit_s, floor_s)
    if samples.shape[1] < 2:
        raise ScoringError("CRPS needs at least 2 predictive samples per trip; raise replicates or draws")
    y = trips.travel_time_s
    pred = samples.mean(axis=1)
    rmse, mae = point_metrics(y, pred)
    crps = crps_batch(samples, y)

    df = pd.DataFrame({"origin_id": trips.origin, "destination_id": trips.destination,
                       "err2": (y - pred) ** 2, "abs_err": np.abs(y - pred), "crps": crps})
    per_od = (df.groupby(["origin_id", "destination_id"], sort=True)
                .agg(n_trips=("crps", "size"), mse=("err2", "mean"), mae=("abs_err", "mean"), crps=("crps", "mean"))
                .reset_index())
    per_od["rmse"] = np.sqrt(per_od.pop("mse"))
    report = MetricReport(rmse=rmse, mae=mae, crps=float(crps.mean()), n_trips=len(trips), per_od=per_od)
    logger.info(f"[Eval] {len(trips)} trips: RMSE={rmse:.2f}s MAE={mae:.2f}s CRPS={report.crps:.2f}s")
    return report


# ── Diagnostics ──

def _autocorrelation(chain: np.ndarray) -> np.ndarray:
    n = chain.size
    centered = chain - chain.mean()
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    spectrum = rfft(centered, n=size)
    acov = irfft(spectrum * np.conjugate(spectrum), n=size)[:n]
    return acov / acov[0]


def effective_sample_size(chain) -> float:
    """N / (1 + 2 sum rho_k), truncated by the initial positive sequence of paired lags"""
    chain = np.asarray(chain, dtype=float)
    n = chain.size
    if n < 10:
        raise ScoringError(f"ESS needs at least 10 draws, got {n}")
    if np.ptp(chain) == 0:
        logger.info("[Diagnose] Constant chain, ESS set to its length")
        return float(n)
    rho = _autocorrelation(chain)
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(n / tau)


def gelman_rubin(chains) -> float:
    """Potential scale reduction factor of an (m chains, n draws) array"""
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2 or chains.shape[0] < 2 or chains.shape[1] < 2:
        raise ScoringError("Gelman-Rubin needs at least 2 chains of at least 2 draws")
    n = chains.shape[1]
    W = chains.var(axis=1, ddof=1).mean()
    B = n * chains.mean(axis=1).var(ddof=1)
    if W == 0:
        return 1.0 if B == 0 else float("inf")
    var_hat = (n - 1) / n * W + B / n
    return float(np.sqrt(var_hat / W))


def monitored_scalars(draws: PosteriorDraws, n_coefficients: int = 20, seed: int = 0) -> dict[str, np.ndarray]:
    """q, sigma and a fixed random subset of Theta/Phi entries, each a (D,) series"""
    series = {name: draws.sigma[:, i] for i, name in enumerate(SIGMA_NAMES)}
    series["q1"], series["q2"] = draws.q[:, 0], draws.q[:, 1]
    n, T = draws.theta.shape[1:]
    rng = np.random.default_rng(seed)
    cells = rng.choice(2 * n * T, size=min(n_coefficients, 2 * n * T), replace=False)
    for cell in sorted(cells):
        block, rest = divmod(int(cell), n * T)
        o, t = divmod(rest, T)
        name = "theta" if block == 0 else "phi"
        series[f"{name}[{o},{t + 1}]"] = getattr(draws, name)[:, o, t]
    return series


def diagnostics(draws: PosteriorDraws, threshold: float = ESS_THRESHOLD, n_coefficients: int = 20,
                seed: int = 0) -> pd.DataFrame:
    """ESS (summed over chains) and R-hat per monitored scalar; flags ESS <= threshold"""
    rows = []
    chain_ids = draws.chains
    for name, values in monitored_scalars(draws, n_coefficients, seed).items():
        per_chain = [values[draws.chain == c] for c in chain_ids]
        ess = sum(effective_sample_size(v) for v in per_chain)
        rhat = np.nan
        if len(per_chain) > 1:
            n = min(len(v) for v in per_chain)
            rhat = gelman_rubin(np.stack([v[:n] for v in per_chain]))
        rows.append({"parameter": name, "ess": ess, "rhat": rhat, "flagged": bool(ess <= threshold)})
    table = pd.DataFrame(rows, columns=["parameter", "ess", "rhat", "flagged"])
    if table["flagged"].any():
        logger.warning(f"[Diagnose] {int(table['flagged'].sum())} parameters with ESS <= {threshold:g}")
    return table


def trace_frame(draws: PosteriorDraws, n_coefficients: int = 20, seed: int = 0) -> pd.DataFrame:
    """Long-format trace export: chain, iteration, parameter, value"""
    frames = [pd.DataFrame({"chain": draws.chain, "iteration": draws.iteration, "parameter": name, "value": v})
              for name, v in monitored_scalars(draws, n_coefficients, seed).items()]
    return pd.concat(frames, ignore_index=True)


# ── Recovery ──

def recovery_score(draws: PosteriorDraws, truth: GroundTruth, level: float = 0.95) -> tuple[pd.DataFrame, dict]:
    """
    Absolute error of the posterior mean and credible-interval coverage of the
    truth for every scalar, plus the coverage rate of each block.
    """
    blocks = {
        "theta": (draws.theta, truth.theta),
        "phi": (draws.phi, truth.phi),
        "x": (draws.x, truth.x),
        "sigma": (draws.sigma, truth.sigma.as_array()),
        "q": (draws.q, np.array([truth.ct.q1, truth.ct.q2])),
    }
    frames, coverage = [], {}
    for name, (samples, true) in blocks.items():
        if samples.shape[1:] != true.shape:
            raise ScoringError(f"Dimension mismatch in {name}: posterior {samples.shape[1:]} vs truth {true.shape}")
        mean, lo, hi = credible_interval(samples, level)
        covered = (lo <= true) & (true <= hi)
        index = np.array(list(np.ndindex(*true.shape)))
        df = pd.DataFrame({
            "block": name,
            "i": index[:, 0],
            "j": index[:, 1] if index.shape[1] > 1 else 0,
            "truth": true.ravel(), "mean": mean.ravel(),
            "abs_error": np.abs(mean - true).ravel(), "covered": covered.ravel(),
        })
        frames.append(df)
        coverage[name] = float(covered.mean())
    table = pd.concat(frames, ignore_index=True)
    logger.info("[Eval] Coverage " + ", ".join(f"{k}={v:.1%}" for k, v in coverage.items()))
    return table, coverage


def state_rmse(x_hat: np.ndarray, x_true: np.ndarray) -> np.ndarray:
    """Per-interval RMSE over cost attributes"""
    return np.sqrt(np.mean((np.asarray(x_hat) - np.asarray(x_true)) ** 2, axis=1))


def oracle_noise_floor(truth: GroundTruth, trips: TripTable, net: NetworkModel, P0_variance: float = 1e4,
                       floor_s: float = 1.0) -> np.ndarray:
    """
    Per-interval RMSE of the smoothed cost trajectory when the true path
    choices and noise scales are known.
    """
    if truth.z is None or len(truth.z) != len(trips):
        raise ScoringError("Ground truth carries no path choices for these trips")
    table = net.path_table
    paths = table.od_paths[trips.od_index(table), truth.z]
    stats = aggregate_observations(paths, trips.t0, trips.travel_time_s, table.n_paths, truth.T)
    variances = path_variances(truth.x, truth.sigma.as_array(), table, floor_s)
    tau2 = np.full(net.c, max(truth.tau2, 1e-9))
    fs = information_filter(stats, variances, table, truth.m0, P0_variance * np.eye(net.c), tau2)
    mu_s, _ = rts_smoother(fs)
    return state_rmse(mu_s, truth.x)


# ── Validation split ──

def stratified_split(trips: TripTable, net: NetworkModel, fraction: float,
                     rng: np.random.Generator) -> tuple[TripTable, TripTable]:
    """
    Hold out round(fraction * size) trips of every multi-path O-D pair; trips
    of single-path pairs always stay in training.
    """
    if not 0.0 <= fraction < 1.0:
        raise ScoringError("Holdout fraction must be in [0, 1)")
    table = net.path_table
    od = trips.od_index(table)
    holdout = np.zeros(len(trips), dtype=bool)
    small = 0
    for i in table.multi_path_ods:
        members = np.flatnonzero(od == i)
        k = int(round(fraction * members.size))
        if k == 0:
            continue
        if members.size < 2 or k >= members.size:
            small += 1
            continue
        holdout[rng.choice(members, size=k, replace=False)] = True
    if small:
        logger.info(f"[Eval] {small} O-D strata too small to split, kept in training")
    return trips.subset(~holdout), trips.subset(holdout)
