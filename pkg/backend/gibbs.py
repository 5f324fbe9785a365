"""
Gibbs sampler over network costs, noise scales, choice factors and path choices.

Every iteration visits the blocks in a fixed order:

    ffbs -> sigma -> factors (V, W, U columns) -> baseline (q1, q2) -> ku -> choices

and after burn-in every ``thinning``-th state is stored. Chains are seeded
from SeedSequence([seed, chain]) and are independent, so they can run in
separate processes without changing the result.
"""

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import pandas as pd
import scipy.linalg as la
from scipy.sparse.linalg import lsqr
from scipy.stats import norm

from choice import FROZEN_MODES, ChoiceTensor, apply_variant, log_choice_probabilities, reconstruct_coefficients
from config import RunConfig
from errors import DataValidationError, SamplerError, TransitError
from kernels import KernelMatrix, KernelParams, diffusion_kernel, se_kernel
from network import NetworkModel, PathTable, build_network
from samplers import (CollapsedLikelihood, EllipseState, SamplerStats, SliceConfig, ess_sample,
                      mixture_terms, sample_Ku, sample_path_choices, sample_prior_choices,
                      slice_sample_scalar)
from statespace import aggregate_observations, block_squares, ffbs_sample, gaussian_loglik_stats, path_means
from trips import TripTable

logger = logging.getLogger(__name__)

BLOCK_ORDER = ("ffbs", "sigma", "factors", "baseline", "ku", "choices")
SIGMA_NAMES = ("sigma_a", "sigma_h", "sigma_u", "sigma_e")


@dataclass(eq=False)
class ModelState:
    x: np.ndarray           # T x c
    log_sigma: np.ndarray   # 4
    ct: ChoiceTensor
    Ku: np.ndarray          # 2 x 2
    z: np.ndarray           # path slot per trip

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)


@dataclass(eq=False)
class FitContext:
    """Everything fixed for the duration of a fit"""
    net: NetworkModel
    table: PathTable
    cfg: RunConfig
    od: np.ndarray
    t0: np.ndarray
    y: np.ndarray
    m0: np.ndarray
    P0: np.ndarray
    tau2: np.ndarray
    K_S: KernelMatrix
    K_T: KernelMatrix

    @property
    def T(self) -> int:
        return self.cfg.n_intervals

    def utility_sums(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(P, T) in-vehicle and transfer time sums of every path"""
        return np.asarray(self.table.invehicle @ x.T), np.asarray(self.table.transfer @ x.T)

    def log_probs(self, x: np.ndarray, ct: ChoiceTensor) -> np.ndarray:
        theta, phi = reconstruct_coefficients(ct)
        inv, trf = self.utility_sums(x)
        return log_choice_probabilities(theta, phi, inv, trf, self.table, self.cfg.utility_time_unit_s)


@dataclass(eq=False)
class PosteriorDraws:
    """Stored post-burn-in states, stacked along the first axis"""
    x: np.ndarray          # D x T x c
    sigma: np.ndarray      # D x 4
    U: np.ndarray          # D x 2 x R
    V: np.ndarray          # D x n x R
    W: np.ndarray          # D x T x R
    q: np.ndarray          # D x 2
    Ku: np.ndarray         # D x 2 x 2
    theta: np.ndarray      # D x n x T
    phi: np.ndarray        # D x n x T
    z_counts: np.ndarray   # D x n_od x T x k_max
    chain: np.ndarray      # D
    iteration: np.ndarray  # D, 1-based sweep number
    labels: Optional[np.ndarray] = None   # D x M path slots
    stats: dict = field(default_factory=dict)    # chain -> SamplerStats
    trace: dict = field(default_factory=dict)    # chain -> list of (iteration, block)

    @property
    def n_draws(self) -> int:
        return self.sigma.shape[0]

    @property
    def chains(self) -> list[int]:
        return sorted(set(int(c) for c in self.chain))

    def select(self, mask) -> "PosteriorDraws":
        mask = np.asarray(mask)
        return replace(
            self, x=self.x[mask], sigma=self.sigma[mask], U=self.U[mask], V=self.V[mask],
            W=self.W[mask], q=self.q[mask], Ku=self.Ku[mask], theta=self.theta[mask],
            phi=self.phi[mask], z_counts=self.z_counts[mask], chain=self.chain[mask],
            iteration=self.iteration[mask],
            labels=None if self.labels is None else self.labels[mask])

    def for_chain(self, chain: int) -> "PosteriorDraws":
        return self.select(self.chain == chain)

    def choice_tensor(self, d: int) -> ChoiceTensor:
        return ChoiceTensor(U=self.U[d], V=self.V[d], W=self.W[d],
                            q1=float(self.q[d, 0]), q2=float(self.q[d, 1]))

    def total_stats(self) -> SamplerStats:
        total = SamplerStats()
        for s in self.stats.values():
            total = total.merge(s)
        return total

    @classmethod
    def concatenate(cls, parts: list["PosteriorDraws"]) -> "PosteriorDraws":
        if not parts:
            raise SamplerError("No chains to combine")
        stack = {name: np.concatenate([getattr(p, name) for p in parts])
                 for name in ("x", "sigma", "U", "V", "W", "q", "Ku", "theta", "phi",
                              "z_counts", "chain", "iteration")}
        labels = None
        if all(p.labels is not None for p in parts):
            labels = np.concatenate([p.labels for p in parts])
        stats, trace = {}, {}
        for p in parts:
            stats.update(p.stats)
            trace.update(p.trace)
        return cls(**stack, labels=labels, stats=stats, trace=trace)


# ── Setup ──

def warm_start_m0(net: NetworkModel, table: PathTable, od: np.ndarray, y: np.ndarray,
                  floor_s: float = 1.0) -> np.ndarray:
    """
    Nominal times adjusted so that the shortest path of every observed O-D pair
    reproduces its mean travel time, solved as ridge least squares around the
    nominal values.
    """
    nominal = net.nominal_costs.copy()
    if len(y) == 0:
        return nominal
    n_od = len(table.ods)
    counts = np.bincount(od, minlength=n_od)
    sums = np.bincount(od, weights=y, minlength=n_od)
    seen = np.flatnonzero(counts > 0)
    A = table.routing[table.od_paths[seen, 0]]
    residual = sums[seen] / counts[seen] - A @ nominal
    delta = lsqr(A, residual, damp=1.0)[0]
    return np.maximum(nominal + delta, floor_s)


def build_context(trips: TripTable, net: NetworkModel, cfg: RunConfig) -> FitContext:
    if not net.path_sets:
        raise DataValidationError("Network has no path sets")
    table = net.path_table
    if len(trips) and (trips.interval.min() < 1 or trips.interval.max() > cfg.n_intervals):
        raise DataValidationError(f"Trip intervals must lie in [1, {cfg.n_intervals}]")
    od = trips.od_index(table)
    t0 = trips.t0.astype(int)
    y = np.asarray(trips.travel_time_s, dtype=float)

    if cfg.m0_policy == "warm_start":
        m0 = warm_start_m0(net, table, od, y, cfg.variance_floor_s)
    else:
        m0 = net.nominal_costs.copy()

    K_S = diffusion_kernel(net.adjacency, cfg.alpha, cfg.jitter_start, cfg.jitter_cap)
    K_T = se_kernel(cfg.n_intervals, KernelParams(alpha=cfg.alpha, lengthscale=cfg.lengthscale,
                                                  variance=cfg.se_variance),
                    cfg.jitter_start, cfg.jitter_cap)
    return FitContext(
        net=net, table=table, cfg=cfg, od=od, t0=t0, y=y, m0=m0,
        P0=cfg.p0_variance * np.eye(net.c), tau2=np.full(net.c, cfg.tau2),
        K_S=K_S, K_T=K_T,
    )


def initial_Ku(cfg: RunConfig) -> np.ndarray:
    """Prior mean of the inverse-Wishart, or its scale when the mean is undefined"""
    omega0 = cfg.omega0_matrix
    return omega0 / (cfg.nu0 - 3.0) if cfg.nu0 > 3 else omega0.copy()


def initialize(ctx: FitContext, rng: np.random.Generator) -> ModelState:
    """x_t = m0, sigma at the prior means, small prior draws for the factors, q = 0, Z from the MNL"""
    cfg = ctx.cfg
    R, n, T = cfg.rank, ctx.net.n, ctx.T
    scale = cfg.init_factor_scale
    Ku = initial_Ku(cfg)
    U = scale * (la.cholesky(Ku, lower=True) @ rng.standard_normal((2, R)))
    V = scale * (ctx.K_S.chol @ rng.standard_normal((n, R)))
    W = scale * (ctx.K_T.chol @ rng.standard_normal((T, R)))
    ct = apply_variant(ChoiceTensor(U=U, V=V, W=W, q1=0.0, q2=0.0), cfg.choice_variant)

    x = np.tile(ctx.m0, (T, 1))
    z = sample_prior_choices(ctx.od, ctx.t0, ctx.log_probs(x, ct), ctx.table, rng)
    return ModelState(x=x, log_sigma=cfg.log_sigma_prior_mean.copy(), ct=ct, Ku=Ku, z=z)


# ── Sampler ──

class GibbsSampler:
    """One chain of the block sampler"""

    def __init__(self, ctx: FitContext, chain: int = 0, rng: Optional[np.random.Generator] = None):
        self.ctx = ctx
        self.cfg = ctx.cfg
        self.chain = chain
        self.rng = rng if rng is not None else chain_rng(ctx.cfg.seed, chain)
        self.stats = SamplerStats()
        self.trace: list[tuple[int, str]] = []
        self.iteration = 0
        self._sigma_slice = SliceConfig(self.cfg.slice_eps_log_sigma, self.cfg.slice_max_shrink)
        self._q_slice = SliceConfig(self.cfg.slice_eps_q, self.cfg.slice_max_shrink)

    def _enter(self, block: str) -> None:
        self.trace.append((self.iteration, block))
        logger.debug(f"[Gibbs] chain {self.chain} iteration {self.iteration}: {block}")

    def sweep(self, state: ModelState) -> ModelState:
        ctx, cfg, rng = self.ctx, self.cfg, self.rng
        table, floor = ctx.table, cfg.variance_floor_s
        self.iteration += 1

        paths = table.od_paths[ctx.od, state.z]
        obs = aggregate_observations(paths, ctx.t0, ctx.y, table.n_paths, ctx.T)

        self._enter("ffbs")
        x, _ = ffbs_sample(obs, state.x, state.sigma, table, ctx.m0, ctx.P0, ctx.tau2, rng, floor)

        self._enter("sigma")
        means = path_means(x, table)
        squares = block_squares(x, table, floor)
        log_sigma = self.sample_log_sigma(state.log_sigma, obs, means, squares)

        self._enter("factors")
        variances = np.tensordot(np.exp(log_sigma) ** 2, squares, axes=1)
        terms = mixture_terms(ctx.od, ctx.t0, ctx.y, means, variances, table)
        inv, trf = ctx.utility_sums(x)
        model = CollapsedLikelihood(terms, inv, trf, table, cfg.utility_time_unit_s, self.stats)
        ct = self.sample_factors(state.ct, state.Ku, model)

        self._enter("baseline")
        ct = self.sample_baseline(ct, model)

        self._enter("ku")
        Ku = sample_Ku(ct.U, cfg.omega0_matrix, cfg.nu0, rng)

        self._enter("choices")
        z = sample_path_choices(terms, model.log_probs(ct), table, rng, self.stats)

        return ModelState(x=x, log_sigma=log_sigma, ct=ct, Ku=Ku, z=z)

    def sample_log_sigma(self, log_sigma: np.ndarray, obs, means: np.ndarray,
                         squares: np.ndarray) -> np.ndarray:
        mu = self.cfg.log_sigma_prior_mean
        sd = np.sqrt(self.cfg.log_sigma_prior_var)
        current = log_sigma.copy()
        for b in range(4):
            def logpost(value, b=b):
                trial = current.copy()
                trial[b] = value
                var = np.tensordot(np.exp(2.0 * trial), squares, axes=1)
                return gaussian_loglik_stats(obs, means, var) + norm.logpdf(value, mu[b], sd[b])
            current[b] = slice_sample_scalar(current[b], logpost, self._sigma_slice, self.rng, self.stats)
        return current

    def sample_factors(self, ct: ChoiceTensor, Ku: np.ndarray, model: CollapsedLikelihood) -> ChoiceTensor:
        frozen = FROZEN_MODES[self.cfg.choice_variant]
        priors = (("V", self.ctx.K_S.chol), ("W", self.ctx.K_T.chol), ("U", la.cholesky(Ku, lower=True)))
        ll = model(ct)
        for mode, chol in priors:
            if mode in frozen:
                continue
            for r in range(ct.rank):
                def loglik(column, mode=mode, r=r, base=ct):
                    return model(base.with_column(mode, r, column))
                column, ll = ess_sample(EllipseState(getattr(ct, mode)[:, r], chol), loglik,
                                        self.rng, ll, self.stats)
                ct = ct.with_column(mode, r, column)
        return ct

    def sample_baseline(self, ct: ChoiceTensor, model: CollapsedLikelihood) -> ChoiceTensor:
        mu = self.cfg.q_prior_mean
        sd = np.sqrt(self.cfg.q_prior_var)
        for i, name in enumerate(("q1", "q2")):
            def logpost(value, name=name, i=i, base=ct):
                return model(replace(base, **{name: value})) + norm.logpdf(value, mu[i], sd[i])
            value = slice_sample_scalar(getattr(ct, name), logpost, self._q_slice, self.rng, self.stats)
            ct = replace(ct, **{name: value})
        return ct


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, chain]))


def _save_checkpoint(path: str, state: ModelState, iteration: int) -> None:
    np.savez(path, x=state.x, log_sigma=state.log_sigma, U=state.ct.U, V=state.ct.V,
             W=state.ct.W, q=np.array([state.ct.q1, state.ct.q2]), Ku=state.Ku, z=state.z,
             iteration=iteration)


def run_chain(ctx: FitContext, chain: int, checkpoint_dir: Optional[str] = None) -> PosteriorDraws:
    cfg = ctx.cfg
    sampler = GibbsSampler(ctx, chain)
    state = initialize(ctx, sampler.rng)
    total = cfg.burn_in + cfg.samples
    n_keep = math.ceil(cfg.samples / cfg.thinning)
    n_od, k_max = len(ctx.table.ods), ctx.table.k_max
    R, n, T, c = cfg.rank, ctx.net.n, ctx.T, ctx.net.c

    out = {
        "x": np.empty((n_keep, T, c)), "sigma": np.empty((n_keep, 4)),
        "U": np.empty((n_keep, 2, R)), "V": np.empty((n_keep, n, R)), "W": np.empty((n_keep, T, R)),
        "q": np.empty((n_keep, 2)), "Ku": np.empty((n_keep, 2, 2)),
        "theta": np.empty((n_keep, n, T)), "phi": np.empty((n_keep, n, T)),
        "z_counts": np.zeros((n_keep, n_od, T, k_max), dtype=np.int32),
        "chain": np.full(n_keep, chain, dtype=int), "iteration": np.empty(n_keep, dtype=int),
    }
    labels = np.empty((n_keep, len(ctx.y)), dtype=np.int16) if cfg.store_labels else None

    logger.info(f"[Gibbs] chain {chain}: {cfg.burn_in} burn-in + {cfg.samples} sampling iterations, "
                f"{len(ctx.y)} trips, variant={cfg.choice_variant}, R={R}")
    kept = 0
    for i in range(1, total + 1):
        try:
            state = sampler.sweep(state)
        except (TransitError, la.LinAlgError, FloatingPointError, ValueError) as e:
            block = sampler.trace[-1][1] if sampler.trace else "init"
            details = [str(e)]
            if checkpoint_dir is not None:
                os.makedirs(checkpoint_dir, exist_ok=True)
                path = os.path.join(checkpoint_dir, f"checkpoint_chain{chain}.npz")
                _save_checkpoint(path, state, i - 1)
                details.append(f"last valid state written to {path}")
            raise SamplerError(f"Chain {chain} failed at iteration {i} in block '{block}'", details) from e

        if i % cfg.log_every == 0 or i == total:
            phase = "burn-in" if i <= cfg.burn_in else "sampling"
            sig = ", ".join(f"{v:.4f}" for v in state.sigma)
            logger.info(f"[Gibbs] chain {chain} {phase} {i}/{total} sigma=({sig}) "
                        f"q=({state.ct.q1:.4f}, {state.ct.q2:.4f})")

        s = i - cfg.burn_in - 1
        if s < 0 or s % cfg.thinning:
            continue
        theta, phi = reconstruct_coefficients(state.ct)
        out["x"][kept] = state.x
        out["sigma"][kept] = state.sigma
        out["U"][kept], out["V"][kept], out["W"][kept] = state.ct.U, state.ct.V, state.ct.W
        out["q"][kept] = (state.ct.q1, state.ct.q2)
        out["Ku"][kept] = state.Ku
        out["theta"][kept], out["phi"][kept] = theta, phi
        cell = (ctx.od * T + ctx.t0) * k_max + state.z
        out["z_counts"][kept] = np.bincount(cell, minlength=n_od * T * k_max).reshape(n_od, T, k_max)
        out["iteration"][kept] = i
        if labels is not None:
            labels[kept] = state.z
        kept += 1

    if sampler.stats.slice_fallbacks or sampler.stats.choice_underflows:
        logger.warning(f"[Gibbs] chain {chain} sampler events: {sampler.stats.as_dict()}")
    return PosteriorDraws(**out, labels=labels, stats={chain: sampler.stats},
                          trace={chain: sampler.trace})


def _run_chain_job(net_payload: dict, trips_frame: pd.DataFrame, cfg_payload: dict, chain: int,
                   checkpoint_dir: Optional[str]) -> PosteriorDraws:
    net = build_network(net_payload)
    ctx = build_context(TripTable.from_frame(trips_frame), net, RunConfig(**cfg_payload))
    return run_chain(ctx, chain, checkpoint_dir)


def run(trips: TripTable, net: NetworkModel, cfg: RunConfig,
        checkpoint_dir: Optional[str] = None) -> PosteriorDraws:
    """Run all chains and stack their stored draws in chain order"""
    if cfg.workers > 1 and cfg.chains > 1:
        net_payload = net.to_spec().model_dump(by_alias=True)
        frame = trips.to_frame()
        with ProcessPoolExecutor(max_workers=min(cfg.workers, cfg.chains)) as pool:
            futures = [pool.submit(_run_chain_job, net_payload, frame, cfg.model_dump(), chain, checkpoint_dir)
                       for chain in range(cfg.chains)]
            parts = [f.result() for f in futures]
    else:
        ctx = build_context(trips, net, cfg)
        parts = [run_chain(ctx, chain, checkpoint_dir) for chain in range(cfg.chains)]
    draws = PosteriorDraws.concatenate(parts)
    logger.info(f"[Gibbs] Stored {draws.n_draws} draws from {cfg.chains} chain(s)")
    return draws


# ── Summaries ──

def credible_interval(samples: np.ndarray, level: float = 0.95) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean and equal-tailed interval along the draw axis (linear-interpolation quantiles)"""
    samples = np.asarray(samples, dtype=float)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(samples, [tail, 1.0 - tail], axis=0, method="linear")
    return samples.mean(axis=0), lo, hi


def posterior_summary(draws: PosteriorDraws, level: float = 0.95,
                      net: Optional[NetworkModel] = None) -> dict[str, pd.DataFrame]:
    """
    Posterior mean and credible interval of every scalar quantity, one long
    table per block. Theta and Phi are summarized from the reconstructed
    coefficients of every draw.
    """
    if draws.n_draws < 2:
        raise SamplerError(f"Need at least 2 posterior draws to summarize, got {draws.n_draws}")
    n, T = draws.theta.shape[1:]
    stations = list(net.station_ids) if net is not None else [str(i) for i in range(n)]
    tables = {}

    for name in ("theta", "phi"):
        mean, lo, hi = credible_interval(getattr(draws, name), level)
        o, t = np.meshgrid(np.arange(n), np.arange(T), indexing="ij")
        tables[name] = pd.DataFrame({
            "station": np.asarray(stations, dtype=object)[o.ravel()],
            "interval": t.ravel() + 1,
            "mean": mean.ravel(), "lower": lo.ravel(), "upper": hi.ravel(),
        })

    mean, lo, hi = credible_interval(draws.x, level)
    c = mean.shape[1]
    t, pos = np.meshgrid(np.arange(T), np.arange(c), indexing="ij")
    if net is not None:
        elements = [net.index_map.element(p) for p in range(c)]
        kinds = np.array([k for k, _ in elements], dtype=object)
        ids = np.array([e for _, e in elements], dtype=object)
    else:
        kinds = np.full(c, "", dtype=object)
        ids = np.arange(c).astype(str).astype(object)
    tables["x"] = pd.DataFrame({
        "interval": t.ravel() + 1, "position": pos.ravel(),
        "kind": kinds[pos.ravel()], "element": ids[pos.ravel()],
        "mean": mean.ravel(), "lower": lo.ravel(), "upper": hi.ravel(),
    })

    scalars = np.column_stack([draws.sigma, draws.q])
    mean, lo, hi = credible_interval(scalars, level)
    tables["scalars"] = pd.DataFrame({
        "parameter": list(SIGMA_NAMES) + ["q1", "q2"],
        "mean": mean, "lower": lo, "upper": hi,
    })
    return tables

