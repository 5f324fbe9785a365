"""
Flow assignment from the stored path-choice counts.

Every stored draw assigns each observed trip to one path; summing those
assignments over paths and links gives a posterior distribution of path and
link flows per interval. The prior-only variant redraws the choices from the
logit probabilities of each draw, ignoring the observed travel times.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import sparse

from choice import log_choice_probabilities
from gibbs import PosteriorDraws
from network import NetworkModel
from samplers import sample_prior_choices
from trips import TripTable

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class AssignmentTable:
    paths: pd.DataFrame   # origin_id, destination_id, interval, slot, path, mean, sd
    links: pd.DataFrame   # link, kind, line, from, to, interval, mean, sd

    def od_totals(self) -> pd.DataFrame:
        return (self.paths.groupby(["origin_id", "destination_id", "interval"], sort=True)["mean"]
                .sum().reset_index(name="assigned"))


def _path_flows(z_counts: np.ndarray, net: NetworkModel) -> np.ndarray:
    """(D, P, T) trips per path from (D, n_od, T, k_max) counts"""
    table = net.path_table
    return np.swapaxes(z_counts, 2, 3)[:, table.path_od, table.path_slot, :]


def _tables(flows: np.ndarray, net: NetworkModel) -> AssignmentTable:
    table = net.path_table
    D, P, T = flows.shape
    ddof = 1 if D > 1 else 0
    mean, sd = flows.mean(axis=0), flows.std(axis=0, ddof=ddof)

    p, t = np.meshgrid(np.arange(P), np.arange(T), indexing="ij")
    p, t = p.ravel(), t.ravel()
    paths = pd.DataFrame({
        "origin_id": [table.paths[i].origin for i in p],
        "destination_id": [table.paths[i].destination for i in p],
        "interval": t + 1,
        "slot": table.path_slot[p] + 1,
        "path": ["|".join(table.paths[i].elements) for i in p],
        "mean": mean[p, t], "sd": sd[p, t],
    })

    # ride links first, then transfer walkways
    inc = sparse.vstack([table.link_incidence.T, table.transfer_incidence.T]).tocsr()    # (l + s) x P
    link_flows = np.stack([np.asarray(inc @ flows[d]) for d in range(D)])           # D x (l + s) x T
    l_mean, l_sd = link_flows.mean(axis=0), link_flows.std(axis=0, ddof=ddof)

    ids = net.link_ids + net.transfer_ids
    rides = [(net.links[k].line, net.links[k].from_station, net.links[k].to_station) for k in net.link_ids]
    walks = [(f"{tr.from_line}-{tr.to_line}", tr.station, tr.station)
             for tr in (net.transfers[k] for k in net.transfer_ids)]
    info = rides + walks
    kinds = ["invehicle"] * net.l + ["transfer"] * net.s

    k, t = np.meshgrid(np.arange(len(ids)), np.arange(T), indexing="ij")
    k, t = k.ravel(), t.ravel()
    links = pd.DataFrame({
        "link": [ids[i] for i in k],
        "kind": [kinds[i] for i in k],
        "line": [info[i][0] for i in k],
        "from": [info[i][1] for i in k],
        "to": [info[i][2] for i in k],
        "interval": t + 1,
        "mean": l_mean[k, t], "sd": l_sd[k, t],
    })
    return AssignmentTable(paths=paths, links=links)


def assignment_from_draws(draws: PosteriorDraws, net: NetworkModel) -> AssignmentTable:
    """Posterior mean and SD of path and link flows across stored draws"""
    flows = _path_flows(draws.z_counts, net).astype(float)
    logger.info(f"[Assign] Posterior flows from {draws.n_draws} draws")
    return _tables(flows, net)


def prior_assignment(draws: PosteriorDraws, net: NetworkModel, trips: TripTable, rng: np.random.Generator,
                     time_unit_s: float = 60.0) -> AssignmentTable:
    """Flows when choices come from the logit probabilities of each draw alone"""
    table = net.path_table
    od, t0 = trips.od_index(table), trips.t0
    T = draws.theta.shape[2]
    k_max = table.k_max
    counts = np.zeros((draws.n_draws, len(table.ods), T, k_max))
    for d in range(draws.n_draws):
        x = draws.x[d]
        inv = np.asarray(table.invehicle @ x.T)
        trf = np.asarray(table.transfer @ x.T)
        logp = log_choice_probabilities(draws.theta[d], draws.phi[d], inv, trf, table, time_unit_s)
        z = sample_prior_choices(od, t0, logp, table, rng)
        cell = (od * T + t0) * k_max + z
        counts[d] = np.bincount(cell, minlength=len(table.ods) * T * k_max).reshape(len(table.ods), T, k_max)
    logger.info(f"[Assign] Prior-only flows from {draws.n_draws} draws")
    return _tables(_path_flows(counts, net), net)


def uncertainty_reduction(posterior: AssignmentTable, prior: AssignmentTable) -> float:
    """Share of loaded (link, interval) cells whose posterior SD does not exceed the prior SD"""
    merged = posterior.links.merge(prior.links, on=["link", "interval"], suffixes=("_post", "_prior"))
    loaded = merged[(merged["mean_post"] > 0) | (merged["mean_prior"] > 0)]
    if loaded.empty:
        return 1.0
    return float((loaded["sd_post"] <= loaded["sd_prior"] + 1e-12).mean())
