"""
Command-line entry point.

    python backend/cli.py simulate --scale desk --seed 7 --out data/desk
    python backend/cli.py fit --network data/desk/network.json --trips data/desk/trips.csv \
        --config data/desk/config.env --run-id desk
    python backend/cli.py evaluate --run desk --truth data/desk/truth.npz
    python backend/cli.py assign --run desk --prior
    python backend/cli.py diagnose --run desk
    python backend/cli.py summary --run desk

Exit status is 0 on success and the error category's code otherwise.
"""

import argparse
import json
import logging
import os
import sys
from typing import Optional

import numpy as np
import pandas as pd

from assignment import assignment_from_draws, prior_assignment, uncertainty_reduction
from config import RunConfig, config_hash, load_run_config, write_run_config
from errors import DataValidationError, TransitError
from evaluation import (diagnostics, evaluate_predictions, oracle_noise_floor, recovery_score, state_rmse,
                        stratified_split, trace_frame)
from gibbs import posterior_summary, run
from network import NetworkModel, load_network, save_network, with_enumerated_paths
from simulate import SCALES, load_truth, save_truth, simulate_dataset
from storage import PosteriorStore
from trips import TripTable, ingest_trips, write_trips

logger = logging.getLogger(__name__)

SPLIT_STREAM = 104729


def setup_logging(level: Optional[str] = None) -> None:
    level = (level or os.getenv("TRANSIT_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s %(message)s", force=True)


def _overrides(args) -> dict:
    keys = {
        "seed": "seed", "chains": "chains", "burn_in": "burn_in", "samples": "samples",
        "rank": "rank", "variant": "choice_variant", "holdout_fraction": "holdout_fraction",
        "thinning": "thinning", "workers": "workers",
    }
    return {target: getattr(args, src) for src, target in keys.items()
            if getattr(args, src, None) is not None}


def _load_network(path: str, cfg: RunConfig) -> NetworkModel:
    net = load_network(path)
    if not net.path_sets:
        net = with_enumerated_paths(net, k_max=cfg.k_max, detour_cap=cfg.detour_cap)
    return net


def _ingest(path: str, net: NetworkModel, cfg: RunConfig) -> TripTable:
    return ingest_trips(path, net, cfg.n_intervals, cfg.interval_start_minutes, cfg.interval_minutes,
                        cfg.max_malformed_fraction)


# ── Commands ──

def cmd_simulate(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    scale = SCALES[args.scale]
    cfg = cfg.model_copy(update={"n_intervals": scale["n_intervals"], "rank": scale["rank"]})
    net = load_network(args.network) if args.network else None
    net, truth, trips = simulate_dataset(cfg, args.scale, net)

    os.makedirs(args.out, exist_ok=True)
    save_network(net, os.path.join(args.out, "network.json"))
    write_trips(trips, os.path.join(args.out, "trips.csv"))
    save_truth(truth, os.path.join(args.out, "truth.npz"), net)
    write_run_config(cfg, os.path.join(args.out, "config.env"))
    print(f"Simulated {len(trips)} trips on '{net.spec.name}' (n={net.n}, c={net.c}, T={truth.T}, "
          f"R={truth.ct.rank}) -> {args.out}")
    return 0


def cmd_fit(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    net = _load_network(args.network, cfg)
    trips = _ingest(args.trips, net, cfg)

    validation = None
    if cfg.holdout_fraction > 0:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, SPLIT_STREAM]))
        trips, validation = stratified_split(trips, net, cfg.holdout_fraction, rng)
        logger.info(f"[CLI] Holding out {len(validation)} of {len(trips) + len(validation)} trips")

    store = PosteriorStore(args.runs_dir)
    run_id = args.run_id or f"{cfg.choice_variant}-R{cfg.rank}-seed{cfg.seed}"
    draws = run(trips, net, cfg, checkpoint_dir=store.run_dir(run_id))
    manifest = store.save(run_id, draws, net, cfg, trips.content_hash())
    write_trips(trips, os.path.join(store.run_dir(run_id), "trips.csv"))
    if validation is not None:
        write_trips(validation, os.path.join(store.run_dir(run_id), "validation.csv"))
    print(f"Run '{run_id}': {manifest['n_draws']} draws, config {manifest['config_hash'][:12]}, "
          f"draws {manifest['draws_hash'][:12]}")
    return 0


def _evaluate_one(store: PosteriorStore, run_id: str, args) -> dict:
    draws, net, cfg, manifest = store.load(run_id)
    if args.network:
        data_net = load_network(args.network)
        if data_net.network_hash != manifest["network_hash"] and \
                with_enumerated_paths(data_net, k_max=cfg.k_max, detour_cap=cfg.detour_cap).network_hash \
                != manifest["network_hash"]:
            raise DataValidationError(f"Network {args.network} does not match the network of run '{run_id}'")

    row = {"run": run_id, "variant": cfg.choice_variant, "rank": cfg.rank}
    validation_path = args.trips or os.path.join(store.run_dir(run_id), "validation.csv")
    if os.path.exists(validation_path):
        trips = _ingest(validation_path, net, cfg)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
        report = evaluate_predictions(trips, draws, net, rng, cfg.predictive_replicates, cfg.predictive_draws,
                                      cfg.utility_time_unit_s, cfg.variance_floor_s)
        store.write_table(run_id, "metrics_per_od", report.per_od)
        row.update(report.as_dict())
    else:
        logger.warning(f"[CLI] Run '{run_id}' has no validation trips, skipping predictive scores")

    if args.truth:
        truth, truth_hash = load_truth(args.truth)
        if truth_hash != manifest["network_hash"]:
            raise DataValidationError(f"Ground truth {args.truth} was generated on a different network")
        table, coverage = recovery_score(draws, truth, cfg.credible_level)
        store.write_table(run_id, "recovery", table)
        for block, rate in coverage.items():
            row[f"coverage_{block}"] = rate
        row["sigma_rel_error"] = float(np.max(np.abs(draws.sigma.mean(axis=0) / truth.sigma.as_array() - 1.0)))
        row["x_rmse"] = float(state_rmse(draws.x.mean(axis=0), truth.x).mean())
        train = TripTable.from_frame(store_trips(store, run_id))
        if truth.z is not None and len(truth.z) == len(train):
            row["x_rmse_oracle"] = float(oracle_noise_floor(truth, train, net, cfg.p0_variance,
                                                            cfg.variance_floor_s).mean())

    store.write_json(run_id, "metrics", {k: v for k, v in row.items() if not isinstance(v, pd.DataFrame)})
    return row


def store_trips(store: PosteriorStore, run_id: str) -> pd.DataFrame:
    return pd.read_csv(os.path.join(store.run_dir(run_id), "trips.csv"), comment="#",
                       dtype={"origin_id": str, "destination_id": str})


def cmd_evaluate(args) -> int:
    store = PosteriorStore(args.runs_dir)
    rows = [_evaluate_one(store, run_id, args) for run_id in args.run]
    table = pd.DataFrame(rows)
    if args.out:
        table.to_csv(args.out, index=False)
    print(table.to_string(index=False))
    return 0


def cmd_assign(args) -> int:
    store = PosteriorStore(args.runs_dir)
    draws, net, cfg, _ = store.load(args.run)
    posterior = assignment_from_draws(draws, net)
    store.write_table(args.run, "path_flows", posterior.paths)
    store.write_table(args.run, "link_flows", posterior.links)
    print(f"Wrote path and link flows for {draws.n_draws} draws")
    if args.prior:
        trips = _ingest(os.path.join(store.run_dir(args.run), "trips.csv"), net, cfg)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
        prior = prior_assignment(draws, net, trips, rng, cfg.utility_time_unit_s)
        store.write_table(args.run, "prior_link_flows", prior.links)
        share = uncertainty_reduction(posterior, prior)
        print(f"Posterior link-flow SD <= prior SD on {share:.1%} of loaded link-intervals")
    return 0


def cmd_diagnose(args) -> int:
    store = PosteriorStore(args.runs_dir)
    draws, _, cfg, _ = store.load(args.run)
    threshold = args.threshold if args.threshold is not None else cfg.ess_threshold
    table = diagnostics(draws, threshold, seed=cfg.seed)
    store.write_table(args.run, "diagnostics", table)
    store.write_table(args.run, "trace_long", trace_frame(draws, seed=cfg.seed))
    flagged = table[table["flagged"]]
    print(table.to_string(index=False))
    print(f"{len(flagged)} of {len(table)} monitored parameters have ESS <= {threshold:g}")
    return 0


def cmd_summary(args) -> int:
    store = PosteriorStore(args.runs_dir)
    draws, net, cfg, _ = store.load(args.run)
    level = args.level if args.level is not None else cfg.credible_level
    tables = posterior_summary(draws, level, net)
    for name, df in tables.items():
        store.write_table(args.run, f"{name}_summary", df)
    print(tables["scalars"].to_string(index=False))
    return 0


# ── Parser ──

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transit-assign",
                                     description="Bayesian path assignment for metro trip records")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default TRANSIT_LOG_LEVEL or INFO)")
    parser.add_argument("--runs-dir", default=None, help="posterior store root (default RUNS_DIR or ./runs)")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_options(p):
        p.add_argument("--config", help="key=value run configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--chains", type=int)
        p.add_argument("--burn-in", dest="burn_in", type=int)
        p.add_argument("--samples", type=int)
        p.add_argument("--thinning", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--rank", type=int)
        p.add_argument("--variant", choices=["spatiotemporal", "spatial", "temporal", "static"])
        p.add_argument("--holdout-fraction", dest="holdout_fraction", type=float)

    p = sub.add_parser("simulate", help="generate a synthetic network, trips and ground truth")
    p.add_argument("--scale", choices=sorted(SCALES), default="desk")
    p.add_argument("--network", help="network file (required for --scale full)")
    p.add_argument("--out", required=True, help="output directory")
    run_options(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="run the Gibbs sampler and write a posterior store")
    p.add_argument("--network", required=True)
    p.add_argument("--trips", required=True)
    p.add_argument("--run-id", dest="run_id")
    run_options(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="predictive scores and recovery for one or more runs")
    p.add_argument("--run", action="append", required=True, help="run id, repeat to compare runs")
    p.add_argument("--trips", help="validation trips (default: the run's held-out trips)")
    p.add_argument("--network", help="network the validation data belongs to")
    p.add_argument("--truth", help="ground-truth file from simulate")
    p.add_argument("--out", help="write the comparison table here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("assign", help="posterior path and link flows")
    p.add_argument("--run", required=True)
    p.add_argument("--prior", action="store_true", help="also compute prior-only flows")
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("diagnose", help="ESS and R-hat of monitored parameters, trace export")
    p.add_argument("--run", required=True)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("summary", help="posterior means and credible intervals")
    p.add_argument("--run", required=True)
    p.add_argument("--level", type=float)
    p.set_defaults(func=cmd_summary)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.func(args)
    except TransitError as e:
        logger.error(f"[CLI] {type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
