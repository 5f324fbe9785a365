"""
Desk-scale parameter recovery. Long runs, enabled with RUN_SLOW=1.
"""
import numpy as np
import pytest

from config import RunConfig
from evaluation import (diagnostics, evaluate_predictions, oracle_noise_floor, recovery_score, state_rmse,
                        stratified_split)
from gibbs import run
from simulate import simulate_dataset


def desk_cfg(**updates):
    values = dict(seed=1, n_intervals=8, rank=2, burn_in=2000, samples=1000, log_every=500)
    values.update(updates)
    return RunConfig(**values)


@pytest.mark.slow
def test_desk_recovery():
    cfg = desk_cfg(chains=2, workers=2)
    net, truth, trips = simulate_dataset(cfg, "desk")
    draws = run(trips, net, cfg)

    rel = np.abs(draws.sigma.mean(axis=0) / truth.sigma.as_array() - 1.0)
    assert np.all(rel < 0.2), rel

    _, coverage = recovery_score(draws, truth, 0.95)
    assert coverage["theta"] >= 0.88
    assert coverage["phi"] >= 0.88

    floor = oracle_noise_floor(truth, trips, net, cfg.p0_variance, cfg.variance_floor_s)
    assert np.all(state_rmse(draws.x.mean(axis=0), truth.x) <= 2.0 * floor)

    table = diagnostics(draws, 200.0, seed=cfg.seed)
    assert (~table["flagged"]).mean() >= 0.95

    # chains agree on Theta within pooled Monte-Carlo error
    a, b = draws.for_chain(0).theta, draws.for_chain(1).theta
    pooled = np.sqrt(a.var(axis=0) / len(a) + b.var(axis=0) / len(b))
    assert np.mean(np.abs(a.mean(axis=0) - b.mean(axis=0)) <= 4.0 * pooled + 1e-9) >= 0.95


@pytest.mark.slow
def test_full_model_scores_at_least_as_well_as_reduced_variants():
    cfg = desk_cfg(burn_in=1000, samples=500, seed=2)
    net, _, trips = simulate_dataset(cfg, "desk")
    train, holdout = stratified_split(trips, net, 0.2, np.random.default_rng(0))

    scores = {}
    for variant in ("spatiotemporal", "spatial", "temporal", "static"):
        variant_cfg = cfg.model_copy(update={"choice_variant": variant})
        draws = run(train, net, variant_cfg)
        report = evaluate_predictions(holdout, draws, net, np.random.default_rng(1), 1, 200,
                                      cfg.utility_time_unit_s, cfg.variance_floor_s)
        assert report.rmse >= report.mae
        scores[variant] = report.crps
    for variant in ("spatial", "temporal", "static"):
        assert scores[variant] >= scores["spatiotemporal"] * 0.99, scores
