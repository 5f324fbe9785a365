"""
Gibbs sweep, chains and posterior summaries
"""
import os

import numpy as np
import pytest

from config import RunConfig
from errors import DataValidationError, SamplerError
from gibbs import (BLOCK_ORDER, GibbsSampler, PosteriorDraws, build_context, credible_interval, initialize, run,
                   run_chain, posterior_summary, warm_start_m0)
from trips import TripTable


def fit_cfg(**updates):
    values = dict(n_intervals=4, rank=2, burn_in=2, samples=4, seed=11, log_every=1000)
    values.update(updates)
    return RunConfig(**values)


@pytest.fixture(scope="module")
def fitted(small_dataset):
    net, _, trips = small_dataset
    return run(trips, net, fit_cfg())


def test_draw_shapes(fitted, small_dataset):
    net, _, trips = small_dataset
    D = 4
    assert fitted.n_draws == D
    assert fitted.x.shape == (D, 4, net.c)
    assert fitted.sigma.shape == (D, 4)
    assert fitted.U.shape == (D, 2, 2)
    assert fitted.V.shape == (D, net.n, 2)
    assert fitted.W.shape == (D, 4, 2)
    assert fitted.theta.shape == (D, net.n, 4)
    assert fitted.z_counts.shape == (D, len(net.path_table.ods), 4, net.path_table.k_max)
    assert list(fitted.iteration) == [3, 4, 5, 6]
    assert fitted.chains == [0]
    assert np.all(fitted.sigma > 0)


def test_every_draw_assigns_every_trip(fitted, small_dataset):
    net, truth, trips = small_dataset
    assert np.all(fitted.z_counts.sum(axis=(1, 2, 3)) == len(trips))
    assert np.array_equal(fitted.z_counts.sum(axis=3)[0], truth.demand)
    table = net.path_table
    unused = ~table.slot_mask()
    assert np.all(np.swapaxes(fitted.z_counts, 2, 3)[:, unused] == 0)


def test_blocks_run_in_fixed_order(fitted):
    steps = fitted.trace[0]
    assert len(steps) == 6 * len(BLOCK_ORDER)
    for i in range(1, 7):
        assert tuple(b for it, b in steps if it == i) == BLOCK_ORDER


def test_same_seed_same_draws(fitted, small_dataset):
    net, _, trips = small_dataset
    again = run(trips, net, fit_cfg())
    for name in ("x", "sigma", "U", "V", "W", "q", "Ku", "z_counts"):
        assert np.array_equal(getattr(again, name), getattr(fitted, name))
    other = run(trips, net, fit_cfg(seed=12))
    assert not np.array_equal(other.sigma, fitted.sigma)


def test_chains_are_independent_streams(fitted, small_dataset):
    net, _, trips = small_dataset
    two = run(trips, net, fit_cfg(chains=2))
    assert two.chains == [0, 1]
    first = two.for_chain(0)
    assert np.array_equal(first.x, fitted.x)
    assert np.array_equal(first.q, fitted.q)
    assert not np.array_equal(two.for_chain(1).q, fitted.q)


def test_thinning(small_dataset):
    net, _, trips = small_dataset
    draws = run(trips, net, fit_cfg(samples=4, thinning=2))
    assert list(draws.iteration) == [3, 5]


def test_static_variant_keeps_coefficients_flat(small_dataset):
    net, _, trips = small_dataset
    draws = run(trips, net, fit_cfg(choice_variant="static"))
    for d in range(draws.n_draws):
        assert np.allclose(draws.theta[d], draws.q[d, 0])
        assert np.allclose(draws.phi[d], draws.q[d, 1])


def test_spatial_variant_is_flat_in_time(small_dataset):
    net, _, trips = small_dataset
    draws = run(trips, net, fit_cfg(choice_variant="spatial"))
    assert np.allclose(draws.W, 1.0)
    assert np.allclose(draws.theta, draws.theta[:, :, :1])


def test_initial_state(small_dataset):
    net, _, trips = small_dataset
    ctx = build_context(trips, net, fit_cfg(m0_policy="nominal"))
    state = initialize(ctx, np.random.default_rng(0))
    assert np.allclose(state.x, net.nominal_costs)
    assert np.allclose(state.sigma, np.exp(-3.0))
    assert state.ct.q1 == 0.0 and state.ct.q2 == 0.0
    assert state.z.shape == (len(trips),)


def test_warm_start_stays_above_floor(small_dataset):
    net, _, trips = small_dataset
    table = net.path_table
    m0 = warm_start_m0(net, table, trips.od_index(table), trips.travel_time_s)
    assert m0.shape == (net.c,)
    assert np.all(m0 >= 1.0)
    empty = warm_start_m0(net, table, np.zeros(0, dtype=int), np.zeros(0))
    assert np.array_equal(empty, net.nominal_costs)


def test_trip_outside_window_is_rejected(small_dataset):
    net, _, trips = small_dataset
    with pytest.raises(DataValidationError, match=r"\[1, 2\]"):
        build_context(trips, net, fit_cfg(n_intervals=2))


def test_failure_writes_checkpoint(small_dataset, tmp_path, monkeypatch):
    net, _, trips = small_dataset

    def broken(self, ct, model):
        raise SamplerError("baseline exploded")

    monkeypatch.setattr(GibbsSampler, "sample_baseline", broken)
    ctx = build_context(trips, net, fit_cfg())
    with pytest.raises(SamplerError, match="block 'baseline'") as exc:
        run_chain(ctx, 0, checkpoint_dir=str(tmp_path))
    assert os.path.exists(tmp_path / "checkpoint_chain0.npz")
    assert any("baseline exploded" in d for d in exc.value.details)


def test_labels_are_stored_on_request(small_dataset):
    net, _, trips = small_dataset
    draws = run(trips, net, fit_cfg(store_labels=True))
    assert draws.labels.shape == (4, len(trips))


def test_credible_interval_uses_linear_quantiles():
    mean, lo, hi = credible_interval(np.arange(101.0), 0.9)
    assert mean == pytest.approx(50.0)
    assert lo == pytest.approx(5.0)
    assert hi == pytest.approx(95.0)


def test_posterior_summary_tables(fitted, small_dataset):
    net, _, _ = small_dataset
    tables = posterior_summary(fitted, 0.95, net)
    assert set(tables) == {"theta", "phi", "x", "scalars"}
    assert len(tables["theta"]) == net.n * 4
    assert len(tables["x"]) == net.c * 4
    assert list(tables["scalars"]["parameter"]) == ["sigma_a", "sigma_h", "sigma_u", "sigma_e", "q1", "q2"]
    s = tables["scalars"]
    assert np.all((s["lower"] <= s["mean"]) & (s["mean"] <= s["upper"]))
    assert set(tables["x"]["kind"]) == {"access", "invehicle", "transfer", "egress"}


def test_summary_needs_two_draws(fitted):
    with pytest.raises(SamplerError):
        posterior_summary(fitted.select(np.array([0])))


def test_concatenate_keeps_chain_order(fitted):
    both = PosteriorDraws.concatenate([fitted, fitted])
    assert both.n_draws == 2 * fitted.n_draws
    with pytest.raises(SamplerError):
        PosteriorDraws.concatenate([])


def test_empty_trip_table_runs(small_dataset):
    net, _, _ = small_dataset
    draws = run(TripTable.empty(), net, fit_cfg(samples=2))
    assert draws.n_draws == 2
    assert draws.z_counts.sum() == 0
