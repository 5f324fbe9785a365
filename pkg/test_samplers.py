"""
Slice sampling, elliptical slice sampling, inverse-Wishart draws and the
path-choice updates
"""
import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import norm

from choice import (ChoiceTensor, choice_probabilities, log_choice_probabilities, path_utilities,
                    reconstruct_coefficients)
from errors import ConfigError, SamplerError
from network import build_network, with_enumerated_paths
from samplers import (CollapsedLikelihood, EllipseState, MixtureTerms, SamplerStats, SliceConfig,
                      categorical_posterior, ess_sample, mixture_terms, sample_Ku, sample_path_choices,
                      sample_prior_choices, sample_wishart, slice_sample_scalar)


@pytest.fixture(scope="module")
def fan_net():
    """O-D has four single-line paths (one through M); O-M and M-D have one"""
    links = [("A:O-M", "O", "M", "A", 100.0), ("A:M-D", "M", "D", "A", 100.0),
             ("B:O-D", "O", "D", "B", 220.0), ("C:O-D", "O", "D", "C", 240.0), ("E:O-D", "O", "D", "E", 260.0)]
    specs = []
    for lid, a, b, line, time_s in links:
        specs.append({"id": lid, "from": a, "to": b, "line": line, "time_s": time_s})
        specs.append({"id": f"{lid}r", "from": b, "to": a, "line": line, "time_s": time_s})
    spec = {"name": "fan", "stations": [{"id": s} for s in ("O", "M", "D")], "invehicle_links": specs}
    return with_enumerated_paths(build_network(spec), k_max=5, detour_cap=1.5)


def fan_inputs(net, T=2, seed=0):
    """Costs, per-path means and variances, and logit coefficients for the fan network"""
    table = net.path_table
    rng = np.random.default_rng(seed)
    x = np.tile(net.nominal_costs, (T, 1)) * rng.uniform(0.9, 1.1, size=(T, net.c))
    means = np.asarray(table.routing @ x.T)
    variances = 300.0 + 50.0 * np.arange(table.n_paths)[:, None] + np.zeros((1, T))
    ct = ChoiceTensor(U=rng.normal(0, 0.2, (2, 2)), V=rng.normal(0, 0.5, (net.n, 2)),
                      W=rng.normal(0, 0.5, (T, 2)), q1=-0.3, q2=-0.5)
    return x, means, variances, ct


def test_slice_sampler_targets_standard_normal():
    rng = np.random.default_rng(0)
    cfg = SliceConfig(epsilon=6.0)
    x, draws = 0.0, np.empty(100_000)
    for _ in range(1000):
        x = slice_sample_scalar(x, lambda v: -0.5 * v * v, cfg, rng)
    for i in range(draws.size):
        x = slice_sample_scalar(x, lambda v: -0.5 * v * v, cfg, rng)
        draws[i] = x
    assert abs(draws.mean()) < 0.02
    assert 0.97 <= draws.var() <= 1.03


def test_slice_sampler_falls_back_to_current_value():
    rng = np.random.default_rng(1)
    stats = SamplerStats()
    point = 0.3
    value = slice_sample_scalar(point, lambda v: 0.0 if v == point else -np.inf,
                                SliceConfig(epsilon=1.0, max_shrink=5), rng, stats)
    assert value == point
    assert stats.slice_fallbacks == 1
    assert stats.slice_evaluations == 5


def test_slice_sampler_needs_finite_start():
    with pytest.raises(SamplerError):
        slice_sample_scalar(0.0, lambda v: -np.inf, SliceConfig(epsilon=1.0), np.random.default_rng(0))


def test_slice_config_validation():
    with pytest.raises(ConfigError):
        SliceConfig(epsilon=0.0)
    with pytest.raises(ConfigError):
        SliceConfig(epsilon=1.0, max_shrink=0)


def test_ess_targets_conjugate_posterior():
    # prior N(0, 1), one observation 1.0 with unit noise: posterior N(0.5, 0.5)
    rng = np.random.default_rng(2)
    state = EllipseState(np.zeros(1), np.eye(1))
    ll = None
    draws = []
    for _ in range(6000):
        vec, ll = ess_sample(state, lambda f: -0.5 * (1.0 - f[0]) ** 2, rng, ll)
        state = EllipseState(vec, np.eye(1))
        draws.append(vec[0])
    draws = np.array(draws[500:])
    assert draws.mean() == pytest.approx(0.5, abs=0.08)
    assert draws.var() == pytest.approx(0.5, abs=0.1)


def test_ess_with_flat_likelihood_accepts_first_proposal():
    rng = np.random.default_rng(3)
    stats = SamplerStats()
    state = EllipseState(np.ones(3), np.eye(3))
    vec, ll = ess_sample(state, lambda f: 0.0, rng, stats=stats)
    assert ll == 0.0
    assert stats.ess_evaluations == 1
    assert not np.allclose(vec, np.ones(3))


def test_ess_with_flat_likelihood_keeps_gp_prior_covariance():
    rng = np.random.default_rng(8)
    grid = np.arange(5.0)
    K = np.exp(-0.5 * (grid[:, None] - grid[None, :]) ** 2 / 1.5 ** 2) + 1e-6 * np.eye(5)
    chol = np.linalg.cholesky(K)
    vec = np.zeros(5)
    draws = np.empty((20_000, 5))
    for i in range(draws.shape[0]):
        vec, _ = ess_sample(EllipseState(vec, chol), lambda f: 0.0, rng)
        draws[i] = vec
    draws = draws[200:]
    assert np.allclose(draws.mean(axis=0), 0.0, atol=0.05)
    assert np.allclose(np.cov(draws, rowvar=False), K, atol=0.05)


def test_ellipse_state_checks_shape():
    with pytest.raises(ConfigError):
        EllipseState(np.zeros(3), np.eye(2))


def test_wishart_mean():
    rng = np.random.default_rng(4)
    scale = np.array([[2.0, 0.5], [0.5, 1.0]])
    draws = np.stack([sample_wishart(scale, 6.0, rng) for _ in range(4000)])
    assert np.allclose(draws.mean(axis=0), 6.0 * scale, rtol=0.08, atol=0.1)


def test_inverse_wishart_mean():
    rng = np.random.default_rng(5)
    draws = np.stack([sample_Ku(np.zeros((2, 0)), np.eye(2), 8.0, rng) for _ in range(4000)])
    # IW(I, 8) in two dimensions has mean I / 5
    assert np.allclose(draws.mean(axis=0), np.eye(2) / 5.0, atol=0.02)
    assert np.all(np.linalg.eigvalsh(draws[0]) > 0)


def test_inverse_wishart_rejects_small_df():
    with pytest.raises(ConfigError):
        sample_Ku(np.zeros((2, 1)), np.eye(2), 1.0, np.random.default_rng(0))


def test_categorical_posterior_normalizes_and_recovers_from_underflow():
    stats = SamplerStats()
    gauss = np.array([[-1.0, -2.0], [-np.inf, -np.inf]])
    log_prior = np.log(np.array([[0.5, 0.5], [0.25, 0.75]]))
    probs = categorical_posterior(gauss.copy(), log_prior, stats)
    assert np.allclose(probs.sum(axis=1), 1.0)
    assert probs[0, 0] == pytest.approx(np.e / (np.e + 1.0))
    assert np.allclose(probs[1], [0.25, 0.75])
    assert stats.choice_underflows == 1


def uniform_log_probs(table, T):
    logp = np.full((len(table.ods), table.k_max, T), -np.inf)
    mask = table.slot_mask()
    logp[mask] = -np.log(np.repeat(table.od_n_paths, table.k_max).reshape(mask.shape)[mask])[:, None]
    return logp


def test_path_choices_follow_travel_times(desk_net):
    table = desk_net.path_table
    multi = table.od_index[("S01", "S07")]
    single = table.od_index[("S01", "S03")]
    gauss = np.full((3, table.k_max), -np.inf)
    gauss[0, :2] = [0.0, -500.0]
    gauss[1, :2] = [-500.0, 0.0]
    gauss[2, 0] = 0.0
    terms = MixtureTerms(od=np.array([multi, multi, single]), t=np.array([0, 1, 0]), gauss=gauss)
    z = sample_path_choices(terms, uniform_log_probs(table, 2), table, np.random.default_rng(6))
    assert list(z) == [0, 1, 0]


def test_prior_choices_match_logit_shares(desk_net):
    table = desk_net.path_table
    i = table.od_index[("S01", "S07")]
    logp = uniform_log_probs(table, 1)
    logp[i, :2, 0] = np.log([0.8, 0.2])
    z = sample_prior_choices(np.full(5000, i), np.zeros(5000, dtype=int), logp, table,
                             np.random.default_rng(7))
    assert z.max() <= 1
    assert z.mean() == pytest.approx(0.2, abs=0.03)


def test_collapsed_likelihood_sums_over_paths(desk_net):
    table = desk_net.path_table
    T = 2
    x = np.tile(desk_net.nominal_costs, (T, 1))
    inv = np.asarray(table.invehicle @ x.T)
    trf = np.asarray(table.transfer @ x.T)
    means = np.asarray(table.routing @ x.T)
    variances = np.full_like(means, 400.0)
    od = np.array([table.od_index[("S01", "S07")], table.od_index[("S01", "S03")]])
    t = np.array([1, 0])
    y = np.array([1000.0, 360.0])
    terms = mixture_terms(od, t, y, means, variances, table)
    ct = ChoiceTensor(U=np.zeros((2, 1)), V=np.zeros((desk_net.n, 1)), W=np.zeros((T, 1)), q1=-0.2, q2=-0.4)
    model = CollapsedLikelihood(terms, inv, trf, table, 60.0)
    assert model.terms.size == 1

    theta, phi = reconstruct_coefficients(ct)
    logp = log_choice_probabilities(theta, phi, inv, trf, table, 60.0)
    expected = logsumexp(terms.gauss[0, :2] + logp[od[0], :2, 1])
    assert model(ct) == pytest.approx(expected)


def enumerated_posterior(net, od, t, y, x, means, variances, ct, unit):
    """Per-trip (log mixture density, path posterior) by summing over each path set"""
    table = net.path_table
    theta, phi = reconstruct_coefficients(ct)
    result = []
    for pair, ti, yi in zip(od, t, y):
        ps = net.path_sets[pair]
        s = net.station_index[pair[0]]
        prior = choice_probabilities(path_utilities(x[ti], ps, theta[s, ti], phi[s, ti], net, unit))
        rows = table.od_paths[table.od_index[pair], :len(ps)]
        joint = prior * norm.pdf(yi, means[rows, ti], np.sqrt(variances[rows, ti]))
        result.append((np.log(joint.sum()), joint / joint.sum()))
    return result


@pytest.fixture(scope="module")
def fan_trips(fan_net):
    table = fan_net.path_table
    pairs = [("O", "D"), ("D", "O"), ("O", "M")] * 4
    t = np.array([0, 1] * 6)
    rng = np.random.default_rng(9)
    x, means, variances, ct = fan_inputs(fan_net)
    slot = [int(rng.integers(0, len(fan_net.path_sets[p]))) for p in pairs]
    rows = np.array([table.od_paths[table.od_index[p], k] for p, k in zip(pairs, slot)])
    y = means[rows, t] + rng.normal(0, 15, len(pairs))
    return pairs, t, y


def test_collapsed_likelihood_matches_enumeration_over_four_paths(fan_net, fan_trips):
    table = fan_net.path_table
    assert len(fan_net.path_sets[("O", "D")]) == 4
    assert len(fan_net.path_sets[("O", "M")]) == 1
    pairs, t, y = fan_trips
    x, means, variances, ct = fan_inputs(fan_net)
    od = np.array([table.od_index[p] for p in pairs])
    terms = mixture_terms(od, t, y, means, variances, table)
    model = CollapsedLikelihood(terms, np.asarray(table.invehicle @ x.T), np.asarray(table.transfer @ x.T),
                                table, 60.0)
    assert model.terms.size == 8

    expected = sum(ll for (pair, (ll, _)) in
                   zip(pairs, enumerated_posterior(fan_net, pairs, t, y, x, means, variances, ct, 60.0))
                   if len(fan_net.path_sets[pair]) > 1)
    assert model(ct) == pytest.approx(expected, rel=1e-9)


def test_path_choice_frequencies_match_enumeration(fan_net):
    table = fan_net.path_table
    x, means, variances, ct = fan_inputs(fan_net)
    pair, ti = ("O", "D"), 1
    rows = table.od_paths[table.od_index[pair], :4]
    y = float(means[rows, ti].mean())
    [(_, exact)] = enumerated_posterior(fan_net, [pair], [ti], [y], x, means, variances, ct, 60.0)

    N = 10_000
    od = np.full(N, table.od_index[pair])
    t = np.full(N, ti)
    terms = mixture_terms(od, t, np.full(N, y), means, variances, table)
    theta, phi = reconstruct_coefficients(ct)
    logp = log_choice_probabilities(theta, phi, np.asarray(table.invehicle @ x.T),
                                    np.asarray(table.transfer @ x.T), table, 60.0)
    z = sample_path_choices(terms, logp, table, np.random.default_rng(10))
    assert np.allclose(np.bincount(z, minlength=4) / N, exact, atol=0.02)


def test_path_choices_do_not_depend_on_trip_order(fan_net, fan_trips):
    table = fan_net.path_table
    pairs, t, y = fan_trips
    x, means, variances, ct = fan_inputs(fan_net)
    theta, phi = reconstruct_coefficients(ct)
    inv, trf = np.asarray(table.invehicle @ x.T), np.asarray(table.transfer @ x.T)
    logp = log_choice_probabilities(theta, phi, inv, trf, table, 60.0)
    od = np.array([table.od_index[p] for p in pairs])
    perm = np.random.default_rng(11).permutation(len(pairs))

    terms = mixture_terms(od, t, y, means, variances, table)
    shuffled = mixture_terms(od[perm], t[perm], y[perm], means, variances, table)
    assert CollapsedLikelihood(shuffled, inv, trf, table, 60.0)(ct) == \
        pytest.approx(CollapsedLikelihood(terms, inv, trf, table, 60.0)(ct), rel=1e-12)
    probs = categorical_posterior(terms.gauss.copy(), logp[od, :, t])
    assert np.allclose(categorical_posterior(shuffled.gauss.copy(), logp[od[perm], :, t[perm]]), probs[perm])

    reps = 5000
    tiled = mixture_terms(np.tile(od, reps), np.tile(t, reps), np.tile(y, reps), means, variances, table)
    tiled_perm = mixture_terms(np.tile(od[perm], reps), np.tile(t[perm], reps), np.tile(y[perm], reps),
                               means, variances, table)
    z = sample_path_choices(tiled, logp, table, np.random.default_rng(12)).reshape(reps, len(pairs))
    z_perm = sample_path_choices(tiled_perm, logp, table, np.random.default_rng(13)).reshape(reps, len(pairs))
    freq = np.stack([np.bincount(z[:, i], minlength=table.k_max) for i in range(len(pairs))]) / reps
    freq_perm = np.stack([np.bincount(z_perm[:, i], minlength=table.k_max) for i in range(len(pairs))]) / reps
    assert np.allclose(freq_perm, freq[perm], atol=0.05)
    assert np.all(z[:, [i for i, p in enumerate(pairs) if p == ("O", "M")]] == 0)


def test_collapsed_likelihood_without_multi_path_trips(desk_net):
    table = desk_net.path_table
    stats = SamplerStats()
    gauss = np.zeros((2, table.k_max))
    od = np.full(2, table.od_index[("S01", "S03")])
    terms = MixtureTerms(od=od, t=np.zeros(2, dtype=int), gauss=gauss)
    model = CollapsedLikelihood(terms, np.zeros((table.n_paths, 1)), np.zeros((table.n_paths, 1)), table,
                                stats=stats)
    ct = ChoiceTensor(U=np.zeros((2, 1)), V=np.zeros((desk_net.n, 1)), W=np.zeros((1, 1)), q1=0.0, q2=0.0)
    assert model(ct) == 0.0
    assert model(ct) == 0.0
    assert stats.empty_choice_set == 1


def test_sampler_stats_merge():
    a = SamplerStats(slice_fallbacks=1, ess_evaluations=3)
    b = SamplerStats(slice_fallbacks=2, choice_underflows=1)
    merged = a.merge(b)
    assert merged.slice_fallbacks == 3
    assert merged.choice_underflows == 1
    assert merged.as_dict()["ess_evaluations"] == 3
