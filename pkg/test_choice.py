"""
CP-structured logit coefficients and choice probabilities
"""
import numpy as np
import pytest

from choice import (ChoiceTensor, apply_variant, choice_probabilities, log_choice_probabilities, path_utilities,
                    reconstruct_coefficients, unfold_mode1)
from errors import ConfigError, SamplerError


@pytest.fixture
def tensor():
    rng = np.random.default_rng(3)
    return ChoiceTensor(U=rng.normal(size=(2, 3)), V=rng.normal(size=(5, 3)), W=rng.normal(size=(4, 3)),
                        q1=-0.2, q2=-0.4)


def test_reconstruction_matches_cp_sum(tensor):
    theta, phi = reconstruct_coefficients(tensor)
    expected_theta = tensor.q1 + np.einsum("r,or,tr->ot", tensor.U[0], tensor.V, tensor.W)
    expected_phi = tensor.q2 + np.einsum("r,or,tr->ot", tensor.U[1], tensor.V, tensor.W)
    assert theta.shape == (5, 4)
    assert np.allclose(theta, expected_theta)
    assert np.allclose(phi, expected_phi)


def test_mode1_unfolding_agrees_with_slices(tensor):
    theta, phi = reconstruct_coefficients(tensor)
    F1 = unfold_mode1(tensor)
    assert F1.shape == (2, 20)
    assert np.allclose(F1[0].reshape((5, 4), order="F"), theta)
    assert np.allclose(F1[1].reshape((5, 4), order="F"), phi)


def test_rank_zero_is_baseline():
    ct = ChoiceTensor(U=np.zeros((2, 0)), V=np.zeros((3, 0)), W=np.zeros((2, 0)), q1=0.5, q2=-1.0)
    theta, phi = reconstruct_coefficients(ct)
    assert np.all(theta == 0.5) and np.all(phi == -1.0)


def test_dimension_mismatch(tensor):
    bad = ChoiceTensor(U=tensor.U, V=tensor.V[:, :2], W=tensor.W, q1=0.0, q2=0.0)
    with pytest.raises(ConfigError, match="dimension mismatch"):
        reconstruct_coefficients(bad)


def test_static_variant_is_constant(tensor):
    theta, phi = reconstruct_coefficients(apply_variant(tensor, "static"))
    assert np.all(theta == tensor.q1)
    assert np.all(phi == tensor.q2)


def test_spatial_variant_is_constant_in_time(tensor):
    theta, _ = reconstruct_coefficients(apply_variant(tensor, "spatial"))
    assert np.allclose(theta, theta[:, :1])
    assert not np.allclose(theta, theta[:1, :])


def test_temporal_variant_is_constant_across_stations(tensor):
    theta, _ = reconstruct_coefficients(apply_variant(tensor, "temporal"))
    assert np.allclose(theta, theta[:1, :])


def test_unknown_variant(tensor):
    with pytest.raises(ConfigError):
        apply_variant(tensor, "seasonal")


def test_probabilities_are_stable_for_large_utilities():
    p = choice_probabilities([1000.0, 1000.0, -1000.0])
    assert p.sum() == pytest.approx(1.0)
    assert p[0] == pytest.approx(0.5)
    assert p[2] == pytest.approx(0.0)


def test_probabilities_reject_empty_and_nan():
    with pytest.raises(ConfigError):
        choice_probabilities([])
    with pytest.raises(SamplerError):
        choice_probabilities([0.0, np.nan])


def test_path_utilities_use_invehicle_and_transfer_only(desk_net):
    paths = desk_net.path_sets[("S01", "S07")]
    u = path_utilities(desk_net.nominal_costs, paths, -0.2, -0.4, desk_net, time_unit_s=60.0)
    # direct: 6 rides; detour: 6 rides and 2 transfers of 3 minutes
    assert u == pytest.approx([-0.2 * 12, -0.2 * 12 - 0.4 * 6])


def test_path_utilities_in_raw_seconds(desk_net):
    paths = desk_net.path_sets[("S01", "S07")]
    u = path_utilities(desk_net.nominal_costs, paths, -0.2, -0.4, desk_net)
    assert u == pytest.approx([-0.2 * 720, -0.2 * 720 - 0.4 * 360])


def test_path_utilities_check_cost_length(desk_net):
    with pytest.raises(ConfigError):
        path_utilities(np.ones(3), desk_net.path_sets[("S01", "S07")], 0.0, 0.0, desk_net)


def test_log_probabilities_for_all_pairs(desk_net):
    table = desk_net.path_table
    T = 3
    x = np.tile(desk_net.nominal_costs, (T, 1))
    inv = np.asarray(table.invehicle @ x.T)
    trf = np.asarray(table.transfer @ x.T)
    theta = np.full((desk_net.n, T), -0.2)
    phi = np.full((desk_net.n, T), -0.4)
    logp = log_choice_probabilities(theta, phi, inv, trf, table, 60.0)
    assert logp.shape == (len(table.ods), table.k_max, T)
    assert np.all(np.isneginf(logp[~table.slot_mask()]))
    assert np.allclose(np.exp(logp).sum(axis=1), 1.0)

    i = table.od_index[("S01", "S07")]
    u = path_utilities(x[0], desk_net.path_sets[("S01", "S07")], -0.2, -0.4, desk_net, 60.0)
    assert np.allclose(np.exp(logp[i, :2, 0]), choice_probabilities(u))
