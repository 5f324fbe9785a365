"""
Network model, path sets and routing rows
"""
import numpy as np
import pytest

import network
from errors import NetworkError
from network import (build_network, enumerate_paths, load_network, make_path, routing_row, save_network,
                     validate_path, with_enumerated_paths)
from simulate import desk_network_spec


def two_line_spec(**updates):
    spec = desk_network_spec().model_dump(by_alias=True)
    spec.update(updates)
    return spec


def test_desk_dimensions(desk_net):
    assert (desk_net.n, desk_net.l, desk_net.s) == (12, 24, 4)
    assert desk_net.c == 2 * 24 + 4 + 12
    imap = desk_net.index_map
    assert imap.block("access") == slice(0, 24)
    assert imap.block("invehicle") == slice(24, 48)
    assert imap.block("transfer") == slice(48, 52)
    assert imap.block("egress") == slice(52, 64)
    assert imap.element(imap.position("transfer", "X:S02:A-B")) == ("transfer", "X:S02:A-B")


def test_routing_row_marks_access_links_and_egress(desk_net):
    path = make_path(desk_net, "S01", "S03", ["A:S01-S02", "A:S02-S03"])
    row = routing_row(path, desk_net)
    imap = desk_net.index_map
    assert len(row) == 4
    assert imap.position("access", "A:S01-S02") in row.cols
    assert imap.position("egress", "S03") in row.cols
    assert row.dot(desk_net.nominal_costs) == pytest.approx(60 + 120 + 120 + 60)
    assert row.to_dense().sum() == 4


def test_enumeration_keeps_detours_within_cap(desk_net):
    ps = desk_net.path_sets[("S01", "S07")]
    assert len(ps) == 2
    assert all(e.startswith("A:") for e in ps.paths[0].elements)
    assert ps.paths[1].transfers == ("X:S02:A-B", "X:S06:B-A")
    assert desk_net.path_length(ps.paths[1]) == pytest.approx(1.5 * desk_net.path_length(ps.paths[0]))


def test_enumeration_breaks_ties_by_link_ids(desk_net):
    ps = desk_net.path_sets[("S02", "S06")]
    assert len(ps) == 2
    assert ps.paths[0].elements[0] == "A:S02-S03"
    assert ps.paths[1].elements[0] == "B:S02-S09"


def test_single_path_pair(desk_net):
    ps = desk_net.path_sets[("S01", "S03")]
    assert len(ps) == 1
    assert not ps.choice_relevant


def test_k_max_truncates(desk_net):
    ps = enumerate_paths(desk_net, ("S02", "S06"), k_max=1)
    assert len(ps) == 1


def test_enumeration_stops_once_k_max_paths_are_kept(desk_net, monkeypatch):
    original = network.nx.shortest_simple_paths
    yielded = []

    def counting(*args, **kwargs):
        for nodes in original(*args, **kwargs):
            yielded.append(nodes)
            yield nodes

    monkeypatch.setattr(network.nx, "shortest_simple_paths", counting)
    ps = enumerate_paths(desk_net, ("S01", "S07"), k_max=1, detour_cap=10.0)
    assert len(ps) == 1
    assert all(e.startswith("A:") for e in ps.paths[0].elements)
    # the shortest path plus the first strictly longer one
    assert len(yielded) == 2


def test_validate_path_rejects_line_change_without_transfer(desk_net):
    path = make_path(desk_net, "S01", "S09", ["A:S01-S02", "B:S02-S09"])
    problems = validate_path(desk_net, path)
    assert any("without a transfer" in p for p in problems)


def test_validate_path_rejects_wrong_destination(desk_net):
    path = make_path(desk_net, "S01", "S04", ["A:S01-S02", "A:S02-S03"])
    assert any("expected 'S04'" in p for p in validate_path(desk_net, path))


def test_unknown_station_in_link():
    spec = two_line_spec()
    spec["invehicle_links"][0]["to"] = "S99"
    with pytest.raises(NetworkError) as exc:
        build_network(spec)
    assert any("S99" in d for d in exc.value.details)


def test_duplicate_ids():
    spec = two_line_spec()
    spec["stations"].append({"id": "S01", "name": "again"})
    with pytest.raises(NetworkError):
        build_network(spec)


def test_disconnected_pair_has_no_paths():
    spec = {
        "stations": [{"id": s} for s in ("P1", "P2", "Q1", "Q2")],
        "invehicle_links": [
            {"id": "P:1-2", "from": "P1", "to": "P2", "line": "P"},
            {"id": "P:2-1", "from": "P2", "to": "P1", "line": "P"},
            {"id": "Q:1-2", "from": "Q1", "to": "Q2", "line": "Q"},
            {"id": "Q:2-1", "from": "Q2", "to": "Q1", "line": "Q"},
        ],
    }
    net = build_network(spec)
    with pytest.raises(NetworkError, match="disconnected"):
        enumerate_paths(net, ("P1", "Q2"))


def test_path_table_layout(desk_net):
    table = desk_net.path_table
    assert table.n_paths == sum(len(ps) for ps in desk_net.path_sets.values())
    assert np.all((table.od_paths >= 0).sum(axis=1) == table.od_n_paths)
    for p, path in enumerate(table.paths):
        assert table.ods[table.path_od[p]] == path.od
        assert table.od_paths[table.path_od[p], table.path_slot[p]] == p
    total = sum(table.routing_blocks)
    assert np.allclose(total.toarray(), table.routing.toarray())
    assert table.link_incidence.shape == (table.n_paths, desk_net.l)
    assert table.transfer_incidence.shape == (table.n_paths, desk_net.s)


def test_save_and_load_keep_hash(desk_net, tmp_path):
    target = tmp_path / "network.json"
    save_network(desk_net, str(target))
    again = load_network(str(target))
    assert again.network_hash == desk_net.network_hash
    assert again.ods == desk_net.ods


def test_path_sets_from_file_are_validated():
    spec = two_line_spec(paths=[{"origin": "S01", "destination": "S03", "links": ["A:S01-S02", "B:S02-S09"]}])
    with pytest.raises(NetworkError, match="Invalid path definitions"):
        build_network(spec)


def test_enumerate_subset_of_pairs():
    net = with_enumerated_paths(build_network(two_line_spec()), ods=[("S01", "S07"), ("S08", "S12")])
    assert net.ods == [("S01", "S07"), ("S08", "S12")]
    assert len(net.path_table.multi_path_ods) == 2
