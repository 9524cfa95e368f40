import json

import numpy as np
import pytest

from bilevel_vvc.grid import (
    NetworkError, build_comm_graph, compute_x_matrix, ieee123, is_positive_definite, load_network,
    network_from_dict, network_to_dict, q_limits, tree_path,
)
from conftest import line_doc


def test_ieee33_shape(net33):
    assert net33.n_bus == 33 and net33.n_branch == 32
    assert len(net33.oltcs) == 1 and len(net33.capbanks) == 2
    assert net33.buses[net33.slack].id == 1
    assert net33.load_p.sum() == pytest.approx(0.3715, rel=1e-3)


def test_ieee33_groups(net33_groups):
    groups = {g: sorted(net33_groups.pv_units[k].bus for k in m) for g, m in net33_groups.pv_groups().items()}
    assert groups == {"A": [3, 4, 7, 8, 20], "B": [10, 14, 18], "C": [29, 30, 32, 33]}


def test_ieee123_loads():
    net = ieee123()
    assert net.n_bus == 56
    assert len(net.pv_units) > 0
    assert net.n_branch == net.n_bus - 1


def test_roundtrip_physical_and_pu(net33, tmp_path):
    for units in ("physical", "pu"):
        doc = network_to_dict(net33, units)
        back = network_from_dict(json.loads(json.dumps(doc)))
        np.testing.assert_allclose(back.r, net33.r, rtol=1e-12)
        np.testing.assert_allclose(back.x, net33.x, rtol=1e-12)
        np.testing.assert_allclose(back.load_p, net33.load_p, rtol=1e-12)
        assert back.device_state() == net33.device_state()
        assert [u.bus for u in back.pv_units] == [u.bus for u in net33.pv_units]
    path = tmp_path / "n.json"
    path.write_text(json.dumps(network_to_dict(net33)))
    assert load_network(path).n_bus == 33


@pytest.mark.parametrize("mutate, needle", [
    (lambda d: d["branches"].append({"from": 2, "to": 4, "r": 0.1, "x": 0.1}), "non-radial"),
    (lambda d: d["branches"].__setitem__(0, {"from": 1, "to": 9, "r": 0.1, "x": 0.1}), "unknown bus"),
    (lambda d: d["buses"].append({"id": 2}), "duplicate"),
    (lambda d: d["pv_units"].append({"bus": 1, "p_rating": 0.1}), "slack"),
    (lambda d: d.__setitem__("units", "furlongs"), "units"),
    (lambda d: d["branches"][1].__setitem__("r", -1.0), "r >= 0"),
    (lambda d: d.__setitem__("oltcs", [{"from": 3, "to": 1}]), "missing branch"),
])
def test_invalid_networks_name_the_problem(mutate, needle):
    doc = line_doc(4, pv_buses=(3,))
    mutate(doc)
    with pytest.raises(NetworkError, match=needle):
        network_from_dict(doc)


def test_missing_file_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_network(tmp_path / "nope.json")


def test_malformed_json_reports_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n "buses": [\n')
    with pytest.raises(NetworkError, match="line"):
        load_network(p)


def test_x_matrix_symmetric_pd_and_path_sum(net33):
    sm = compute_x_matrix(net33)
    X = sm.full
    assert np.array_equal(X, X.T)
    assert is_positive_definite(sm.gg)
    # diagonal entry is twice the reactance summed along the root path
    for k in (5, 17, 32):
        path = tree_path(net33, net33.slack, k)
        total = sum(net33.x[net33.parent_branch[b]] for b in path[1:])
        assert X[k, k] == pytest.approx(2 * total, rel=1e-12)


def test_x_matrix_shared_path():
    net = network_from_dict(line_doc(5, x=0.03))
    X = compute_x_matrix(net).full
    # buses 3 and 5 share branches 1-2 and 2-3
    assert X[2, 4] == pytest.approx(2 * 0.06)


def test_q_limits():
    net = network_from_dict(line_doc(3, pv_buses=(3,), pv_p=0.08, pv_s=0.1))
    u = net.pv_units[0]
    assert q_limits(u, 0.08) == pytest.approx((-0.06, 0.06))
    assert q_limits(u, 0.0) == pytest.approx((-0.1, 0.1))
    assert q_limits(u, 0.1) == pytest.approx((0.0, 0.0))
    with pytest.raises(ValueError):
        q_limits(u, 0.2)


def test_comm_graph_links_adjacent_pvs_only():
    net = network_from_dict(line_doc(6, pv_buses=(2, 4, 6)))
    assert build_comm_graph(net) == [(2, 4), (4, 6)]


def test_oltc_window_and_labels(device_net):
    o = device_net.oltcs[0]
    assert o.neutral == 3
    assert [o.label(p) for p in range(1, 6)] == [-2, -1, 0, 1, 2]
    assert list(o.window(1)) == [1, 2, 3]
    assert list(o.window(3)) == [1, 2, 3, 4, 5]
    assert o.ratio_sq(3) == 1.0
    with pytest.raises(ValueError):
        o.ratio_sq(6)


def test_with_groups_rejects_unknown(net33):
    with pytest.raises(NetworkError):
        net33.with_groups({"A": [3, 999]})
