import json

import numpy as np
import pytest

from bilevel_vvc.grid import network_from_dict, network_to_dict
from bilevel_vvc.harness import (
    LOAD_ERROR, PV_ERROR, HarnessConfig, Scenario, ScenarioTimeline, compare_report, load_shape,
    make_profiles, run_closed_loop, run_scenario, solar_shape,
)
from conftest import line_doc


@pytest.fixture(scope="module")
def small():
    return network_from_dict(line_doc(5, pv_buses=(3, 5), oltc=True, caps=(4,)))


@pytest.fixture(scope="module")
def short_timeline(small):
    return make_profiles(small, seed=3, horizon=3, steps_per_period=4)


def test_profiles_deterministic(net33):
    a, b = make_profiles(net33, 11), make_profiles(net33, 11)
    assert a.fingerprint() == b.fingerprint()
    np.testing.assert_array_equal(a.pv_p, b.pv_p)
    assert make_profiles(net33, 12).fingerprint() != a.fingerprint()


def test_night_has_no_pv(net33):
    tl = make_profiles(net33, 7)
    hours = np.arange(tl.n_steps) * 24.0 / tl.n_steps
    night = (hours < 6) | (hours > 20)
    assert np.all(tl.pv_p[night] == 0.0)
    assert np.all(tl.fc_pv_p[:6] == 0.0)
    assert tl.pv_p[(hours > 12) & (hours < 14)].mean() > 0.5 * np.mean([u.p_rating for u in net33.pv_units])


def test_forecast_error_bounded(net33):
    tl = make_profiles(net33, 7)
    S = tl.steps_per_period
    true_load = tl.load_p.reshape(tl.horizon, S, -1).mean(axis=1)
    true_pv = tl.pv_p.reshape(tl.horizon, S, -1).mean(axis=1)
    mask = true_load > 0
    assert np.all(np.abs(tl.fc_load_p[mask] / true_load[mask] - 1) <= LOAD_ERROR + 1e-12)
    day = true_pv > 1e-9
    assert np.all(tl.fc_pv_p[day] / true_pv[day] - 1 <= PV_ERROR + 1e-12)
    assert np.all(tl.fc_pv_p[day] / true_pv[day] - 1 >= -PV_ERROR - 1e-12)
    assert np.all(tl.fc_pv_p <= np.array([u.s_rating for u in net33.pv_units]) + 1e-15)


def test_shapes():
    h = np.linspace(0, 24, 97)
    assert solar_shape(np.array([13.0]))[0] == pytest.approx(1.0)
    assert solar_shape(np.array([5.0, 21.0])).tolist() == [0.0, 0.0]
    assert np.all(solar_shape(h) >= 0) and np.all(solar_shape(h) <= 1)
    assert h[np.argmax(load_shape(h))] == pytest.approx(19.5, abs=0.5)


def test_csv_shape(small, tmp_path):
    p = tmp_path / "prof.csv"
    rows = ["load,pv"] + [f"{0.5 + 0.01 * k},{0.1 * (k % 3)}" for k in range(6)]
    p.write_text("\n".join(rows))
    tl = make_profiles(small, shape="csv", csv_path=p, horizon=2, steps_per_period=3)
    np.testing.assert_allclose(tl.load_p[0], small.load_p * 0.5)
    p.write_text("\n".join(rows[:4]))
    with pytest.raises(ValueError, match="rows"):
        make_profiles(small, shape="csv", csv_path=p, horizon=2, steps_per_period=3)


def test_timeline_shape_checked(small):
    with pytest.raises(ValueError):
        ScenarioTimeline(2, 3, np.zeros((5, 5)), np.zeros((6, 5)), np.zeros((6, 2)),
                         np.zeros((2, 5)), np.zeros((2, 5)), np.zeros((2, 2)), 0)


def test_closed_loop_runs_every_mode(small, short_timeline):
    runs = {m: run_closed_loop(small, short_timeline, m) for m in ("bilevel", "model1", "model2", "no-control")}
    for m, r in runs.items():
        assert len(r.period_loss_kw) == 3
        assert r.avg_loss_kw > 0
        assert r.timeline == short_timeline.fingerprint()
    nc = runs["no-control"]
    assert all(e["taps"] == [3] and e["cb_units"] == [0] for e in nc.schedule)
    assert all(np.all(np.asarray(t["q"]) == 0.0) for t in nc.trace)
    for r in runs.values():
        for a, b in zip(r.schedule, r.schedule[1:]):
            assert abs(a["taps"][0] - b["taps"][0]) <= 2
            assert abs(a["cb_units"][0] - b["cb_units"][0]) <= 1


def test_closed_loop_deterministic(small, short_timeline):
    a = run_closed_loop(small, short_timeline, "bilevel")
    b = run_closed_loop(small, short_timeline, "bilevel")
    assert a.period_loss_kw == b.period_loss_kw
    assert a.schedule == b.schedule


def test_full_rate_inner_rounds():
    assert HarnessConfig(full_rate=True).inner_rounds == 120
    assert HarnessConfig().inner_rounds == 2
    with pytest.raises(ValueError):
        HarnessConfig(rounds_per_step=0)


def test_unknown_mode(small, short_timeline):
    with pytest.raises(ValueError):
        run_closed_loop(small, short_timeline, "model9")


def test_compare_report(small, short_timeline, tmp_path):
    a = run_closed_loop(small, short_timeline, "no-control")
    b = run_closed_loop(small, short_timeline, "model2")
    table = compare_report([a, b], tmp_path / "cmp")
    assert table["columns"] == ["no-control", "model2"]
    assert (tmp_path / "cmp.csv").exists() and (tmp_path / "cmp.json").exists()
    with pytest.raises(ValueError, match="two"):
        compare_report([a])
    other = run_closed_loop(small, make_profiles(small, seed=4, horizon=3, steps_per_period=4), "no-control")
    with pytest.raises(ValueError, match="timelines"):
        compare_report([a, other])


def test_scenario_file(small, tmp_path):
    (tmp_path / "net.json").write_text(json.dumps(network_to_dict(small)))
    doc = {"network": "net.json", "seed": 2, "horizon": 2, "modes": ["no-control", "model1"]}
    (tmp_path / "sc.json").write_text(json.dumps(doc))
    sc = Scenario.load(tmp_path / "sc.json")
    assert sc.network == str((tmp_path / "net.json").resolve())
    with pytest.raises(ValueError):
        Scenario.from_dict({**doc, "modes": ["bogus"]})
    assert Scenario.from_dict({**doc, "modes": "all"}).modes == ("bilevel", "model1", "model2", "no-control")
    runs = run_scenario(sc, tmp_path / "out")
    assert set(runs) == {"no-control", "model1"}
    for name in ("metrics_model1.json", "periods_no-control.csv", "plot_model1.csv", "comparison.csv"):
        assert (tmp_path / "out" / name).exists()
