import json

import numpy as np
import pytest

from bilevel_vvc.agents import solve_lower_central
from bilevel_vvc.dispatcher import (
    DispatchDecision, DispatchError, LowerObjectiveSpec, PeriodForecast, box_optimum, build_single_level,
    decision_json, device_tuples, dispatch, dispatch_model1, dispatch_model2, dispatch_period,
    enumerate_bilevel, follower_models, kkt_block_residual,
)
from bilevel_vvc.grid import network_from_dict
from conftest import line_doc


@pytest.fixture(scope="module")
def overvolt_net():
    """Light load, strong PV at the feeder end: the follower must absorb to stay under 1.05."""
    return network_from_dict(line_doc(5, r=0.04, x=0.08, load=0.005, pv_buses=(3, 5),
                                      pv_p=0.35, pv_s=0.45, caps=(4,)))


@pytest.fixture(scope="module")
def small_net():
    return network_from_dict(line_doc(5, pv_buses=(3, 5), oltc=True, caps=(4,)))


@pytest.mark.parametrize("load, pv", [(1.0, 1.0), (2.0, 0.2)])
def test_bilevel_matches_oracle(small_net, load, pv):
    fc = PeriodForecast.nominal(small_net, load, pv)
    dec = dispatch_period(small_net, fc)
    ref = enumerate_bilevel(small_net, fc)
    assert dec.status == "optimal"
    assert (dec.taps, dec.cb_units) == (ref.taps, ref.cb_units)
    assert dec.objective == pytest.approx(ref.objective, rel=1e-6)
    np.testing.assert_allclose(dec.q_g, ref.q_g, atol=1e-6)
    assert dec.eps <= 1e-6


def test_binding_follower_voltage(overvolt_net):
    fc = PeriodForecast.nominal(overvolt_net, 1.0, 1.0)
    dec = dispatch_period(overvolt_net, fc)
    ref = enumerate_bilevel(overvolt_net, fc)
    assert dec.objective == pytest.approx(ref.objective, rel=1e-6)
    np.testing.assert_allclose(dec.q_g, ref.q_g, atol=1e-6)
    assert np.all(dec.q_g < 0)                      # absorbing
    assert dec.lam_hi[5] > 0                         # end-of-feeder limit is active
    assert np.sqrt(dec.v_sq).max() <= 1.05 + 1e-6
    assert kkt_block_residual(overvolt_net, fc, dec) <= 1e-6
    low = solve_lower_central(overvolt_net, fc.instant(dec.taps, dec.cb_units))
    np.testing.assert_allclose(dec.q_g, low.q, atol=1e-6)


def test_movement_limits_respected(small_net):
    fc = PeriodForecast(load_p=small_net.load_p * 2.0, load_q=small_net.load_q * 2.0,
                        pv_p=np.zeros(2), prev_taps=(1,), prev_cb=(0,))
    dec = dispatch_period(small_net, fc)
    assert abs(dec.taps[0] - 1) <= small_net.oltcs[0].max_move
    assert abs(dec.cb_units[0]) <= small_net.capbanks[0].max_move


def test_baselines(small_net):
    fc = PeriodForecast.nominal(small_net, 1.0, 1.0)
    m1 = dispatch_model1(small_net, fc)
    m2 = dispatch_model2(small_net, fc)
    bi = dispatch_period(small_net, fc)
    np.testing.assert_array_equal(m2.q_g, 0.0)
    # model1 optimises q freely, so its predicted loss is a lower bound on the bilevel one
    assert m1.objective <= bi.objective + 1e-9
    with pytest.raises(ValueError):
        dispatch(small_net, fc, "model3")


def test_box_optimum_is_unconstrained_minimiser(small_net):
    spec = LowerObjectiveSpec(kind="weighted", weights=(1.0, 0.5))
    net = small_net.with_pv_units([u.__class__(**{**u.__dict__, "cost_b": -0.3}) for u in small_net.pv_units])
    qbar = np.array([0.05, 0.05])
    for fm in follower_models(net, spec, qbar):
        q = box_optimum(fm, qbar)
        assert np.all(np.abs(q) <= qbar[list(fm.members)] + 1e-12)
        g = fm.grad(q)
        # projected gradient vanishes
        inner = np.abs(q) < qbar[list(fm.members)] - 1e-9
        np.testing.assert_allclose(g[inner], 0.0, atol=1e-9)
        assert np.all(g[q >= qbar[list(fm.members)] - 1e-9] <= 1e-9)


def test_follower_hessian_positive_definite(net33):
    qbar = np.full(len(net33.pv_units), 0.02)
    for kind in ("cost", "loss", "weighted"):
        for fm in follower_models(net33, LowerObjectiveSpec(kind=kind), qbar):
            assert np.linalg.eigvalsh(fm.hess).min() > 0


def test_program_has_cones_and_binaries(small_net):
    prog = build_single_level(small_net, PeriodForecast.nominal(small_net, 1.0, 0.5))
    assert len(prog.cones) == small_net.n_branch
    assert prog.binary.size > 0
    assert "w[oltc0,3]" in prog.names


def test_forecast_validation(small_net):
    fc = PeriodForecast(load_p=np.zeros(3), load_q=np.zeros(5), pv_p=np.zeros(2), prev_taps=(3,), prev_cb=(0,))
    with pytest.raises(ValueError):
        fc.validate(small_net)
    bad = PeriodForecast.nominal(small_net)
    bad = PeriodForecast(bad.load_p, bad.load_q, bad.pv_p, prev_taps=(9,), prev_cb=(0,))
    with pytest.raises(DispatchError):
        bad.validate(small_net)


def test_device_tuples(small_net):
    fc = PeriodForecast.nominal(small_net)
    tuples = device_tuples(small_net, fc)
    assert len(tuples) == 5 * 2


def test_spec_validation(net33_groups):
    with pytest.raises(ValueError):
        LowerObjectiveSpec(kind="magic")
    with pytest.raises(ValueError):
        LowerObjectiveSpec(weights=(0.0, 0.0))
    with pytest.raises(DispatchError):
        LowerObjectiveSpec(kind="equal_ratio").leaders(net33_groups)
    with pytest.raises(DispatchError):
        LowerObjectiveSpec(kind="equal_ratio", leader=18).leaders(net33_groups)
    leads = LowerObjectiveSpec(kind="equal_ratio", leader={"A": 8, "B": 18, "C": 33}).leaders(net33_groups)
    assert set(leads) == {"A", "B", "C"}


def test_decision_roundtrip(small_net):
    dec = dispatch_period(small_net, PeriodForecast.nominal(small_net, 1.0, 0.5))
    doc = json.loads(decision_json(dec, small_net))
    assert doc["tap_labels"] == [dec.taps[0] - 3]
    back = DispatchDecision.from_dict(doc)
    assert back.taps == dec.taps and back.objective == dec.objective
    np.testing.assert_array_equal(back.q_g, dec.q_g)


def test_forecast_roundtrip(small_net):
    fc = PeriodForecast.nominal(small_net, 0.7, 0.4, period=5)
    back = PeriodForecast.from_dict(json.loads(json.dumps(fc.to_dict())))
    assert back.period == 5
    np.testing.assert_array_equal(back.pv_p, fc.pv_p)
