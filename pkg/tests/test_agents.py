import numpy as np
import pytest

from bilevel_vvc.agents import (
    AgentError, Plant, RoundConfig, cost_gradient, equal_ratio_gradient, instant_qbar, loss_gradient,
    lower_objective, make_controller, run_consensus_equal_ratio, run_distributed, solve_group_qp,
    qp_kkt_residual, solve_lower_central, write_trajectory,
)
from bilevel_vvc.dispatcher import LowerObjectiveSpec
from bilevel_vvc.grid import compute_x_matrix, network_from_dict
from bilevel_vvc.powerflow import PfInput
from conftest import line_doc


def fd_grad(f, q, h=1e-6):
    g = np.zeros_like(q)
    for i in range(q.size):
        e = np.zeros_like(q)
        e[i] = h
        g[i] = (f(q + e) - f(q - e)) / (2 * h)
    return g


@pytest.fixture(scope="module")
def overvolt():
    net = network_from_dict(line_doc(5, r=0.04, x=0.08, load=0.005, pv_buses=(3, 5), pv_p=0.35, pv_s=0.45))
    return net, PfInput(pv_p=np.array([0.35, 0.35]))


@pytest.fixture(scope="module")
def undervolt():
    net = network_from_dict(line_doc(6, r=0.02, x=0.05, load=0.1, pv_buses=(3, 4, 6), pv_p=0.03, pv_s=0.05))
    return net, PfInput(pv_p=np.array([0.03, 0.0, 0.02]))


def test_cost_gradient_fd(net33, rng):
    a = np.array([u.cost_a for u in net33.pv_units])
    b = np.array([u.cost_b for u in net33.pv_units])
    f = lambda q: float(np.sum(a**2 * q**2 + b * q))
    q = rng.uniform(-0.02, 0.02, len(net33.pv_units))
    np.testing.assert_allclose(cost_gradient(net33, q), fd_grad(f, q), rtol=1e-5, atol=1e-10)


def test_loss_gradient_fd(net33, rng):
    X = compute_x_matrix(net33).gg
    f = lambda q: float(q @ X @ q)
    q = rng.uniform(-0.02, 0.02, len(net33.pv_units))
    np.testing.assert_allclose(loss_gradient(net33, q), fd_grad(f, q), rtol=1e-5, atol=1e-10)


def test_equal_ratio_gradient_fd(net33, rng):
    npv = len(net33.pv_units)
    qbar = rng.uniform(0.01, 0.05, npv)
    X = compute_x_matrix(net33).full
    pos = net33.pv_bus_pos
    lead = npv - 1
    f = lambda q: float(np.sum(X[pos[lead], pos] * q**2 / (2 * qbar)))
    q = rng.uniform(-0.01, 0.01, npv)
    np.testing.assert_allclose(equal_ratio_gradient(net33, q, qbar, lead), fd_grad(f, q), rtol=1e-5, atol=1e-10)


def test_lower_objective_matches_weighted_sum(net33, rng):
    npv = len(net33.pv_units)
    qbar = np.full(npv, 0.05)
    q = rng.uniform(-0.02, 0.02, npv)
    a = np.array([u.cost_a for u in net33.pv_units])
    b = np.array([u.cost_b for u in net33.pv_units])
    X = compute_x_matrix(net33).gg
    expect = 2.0 * float(np.sum(a**2 * q**2 + b * q)) + 0.5 * float(q @ X @ q)
    spec = LowerObjectiveSpec(weights=(2.0, 0.5))
    assert lower_objective(net33, spec, q, qbar) == pytest.approx(expect, rel=1e-12)


def test_group_qp_kkt(rng):
    H = np.array([[2.0, 0.3], [0.3, 1.0]])
    g = np.array([-1.0, 0.5])
    S = np.array([[0.1, 0.05]])
    args = (H, g, S, np.array([1.0]), np.zeros(2), np.array([0.9]), np.array([1.01]), np.array([0.5, 0.5]))
    res = solve_group_qp(*args)
    assert res.feasible
    assert qp_kkt_residual(*args, res) <= 1e-9
    assert res.lam_hi[0] > 0            # unconstrained optimum would push v above 1.01


def test_central_fixed_point(overvolt):
    net, inp = overvolt
    low = solve_lower_central(net, inp)
    assert low.converged and low.feasible
    assert np.sqrt(low.v_sq).max() <= 1.05 + 1e-9
    assert low.kkt_residual <= 1e-8
    assert np.all(np.abs(low.q) <= instant_qbar(net, inp.pv_p) + 1e-12)


def test_distributed_matches_central_overvoltage(overvolt):
    net, inp = overvolt
    central = solve_lower_central(net, inp)
    res = run_distributed(net, Plant(net, inp), None, RoundConfig(tol=1e-7))
    assert res.converged
    np.testing.assert_allclose(res.q, central.q, atol=1e-5)
    assert res.lam_hi.max() > 0


def test_outputs_stay_in_boxes(overvolt):
    net, inp = overvolt
    res = run_distributed(net, Plant(net, inp), None, RoundConfig(beta=1.0, max_rounds=60))
    qbar = instant_qbar(net, inp.pv_p)
    for rec in res.trajectory:
        assert np.all(np.abs(rec.q) <= qbar + 1e-12)


def test_deterministic(overvolt):
    net, inp = overvolt
    cfg = RoundConfig(noise=1e-4, seed=3, max_rounds=40)
    a = run_distributed(net, Plant(net, inp), None, cfg)
    b = run_distributed(net, Plant(net, inp), None, cfg)
    np.testing.assert_array_equal(a.q, b.q)
    assert a.rounds == b.rounds


def test_delay_still_converges(overvolt):
    net, inp = overvolt
    central = solve_lower_central(net, inp)
    res = run_distributed(net, Plant(net, inp), None, RoundConfig(delay=2, tol=1e-7))
    assert res.converged
    np.testing.assert_allclose(res.q, central.q, atol=1e-4)


def test_equal_ratio_consensus(undervolt):
    net, inp = undervolt
    res = run_consensus_equal_ratio(net, Plant(net, inp), 6)
    u = res.ratios()
    assert res.converged
    assert u.max() - u.min() <= 1e-5
    assert 0 < u[0] < 1
    assert np.sqrt(res.pf.v_sq).min() >= 0.95 - 1e-6
    central = solve_lower_central(net, inp, LowerObjectiveSpec(kind="equal_ratio", leader=6))
    np.testing.assert_allclose(res.q, central.q, atol=1e-5)


def test_equal_ratio_saturation():
    net = network_from_dict(line_doc(6, r=0.02, x=0.05, load=0.16, pv_buses=(3, 4, 6), pv_p=0.03, pv_s=0.05))
    inp = PfInput(pv_p=np.array([0.03, 0.0, 0.02]))
    res = run_consensus_equal_ratio(net, Plant(net, inp), 6, RoundConfig(ratio_tol=1e-13))
    np.testing.assert_allclose(res.ratios(), 1.0, atol=1e-9)
    assert res.ratios()[2] == 1.0                    # the leader clips exactly


def test_unreachable_band_aborts():
    # the load is far beyond what the inverters can compensate, so the multipliers grow without bound
    net = network_from_dict(line_doc(6, r=0.02, x=0.05, load=0.3, pv_buses=(3, 6), pv_p=0.01, pv_s=0.02))
    inp = PfInput(pv_p=np.array([0.01, 0.01]))
    ctl = make_controller(net, LowerObjectiveSpec(), RoundConfig(alpha=50.0), instant_qbar(net, inp.pv_p))
    with pytest.raises(AgentError, match="alpha"):
        ctl.run(Plant(net, inp), rounds=400, stop_on_convergence=False)


def test_single_inverter_overvoltage_settles_on_limit():
    net = network_from_dict(line_doc(2, r=0.1, x=0.2, load=0.0, pv_buses=(2,), pv_p=0.6, pv_s=0.8))
    inp = PfInput(pv_p=np.array([0.6]))
    assert Plant(net, inp)(np.zeros(1)).v_sq[1] > 1.05**2
    res = run_distributed(net, Plant(net, inp), LowerObjectiveSpec(kind="cost"), RoundConfig(tol=1e-8))
    assert res.converged
    assert res.q[0] < 0 and res.lam_hi[0] > 0
    assert res.pf.v_sq[1] == pytest.approx(1.05**2, abs=1e-6)


def test_make_controller_kinds(undervolt):
    net, inp = undervolt
    qbar = instant_qbar(net, inp.pv_p)
    assert type(make_controller(net, LowerObjectiveSpec(), RoundConfig(), qbar)).__name__ == "PrimalDualController"
    er = LowerObjectiveSpec(kind="equal_ratio", leader=6)
    assert type(make_controller(net, er, RoundConfig(), qbar)).__name__ == "ConsensusController"


def test_round_config_validation():
    with pytest.raises(ValueError):
        RoundConfig(alpha=0)
    with pytest.raises(ValueError):
        RoundConfig(delay=-1)
    cfg = RoundConfig(alpha=3.0)
    assert RoundConfig.from_dict(cfg.to_dict()) == cfg


def test_trajectory_csv(overvolt, tmp_path):
    net, inp = overvolt
    res = run_distributed(net, Plant(net, inp), None, RoundConfig(max_rounds=5))
    path = tmp_path / "traj.csv"
    write_trajectory(res, path, [u.bus for u in net.pv_units])
    rows = path.read_text().splitlines()
    assert len(rows) == res.rounds + 1
    assert rows[0].startswith("round,time,q[3],q[5]")
