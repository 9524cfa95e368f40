import numpy as np
import pytest
from scipy.optimize import fsolve

from bilevel_vvc.grid import network_from_dict
from bilevel_vvc.powerflow import (
    PfInput, distflow_residual, relaxation_gap, slack_injection, solve_pf, voltage_violation,
)
from conftest import line_doc


def ac_voltages(net, p_net, q_net, v0=1.0):
    """Complex bus-injection power flow by Newton (fsolve) on real/imag parts; returns |V|^2."""
    n = net.n_bus
    Y = np.zeros((n, n), complex)
    for e in range(net.n_branch):
        f, t = net.branch_from[e], net.branch_to[e]
        y = 1.0 / complex(net.r[e], net.x[e])
        Y[f, f] += y
        Y[t, t] += y
        Y[f, t] -= y
        Y[t, f] -= y
    others = [k for k in range(n) if k != net.slack]
    S = -(p_net + 1j * q_net)

    def resid(xv):
        V = np.full(n, v0, complex)
        V[others] = xv[: len(others)] + 1j * xv[len(others):]
        mis = V * np.conj(Y @ V) - S
        return np.r_[mis[others].real, mis[others].imag]

    x0 = np.r_[np.full(len(others), v0), np.zeros(len(others))]
    sol = fsolve(resid, x0, xtol=1e-14)
    V = np.full(n, v0, complex)
    V[others] = sol[: len(others)] + 1j * sol[len(others):]
    assert np.abs(resid(sol)).max() < 1e-10
    return np.abs(V) ** 2


def test_matches_ac_newton_on_33_bus(net33):
    pf = solve_pf(net33, PfInput(taps=[9], cb_units=[0, 0]))
    assert pf.converged
    v_ref = ac_voltages(net33, net33.load_p, net33.load_q)
    np.testing.assert_allclose(pf.v_sq, v_ref, atol=1e-8)


def test_matches_ac_newton_with_pv(line_net):
    pv_q = np.array([0.01, -0.02])
    pf = solve_pf(line_net, PfInput(pv_p=np.array([0.04, 0.03]), pv_q=pv_q))
    p_net, q_net = line_net.load_p.copy(), line_net.load_q.copy()
    for k, u in enumerate(line_net.pv_units):
        pos = line_net.bus_pos[u.bus]
        p_net[pos] -= [0.04, 0.03][k]
        q_net[pos] -= pv_q[k]
    np.testing.assert_allclose(pf.v_sq, ac_voltages(line_net, p_net, q_net), atol=1e-8)


@pytest.mark.parametrize("scale", [0.3, 1.0, 1.8])
def test_residuals_small_on_fixtures(net33, scale):
    inp = PfInput(load_p=net33.load_p * scale, load_q=net33.load_q * scale,
                  pv_p=np.array([u.p_rating * 0.5 for u in net33.pv_units]))
    pf = solve_pf(net33, inp)
    assert pf.converged
    assert distflow_residual(net33, inp, pf) <= 1e-8
    assert relaxation_gap(pf) <= 1e-8


def test_oltc_and_capacitor_effects(device_net):
    base = solve_pf(device_net, PfInput(taps=[3], cb_units=[0]))
    up = solve_pf(device_net, PfInput(taps=[4], cb_units=[0]))
    cap = solve_pf(device_net, PfInput(taps=[3], cb_units=[2]))
    assert np.all(up.v_sq[1:] > base.v_sq[1:])
    assert cap.v_sq[3] > base.v_sq[3]
    inp = PfInput(taps=[5], cb_units=[1])
    assert distflow_residual(device_net, inp, solve_pf(device_net, inp)) <= 1e-8


def test_loss_and_balance(line_net):
    pf = solve_pf(line_net)
    p_in, _ = slack_injection(line_net, pf)
    assert p_in == pytest.approx(line_net.load_p.sum() + pf.total_loss, abs=1e-10)
    assert pf.total_loss == pytest.approx(float(line_net.r @ pf.l_sq))


def test_collapse_reported_not_raised():
    net = network_from_dict(line_doc(4, r=0.3, x=0.6, load=0.5))
    pf = solve_pf(net)
    assert not pf.converged
    assert "collapse" in pf.message or "convergence" in pf.message


def test_warm_start_same_answer(net33):
    cold = solve_pf(net33)
    warm = solve_pf(net33, v_init=cold.v_sq * 1.001)
    np.testing.assert_allclose(warm.v_sq, cold.v_sq, atol=1e-10)
    assert warm.iterations <= cold.iterations


def test_input_validation(line_net):
    with pytest.raises(ValueError):
        solve_pf(line_net, PfInput(load_p=np.zeros(3)))
    with pytest.raises(ValueError):
        solve_pf(line_net, PfInput(pv_q=np.zeros(5)))


def test_voltage_violation():
    net = network_from_dict(line_doc(3))
    v = np.array([1.0, 1.06, 0.94]) ** 2
    np.testing.assert_allclose(voltage_violation(net, v), [0.0, 0.01, 0.01], atol=1e-12)


def test_pfinput_roundtrip():
    inp = PfInput(load_p=np.array([0.1, 0.2]), taps=[3])
    back = PfInput.from_dict(inp.to_dict())
    np.testing.assert_array_equal(back.load_p, inp.load_p)
    assert list(back.taps) == [3] and back.pv_q is None
