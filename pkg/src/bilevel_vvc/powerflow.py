"""Exact DistFlow power flow for radial feeders (the closed-loop plant).

A vectorised backward/forward sweep in squared-voltage / squared-current
variables.  With ``Pm`` the bus-by-branch path incidence, one sweep is

    P = Pm.T @ p_net + B @ (r * l)          (backward, flows incl. losses)
    v = G * (v0 - Pm @ (d / G[from]))       (forward, OLTC ratios in G)
    l = (P^2 + Q^2) / v[from]

where ``G`` is the cumulative product of squared tap ratios along each path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .grid import Network, q_limits

log = logging.getLogger(__name__)

COLLAPSE_V_SQ = 0.25


class PowerFlowError(RuntimeError):
    """Plant failure: non-convergence or voltage collapse."""

    def __init__(self, message: str, solution: "PfSolution | None" = None):
        super().__init__(message)
        self.solution = solution


@dataclass
class PfInput:
    """Instantaneous operating point; arrays are per-unit.

    ``load_p``/``load_q`` are per bus, ``pv_p``/``pv_q`` per PV unit (in
    ``net.pv_units`` order), ``taps`` per OLTC, ``cb_units`` per capacitor bank.
    ``None`` entries fall back to the network's nominal / current values.
    """

    load_p: np.ndarray | None = None
    load_q: np.ndarray | None = None
    pv_p: np.ndarray | None = None
    pv_q: np.ndarray | None = None
    taps: Sequence[int] | None = None
    cb_units: Sequence[int] | None = None

    def resolved(self, net: Network) -> "PfInput":
        npv = len(net.pv_units)
        out = PfInput(
            load_p=net.load_p.copy() if self.load_p is None else np.asarray(self.load_p, float),
            load_q=net.load_q.copy() if self.load_q is None else np.asarray(self.load_q, float),
            pv_p=np.zeros(npv) if self.pv_p is None else np.asarray(self.pv_p, float),
            pv_q=np.zeros(npv) if self.pv_q is None else np.asarray(self.pv_q, float),
            taps=tuple(o.position for o in net.oltcs) if self.taps is None else tuple(int(t) for t in self.taps),
            cb_units=tuple(c.units_on for c in net.capbanks) if self.cb_units is None else tuple(int(n) for n in self.cb_units),
        )
        if out.load_p.shape != (net.n_bus,) or out.load_q.shape != (net.n_bus,):
            raise ValueError(f"load arrays must have length {net.n_bus}")
        if out.pv_p.shape != (npv,) or out.pv_q.shape != (npv,):
            raise ValueError(f"PV arrays must have length {npv}")
        if len(out.taps) != len(net.oltcs) or len(out.cb_units) != len(net.capbanks):
            raise ValueError("device state does not match the network's OLTCs / capacitor banks")
        for o, t in zip(net.oltcs, out.taps):
            o.ratio_sq(t)
        for c, n in zip(net.capbanks, out.cb_units):
            if not 0 <= n <= c.n_units_total:
                raise ValueError(f"capacitor bank at bus {c.bus}: {n} units outside 0..{c.n_units_total}")
        return out

    def to_dict(self) -> dict:
        return {k: (np.asarray(v).tolist() if v is not None else None)
                for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "PfInput":
        return cls(**{k: doc.get(k) for k in ("load_p", "load_q", "pv_p", "pv_q", "taps", "cb_units")})


@dataclass
class PfSolution:
    v_sq: np.ndarray
    l_sq: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    total_loss: float
    converged: bool
    iterations: int
    worst_mismatch: float = 0.0
    message: str = ""
    pv_q: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v_from: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def v(self) -> np.ndarray:
        return np.sqrt(self.v_sq)

    def to_dict(self, net: Network | None = None) -> dict:
        doc = {
            "converged": self.converged, "iterations": self.iterations,
            "total_loss": self.total_loss, "worst_mismatch": self.worst_mismatch,
            "message": self.message, "v_sq": self.v_sq.tolist(), "l_sq": self.l_sq.tolist(),
            "P": self.P.tolist(), "Q": self.Q.tolist(), "pv_q": self.pv_q.tolist(),
        }
        if net is not None:
            doc["bus_ids"] = net.bus_ids.tolist()
            doc["total_loss_kw"] = self.total_loss * net.mva_base * 1000.0
        return doc


@lru_cache(maxsize=32)
def _sweep_matrices(net: Network):
    pm = net.path_incidence
    subtree = pm[net.branch_to, :].T.copy()   # subtree[e, e'] = 1 iff e' at/below e
    z2 = net.r**2 + net.x**2
    return pm, pm.T.copy(), subtree, z2


def net_injections(net: Network, inp: PfInput) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-bus net demand (load - generation) after clipping PV outputs to capability."""
    p = inp.load_p.copy()
    q = inp.load_q.copy()
    pv_q = inp.pv_q.copy()
    for k, u in enumerate(net.pv_units):
        pk = min(max(inp.pv_p[k], 0.0), u.s_rating)
        if pk != inp.pv_p[k]:
            log.warning("PV at bus %s: active output %.6g clipped to %.6g", u.bus, inp.pv_p[k], pk)
        lo, hi = q_limits(u, pk)
        qk = min(max(pv_q[k], lo), hi)
        if abs(qk - pv_q[k]) > 1e-12:
            log.warning("PV at bus %s: reactive output %.6g clipped to [%.6g, %.6g]", u.bus, pv_q[k], lo, hi)
        pv_q[k] = qk
        b = net.pv_bus_pos[k]
        p[b] -= pk
        q[b] -= qk
    for c, n in zip(net.capbanks, inp.cb_units):
        q[net.bus_pos[c.bus]] -= c.injection(n)
    return p, q, pv_q


def tap_gain(net: Network, taps: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Per-branch squared ratio and cumulative per-bus product along the path."""
    t = np.ones(net.n_branch)
    for o, pos in zip(net.oltcs, taps):
        t[o.branch] = o.ratio_sq(pos)
    g = np.ones(net.n_bus)
    for e in net.order:
        g[net.branch_to[e]] = g[net.branch_from[e]] * t[e]
    return t, g


def solve_pf(
    net: Network,
    inp: PfInput | None = None,
    *,
    v_slack: float | None = None,
    tol: float = 1e-10,
    max_iter: int = 200,
    v_init: np.ndarray | None = None,
) -> PfSolution:
    """Backward/forward sweep; converged when max |delta v_sq| < ``tol`` between sweeps."""
    inp = (inp or PfInput()).resolved(net)
    pm, pmt, subtree, z2 = _sweep_matrices(net)
    p_net, q_net, pv_q = net_injections(net, inp)
    _, g = tap_gain(net, inp.taps)
    v0 = (net.slack_voltage if v_slack is None else v_slack) ** 2
    fr = net.branch_from
    r, x = net.r, net.x
    base_p = pmt @ p_net
    base_q = pmt @ q_net
    v = np.full(net.n_bus, v0) if v_init is None else np.array(v_init, float)
    v[net.slack] = v0
    l = np.zeros(net.n_branch)
    P, Q = base_p.copy(), base_q.copy()
    if v_init is not None:
        l = (P**2 + Q**2) / v[fr]
    converged = False
    msg = ""
    delta = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        P = base_p + subtree @ (r * l)
        Q = base_q + subtree @ (x * l)
        d = 2.0 * (r * P + x * Q) - z2 * l
        v_new = g * (v0 - pm @ (d / g[fr]))
        if v_new.min() < COLLAPSE_V_SQ or not np.all(np.isfinite(v_new)):
            msg = f"voltage collapse: min v_sq {np.nanmin(v_new):.4g} < {COLLAPSE_V_SQ}"
            v = v_new
            break
        l = (P**2 + Q**2) / v_new[fr]
        delta = float(np.max(np.abs(v_new - v)))
        v = v_new
        if delta < tol:
            P = base_p + subtree @ (r * l)
            Q = base_q + subtree @ (x * l)
            converged = True
            break
    else:
        msg = f"no convergence after {max_iter} sweeps (last max |dv| = {delta:.3g})"
    sol = PfSolution(
        v_sq=v, l_sq=l, P=P, Q=Q, total_loss=float(r @ l), converged=converged,
        iterations=it, message=msg, pv_q=pv_q, v_from=v[fr],
    )
    sol.worst_mismatch = distflow_residual(net, inp, sol) if np.all(np.isfinite(v)) else np.inf
    return sol


def distflow_residual(net: Network, inp: PfInput, sol: PfSolution) -> float:
    """Max absolute residual of the branch-flow equations (balance, drop, current) at ``sol``."""
    inp = inp.resolved(net)
    p_net, q_net, _ = net_injections(net, inp)
    t, _ = tap_gain(net, inp.taps)
    fr, to = net.branch_from, net.branch_to
    child_p = np.zeros(net.n_bus)
    child_q = np.zeros(net.n_bus)
    np.add.at(child_p, fr, sol.P)
    np.add.at(child_q, fr, sol.Q)
    r, x = net.r, net.x
    res_p = sol.P - (child_p[to] + r * sol.l_sq + p_net[to])
    res_q = sol.Q - (child_q[to] + x * sol.l_sq + q_net[to])
    res_v = sol.v_sq[to] / t - (sol.v_sq[fr] - 2 * (r * sol.P + x * sol.Q) + (r**2 + x**2) * sol.l_sq)
    res_l = sol.l_sq * sol.v_sq[fr] - (sol.P**2 + sol.Q**2)
    return float(max(np.abs(res_p).max(), np.abs(res_q).max(), np.abs(res_v).max(), np.abs(res_l).max()))


def relaxation_gap(sol, net: Network | None = None) -> float:
    """Conic relaxation gap: sum over branches of |l - (P^2 + Q^2) / v_from|.

    Accepts anything with ``l_sq``, ``P``, ``Q`` and either ``v_from`` or
    (``v_sq`` plus ``net``) attributes.
    """
    v_from = getattr(sol, "v_from", None)
    if v_from is None or len(v_from) != len(sol.l_sq):
        if net is None:
            raise ValueError("need the network to locate sending-end voltages")
        v_from = np.asarray(sol.v_sq)[net.branch_from]
    l = np.asarray(sol.l_sq)
    return float(np.sum(np.abs(l - (np.asarray(sol.P) ** 2 + np.asarray(sol.Q) ** 2) / v_from)))


def slack_injection(net: Network, sol: PfSolution) -> tuple[float, float]:
    out = list(net.children[net.slack])
    return float(sol.P[out].sum()), float(sol.Q[out].sum())


def voltage_violation(net: Network, v_sq: np.ndarray) -> np.ndarray:
    """Per-bus magnitude excursion beyond [v_min, v_max] in p.u. (0 inside the band)."""
    v = np.sqrt(v_sq)
    lo = np.sqrt(net.v_min_sq)
    hi = np.sqrt(net.v_max_sq)
    return np.maximum(lo - v, 0.0) + np.maximum(v - hi, 0.0)
