"""Upper-level dispatch of OLTCs and capacitor banks.

The leader minimises branch losses over the relaxed branch-flow model while
the inverter group's reactive outputs are constrained to be optimal for the
follower problem.  The follower is replaced by its KKT system with
complementarity linearised by big-M binaries::

    grad f(q)_i + sum_j X_ji (lam_hi_j - lam_lo_j) - mu_lo_i + mu_hi_i = 0
    lam_hi_j <= M sig_hi_j          v_hi_j - v_j <= (v_hi_j - v_lo_j)(1 - sig_hi_j)
    lam_lo_j <= M sig_lo_j          v_j - v_lo_j <= (v_hi_j - v_lo_j)(1 - sig_lo_j)
    mu_hi_i  <= M del_hi_i          qbar_i - q_i <= 2 qbar_i (1 - del_hi_i)
    mu_lo_i  <= M del_lo_i          q_i + qbar_i <= 2 qbar_i (1 - del_lo_i)

Primal-side constants are the natural ranges of the bounded quantities; only
the dual side uses the configurable ``M``, which is audited after each solve.

Modes: ``bilevel`` (KKT block), ``model1`` (q free in its box) and
``model2`` (q fixed at zero).
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import lsq_linear

from .bnb import BnbConfig, BnbResult, solve_misocp
from .conic import OPTIMAL, ConicProgram, ProgramBuilder, solve_socp
from .grid import Network, compute_x_matrix, q_limits
from .powerflow import PfInput, relaxation_gap

log = logging.getLogger(__name__)

MODES = ("bilevel", "model1", "model2")
BOX_TOL = 1e-9
OBJECTIVES = ("cost", "loss", "equal_ratio", "weighted")
Q_EPS = 1e-7      # inverters with a smaller reactive box are treated as saturated at 0


class DispatchError(RuntimeError):
    """Dispatch failure; ``kind`` is ``infeasible`` or ``numerical``."""

    def __init__(self, message: str, kind: str = "infeasible"):
        super().__init__(message)
        self.kind = kind


# -- inputs -------------------------------------------------------------------------

@dataclass(frozen=True)
class PeriodForecast:
    load_p: np.ndarray
    load_q: np.ndarray
    pv_p: np.ndarray
    prev_taps: tuple[int, ...]
    prev_cb: tuple[int, ...]
    period: int = 0

    def validate(self, net: Network) -> None:
        if np.shape(self.load_p) != (net.n_bus,) or np.shape(self.load_q) != (net.n_bus,):
            raise ValueError(f"forecast loads must have length {net.n_bus}")
        if np.shape(self.pv_p) != (len(net.pv_units),):
            raise ValueError(f"forecast PV must have length {len(net.pv_units)}")
        if np.any(np.asarray(self.pv_p) < 0):
            raise ValueError("forecast PV output must be non-negative")
        if len(self.prev_taps) != len(net.oltcs) or len(self.prev_cb) != len(net.capbanks):
            raise ValueError("previous device state does not match the network")
        for o, t in zip(net.oltcs, self.prev_taps):
            if not 1 <= t <= o.n_positions:
                raise DispatchError(f"previous tap {t} outside 1..{o.n_positions}")
        for c, n in zip(net.capbanks, self.prev_cb):
            if not 0 <= n <= c.n_units_total:
                raise DispatchError(f"previous capacitor count {n} at bus {c.bus} outside 0..{c.n_units_total}")

    def pv_clipped(self, net: Network) -> np.ndarray:
        return np.minimum(np.asarray(self.pv_p, float), [u.s_rating for u in net.pv_units])

    def q_box(self, net: Network) -> np.ndarray:
        """Upper reactive limit per PV unit under the forecast output."""
        p = self.pv_clipped(net)
        return np.array([q_limits(u, pk)[1] for u, pk in zip(net.pv_units, p)])

    def instant(self, taps=None, cb=None) -> PfInput:
        return PfInput(load_p=np.asarray(self.load_p, float), load_q=np.asarray(self.load_q, float),
                       pv_p=np.asarray(self.pv_p, float), taps=taps, cb_units=cb)

    @classmethod
    def nominal(cls, net: Network, load_scale: float = 1.0, pv_scale: float = 0.0, period: int = 0):
        taps, cb = net.device_state()
        return cls(load_p=net.load_p * load_scale, load_q=net.load_q * load_scale,
                   pv_p=np.array([u.p_rating * pv_scale for u in net.pv_units]),
                   prev_taps=taps, prev_cb=cb, period=period)

    def to_dict(self) -> dict:
        return {"load_p": np.asarray(self.load_p).tolist(), "load_q": np.asarray(self.load_q).tolist(),
                "pv_p": np.asarray(self.pv_p).tolist(), "prev_taps": list(self.prev_taps),
                "prev_cb": list(self.prev_cb), "period": self.period}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "PeriodForecast":
        return cls(load_p=np.array(doc["load_p"], float), load_q=np.array(doc["load_q"], float),
                   pv_p=np.array(doc["pv_p"], float), prev_taps=tuple(doc["prev_taps"]),
                   prev_cb=tuple(doc["prev_cb"]), period=int(doc.get("period", 0)))


@dataclass(frozen=True)
class LowerObjectiveSpec:
    """Follower objective.

    ``weights`` = (cost weight, loss weight) for ``weighted``; ``cost`` and
    ``loss`` are the pure forms.  ``leader`` (equal_ratio) is a PV bus id, or
    a mapping group -> bus id when several groups are present.  ``groups``
    overrides the network's PV group labels (group -> PV bus ids).
    """

    kind: str = "weighted"
    weights: tuple[float, float] = (1.0, 1.0)
    leader: int | Mapping[str, int] | None = None
    groups: Mapping[str, Sequence[int]] | None = None

    def __post_init__(self):
        if self.kind not in OBJECTIVES:
            raise ValueError(f"unknown lower objective {self.kind!r}; choose from {OBJECTIVES}")
        if self.kind == "weighted":
            w = self.weights
            if len(w) != 2 or min(w) < 0 or max(w) <= 0:
                raise ValueError("weights must be two non-negative numbers, not both zero")

    @property
    def cost_loss_weights(self) -> tuple[float, float]:
        return {"cost": (1.0, 0.0), "loss": (0.0, 1.0)}.get(self.kind, tuple(self.weights))

    def group_members(self, net: Network) -> dict[str, list[int]]:
        """Group label -> indices into ``net.pv_units``."""
        if self.groups is None:
            return net.pv_groups()
        by_bus = {u.bus: k for k, u in enumerate(net.pv_units)}
        out: dict[str, list[int]] = {}
        seen = set()
        for g, buses in self.groups.items():
            for b in buses:
                if int(b) not in by_bus:
                    raise ValueError(f"group {g}: bus {b} has no PV unit")
                seen.add(int(b))
                out.setdefault(str(g), []).append(by_bus[int(b)])
        missing = set(by_bus) - seen
        if missing:
            raise ValueError(f"PV buses {sorted(missing)} are not assigned to any group")
        return out

    def leaders(self, net: Network) -> dict[str, int]:
        """Group -> leader index into ``net.pv_units`` (equal_ratio only)."""
        groups = self.group_members(net)
        if self.leader is None:
            raise DispatchError("equal_ratio objective requires a leader bus", kind="usage")
        if isinstance(self.leader, Mapping):
            spec = {str(g): int(b) for g, b in self.leader.items()}
        elif len(groups) == 1:
            spec = {next(iter(groups)): int(self.leader)}
        else:
            raise DispatchError("several PV groups need a leader mapping group -> bus", kind="usage")
        out = {}
        for g, members in groups.items():
            if g not in spec:
                raise DispatchError(f"no leader given for PV group {g!r}", kind="usage")
            idx = [k for k in members if net.pv_units[k].bus == spec[g]]
            if not idx:
                raise DispatchError(f"leader bus {spec[g]} is not a PV bus of group {g!r}", kind="usage")
            out[g] = idx[0]
        return out

    def to_dict(self) -> dict:
        leader = dict(self.leader) if isinstance(self.leader, Mapping) else self.leader
        groups = {g: list(b) for g, b in self.groups.items()} if self.groups is not None else None
        return {"kind": self.kind, "weights": list(self.weights), "leader": leader, "groups": groups}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "LowerObjectiveSpec":
        return cls(kind=doc.get("kind", "weighted"), weights=tuple(doc.get("weights", (1.0, 1.0))),
                   leader=doc.get("leader"), groups=doc.get("groups"))


@dataclass(frozen=True)
class FollowerModel:
    """Per-group data of the follower problem shared by the dispatcher and the agents."""

    group: str
    members: tuple[int, ...]        # indices into net.pv_units (with a usable box)
    vset: tuple[int, ...]           # indices into net.pv_units whose voltage is constrained
    hess: np.ndarray                # f = q' H q + g' q  (+ const)
    lin: np.ndarray
    sens: np.ndarray                # dv[vset] / dq[members]  (X block)

    def grad(self, q: np.ndarray) -> np.ndarray:
        return 2.0 * self.hess @ q + self.lin

    def value(self, q: np.ndarray) -> float:
        return float(q @ self.hess @ q + self.lin @ q)


def follower_models(net: Network, spec: LowerObjectiveSpec, qbar: np.ndarray,
                    X: np.ndarray | None = None) -> list[FollowerModel]:
    """Build each group's follower objective and voltage sensitivity."""
    if X is None:
        X = compute_x_matrix(net).full
    pos = net.pv_bus_pos
    out = []
    leaders = spec.leaders(net) if spec.kind == "equal_ratio" else {}
    wc, wl = spec.cost_loss_weights
    for g, members in spec.group_members(net).items():
        active = tuple(k for k in members if qbar[k] > Q_EPS)
        if spec.kind == "equal_ratio":
            lead = leaders[g]
            vset = (lead,)
            hess = np.diag([X[pos[lead], pos[k]] / (2.0 * qbar[k]) for k in active])
            lin = np.zeros(len(active))
        else:
            vset = tuple(members)
            a = np.array([net.pv_units[k].cost_a for k in active])
            b = np.array([net.pv_units[k].cost_b for k in active])
            hess = wc * np.diag(a**2) + wl * X[np.ix_(pos[list(active)], pos[list(active)])] if active else np.zeros((0, 0))
            lin = wc * b
        sens = X[np.ix_(pos[list(vset)], pos[list(active)])] if active else np.zeros((len(vset), 0))
        out.append(FollowerModel(group=g, members=active, vset=vset, hess=np.atleast_2d(hess).reshape(len(active), len(active)),
                                 lin=np.asarray(lin, float), sens=sens))
    return out


def box_optimum(fm: FollowerModel, qbar: np.ndarray) -> np.ndarray:
    """Follower optimum with the voltage constraints dropped (box only).

    The Hessian is positive definite, so this point is unique; it is what
    the KKT block must return whenever no voltage multiplier is active.
    """
    lo_hi = np.array([qbar[k] for k in fm.members])
    if not np.any(fm.lin):
        return np.zeros(len(fm.members))
    R = np.linalg.cholesky(2.0 * fm.hess).T
    target = -np.linalg.solve(R.T, fm.lin)
    res = lsq_linear(R, target, bounds=(-lo_hi, lo_hi), method="bvls", tol=1e-14)
    return np.clip(res.x, -lo_hi, lo_hi)


# -- program assembly ------------------------------------------------------------------

def build_single_level(
    net: Network,
    forecast: PeriodForecast,
    lower_spec: LowerObjectiveSpec | None = None,
    bigM: float = 100.0,
    *,
    mode: str = "bilevel",
    relaxed: bool = False,
    penalty: float = 1e4,
    fixed_devices: tuple[Sequence[int], Sequence[int]] | None = None,
    fixed_q: np.ndarray | None = None,
) -> ConicProgram:
    """Assemble the single-level MISOCP for one dispatch period.

    ``relaxed`` adds non-negative voltage slacks (penalty per unit of squared
    voltage) to both the network limits and the follower's voltage bounds.
    ``fixed_devices`` / ``fixed_q`` pin the device settings or inverter
    outputs (used by the enumeration oracle).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    lower_spec = lower_spec or LowerObjectiveSpec()
    forecast.validate(net)
    B = ProgramBuilder()
    nb, ne = net.n_bus, net.n_branch
    fr, to = net.branch_from, net.branch_to
    r, x = net.r, net.x
    vmin, vmax = net.v_min_sq, net.v_max_sq
    v0 = net.slack_voltage**2

    v = []
    s_lo = {}
    s_hi = {}
    for i in range(nb):
        bid = net.bus_ids[i]
        if i == net.slack:
            v.append(B.var(f"v[{bid}]", v0, v0))
            continue
        if relaxed:
            k = B.var(f"v[{bid}]", 0.5, 1.5)
            s_lo[i] = B.var(f"slo[{bid}]", 0.0, 0.2)
            s_hi[i] = B.var(f"shi[{bid}]", 0.0, 0.2)
            B.cost(s_lo[i], penalty)
            B.cost(s_hi[i], penalty)
            B.ge({k: 1.0, s_lo[i]: 1.0}, vmin[i])
            B.le({k: 1.0, s_hi[i]: -1.0}, vmax[i])
        else:
            k = B.var(f"v[{bid}]", vmin[i], vmax[i])
        v.append(k)

    P, Q, L = [], [], []
    for e, br in enumerate(net.branches):
        tag = f"{br.from_bus}-{br.to_bus}"
        P.append(B.var(f"P[{tag}]"))
        Q.append(B.var(f"Q[{tag}]"))
        L.append(B.var(f"l[{tag}]", 0.0, br.i_max_sq))
        B.cost(L[e], r[e])
        d = B.var(f"d[{tag}]")
        t = B.var(f"t[{tag}]", 0.0)
        B.eq({d: 1.0, L[e]: -0.5, v[fr[e]]: 0.5}, 0.0)
        B.eq({t: 1.0, L[e]: -0.5, v[fr[e]]: -0.5}, 0.0)
        B.cone([P[e], Q[e], d], t)

    # OLTC: one-hot positions, McCormick products y_n = w_n * u
    fixed_taps = None if fixed_devices is None else tuple(fixed_devices[0])
    fixed_cb = None if fixed_devices is None else tuple(fixed_devices[1])
    oltc_of = net.oltc_on_branch
    for e in range(ne):
        drop = {v[fr[e]]: 1.0, P[e]: -2.0 * r[e], Q[e]: -2.0 * x[e], L[e]: r[e] ** 2 + x[e] ** 2}
        if e not in oltc_of:
            B.eq({v[to[e]]: 1.0, **{k: -c for k, c in drop.items()}}, 0.0)
            continue
        k = oltc_of[e]
        o = net.oltcs[k]
        table = np.array(o.step)
        lo_v = vmin[to[e]] - (0.2 if relaxed else 0.0)
        hi_v = vmax[to[e]] + (0.2 if relaxed else 0.0)
        u_lo, u_hi = lo_v / table.max(), hi_v / table.min()
        u = B.var(f"u[oltc{k}]", u_lo, u_hi)
        B.eq({u: 1.0, **{kk: -c for kk, c in drop.items()}}, 0.0)
        window = set(o.window(forecast.prev_taps[k]))
        onehot, vt = {}, {v[to[e]]: 1.0}
        for n in range(1, o.n_positions + 1):
            fixed = None
            if n not in window:
                fixed = 0
            if fixed_taps is not None:
                fixed = int(fixed_taps[k] == n)
            w = B.binary(f"w[oltc{k},{n}]", priority=0, fixed=fixed)
            y = B.var(f"y[oltc{k},{n}]", 0.0, u_hi)
            onehot[w] = 1.0
            B.le({y: 1.0, w: -u_hi}, 0.0)
            B.ge({y: 1.0, w: -u_lo}, 0.0)
            B.le({y: 1.0, u: -1.0, w: -u_lo}, -u_lo)
            B.ge({y: 1.0, u: -1.0, w: -u_hi}, -u_hi)
            vt[y] = -table[n - 1]
        B.eq(onehot, 1.0)
        B.eq(vt, 0.0)

    # capacitor banks: one-hot over unit counts
    q_cb_terms: dict[int, dict[int, float]] = {}
    for k, c in enumerate(net.capbanks):
        window = set(c.window(forecast.prev_cb[k]))
        onehot = {}
        bus = net.bus_pos[c.bus]
        for m in range(c.n_units_total + 1):
            fixed = None if m in window else 0
            if fixed_cb is not None:
                fixed = int(fixed_cb[k] == m)
            w = B.binary(f"c[cb{k},{m}]", priority=0, fixed=fixed)
            onehot[w] = 1.0
            if m:
                q_cb_terms.setdefault(bus, {})[w] = c.injection(m)
        B.eq(onehot, 1.0)

    # inverters
    qbar = forecast.q_box(net)
    pv_p = forecast.pv_clipped(net)
    qg = []
    for k, unit in enumerate(net.pv_units):
        if mode == "model2" or qbar[k] <= Q_EPS:
            lo = hi = 0.0
        else:
            lo, hi = -qbar[k], qbar[k]
        if fixed_q is not None:
            lo = hi = float(np.clip(fixed_q[k], -qbar[k], qbar[k]))
        qg.append(B.var(f"q[{unit.bus}]", lo, hi))

    # nodal balance at every non-slack bus (receiving end of its parent branch)
    p_net = np.asarray(forecast.load_p, float).copy()
    q_net = np.asarray(forecast.load_q, float).copy()
    q_inj: dict[int, dict[int, float]] = {i: {} for i in range(nb)}
    for k, unit in enumerate(net.pv_units):
        b = net.pv_bus_pos[k]
        p_net[b] -= pv_p[k]
        q_inj[b][qg[k]] = 1.0
    for bus, terms in q_cb_terms.items():
        q_inj[bus].update(terms)
    for e in range(ne):
        j = to[e]
        rows_p = {P[e]: 1.0, L[e]: -r[e]}
        rows_q = {Q[e]: 1.0, L[e]: -x[e]}
        for c in net.children[j]:
            rows_p[P[c]] = -1.0
            rows_q[Q[c]] = -1.0
        for kk, coef in q_inj[j].items():
            rows_q[kk] = rows_q.get(kk, 0.0) + coef
        B.eq(rows_p, p_net[j])
        B.eq(rows_q, q_net[j])

    if mode == "bilevel" and fixed_q is None and net.pv_units:
        _add_kkt_block(B, net, lower_spec, qbar, qg, v, s_lo, s_hi, bigM, relaxed)
    return B.build()


def _add_kkt_block(B, net, spec, qbar, qg, v, s_lo, s_hi, bigM, relaxed):
    vmin, vmax = net.v_min_sq, net.v_max_sq
    pos = net.pv_bus_pos
    widen = 0.4 if relaxed else 0.0
    for fm in follower_models(net, spec, qbar):
        if not fm.members:
            continue
        lam_lo, lam_hi = {}, {}
        any_active: dict[int, float] = {}
        for j in fm.vset:
            bus = net.pv_units[j].bus
            i = pos[j]
            mv = vmax[i] - vmin[i] + widen
            ll = B.var(f"lamlo[{bus}]", 0.0)
            lh = B.var(f"lamhi[{bus}]", 0.0)
            sl = B.binary(f"siglo[{bus}]", priority=1)
            sh = B.binary(f"sighi[{bus}]", priority=1)
            lam_lo[j], lam_hi[j] = ll, lh
            B.le({ll: 1.0, sl: -bigM}, 0.0)
            B.le({lh: 1.0, sh: -bigM}, 0.0)
            # follower bounds (widened by the same slacks in relaxed mode)
            lo_terms = {v[i]: 1.0, sl: mv}
            hi_terms = {v[i]: -1.0, sh: mv}
            if relaxed:
                lo_terms[s_lo[i]] = 1.0
                hi_terms[s_hi[i]] = 1.0
            B.le(lo_terms, vmin[i] + mv)       # v - vmin (+ slo) <= mv (1 - sig_lo)
            B.le(hi_terms, mv - vmax[i])       # vmax (+ shi) - v <= mv (1 - sig_hi)
            B.le({sl: 1.0, sh: 1.0}, 1.0)
            any_active[sl] = any_active[sh] = -1.0
        q_free = box_optimum(fm, qbar)
        for a, k in enumerate(fm.members):
            bus = net.pv_units[k].bus
            ml = B.var(f"mulo[{bus}]", 0.0)
            mh = B.var(f"muhi[{bus}]", 0.0)
            dl = B.binary(f"dello[{bus}]", priority=1)
            dh = B.binary(f"delhi[{bus}]", priority=1)
            span = 2.0 * qbar[k]
            B.le({ml: 1.0, dl: -bigM}, 0.0)
            B.le({mh: 1.0, dh: -bigM}, 0.0)
            B.le({qg[k]: 1.0, dl: span}, span - qbar[k])     # q + qbar <= span (1 - del_lo)
            B.le({qg[k]: -1.0, dh: span}, span - qbar[k])    # qbar - q <= span (1 - del_hi)
            B.le({dl: 1.0, dh: 1.0}, 1.0)
            # with every voltage binary off the follower sits at its box optimum
            qf = q_free[a]
            B.le({qg[k]: 1.0, **{t: c * (qbar[k] - qf) for t, c in any_active.items()}}, qf)
            B.le({qg[k]: -1.0, **{t: c * (qbar[k] + qf) for t, c in any_active.items()}}, -qf)
            if qf > -qbar[k] + BOX_TOL:
                B.le({dl: 1.0, **any_active}, 0.0)
            if qf < qbar[k] - BOX_TOL:
                B.le({dh: 1.0, **any_active}, 0.0)
            row: dict[int, float] = {}
            for b_, kk in enumerate(fm.members):
                coef = 2.0 * fm.hess[a, b_]
                if coef:
                    row[qg[kk]] = row.get(qg[kk], 0.0) + coef
            for c_, j in enumerate(fm.vset):
                s = fm.sens[c_, a]
                row[lam_hi[j]] = row.get(lam_hi[j], 0.0) + s
                row[lam_lo[j]] = row.get(lam_lo[j], 0.0) - s
            row[ml] = -1.0
            row[mh] = 1.0
            B.eq(row, -fm.lin[a])


# -- decisions -------------------------------------------------------------------------

@dataclass
class DispatchDecision:
    mode: str
    status: str
    taps: tuple[int, ...]
    cb_units: tuple[int, ...]
    q_g: np.ndarray
    lam_lo: dict[int, float]
    lam_hi: dict[int, float]
    mu_lo: dict[int, float]
    mu_hi: dict[int, float]
    v_sq: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    l_sq: np.ndarray
    objective: float
    solve_time: float
    eps: float
    relaxed: bool = False
    bigM: float = 100.0
    nodes: int = 0
    gap: float = 0.0
    warnings: list[str] = field(default_factory=list)
    period: int = 0

    @property
    def loss(self) -> float:
        return self.objective

    def moves(self, prev_taps: Sequence[int], prev_cb: Sequence[int]) -> int:
        return int(sum(abs(a - b) for a, b in zip(self.taps, prev_taps))
                   + sum(abs(a - b) for a, b in zip(self.cb_units, prev_cb)))

    def to_dict(self, net: Network | None = None) -> dict:
        doc = {
            "mode": self.mode, "status": self.status, "period": self.period,
            "taps": list(self.taps), "cb_units": list(self.cb_units), "q_g": self.q_g.tolist(),
            "lam_lo": {str(k): v for k, v in self.lam_lo.items()}, "lam_hi": {str(k): v for k, v in self.lam_hi.items()},
            "mu_lo": {str(k): v for k, v in self.mu_lo.items()}, "mu_hi": {str(k): v for k, v in self.mu_hi.items()},
            "v_sq": self.v_sq.tolist(), "P": self.P.tolist(), "Q": self.Q.tolist(), "l_sq": self.l_sq.tolist(),
            "objective": self.objective, "solve_time": self.solve_time, "eps": self.eps,
            "relaxed": self.relaxed, "bigM": self.bigM, "nodes": self.nodes, "gap": self.gap,
            "warnings": list(self.warnings),
        }
        if net is not None:
            doc["tap_labels"] = [o.label(t) for o, t in zip(net.oltcs, self.taps)]
            doc["objective_kw"] = self.objective * net.mva_base * 1000.0
            doc["pv_buses"] = [u.bus for u in net.pv_units]
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping) -> "DispatchDecision":
        def dd(m):
            return {int(k): float(v) for k, v in m.items()}

        return cls(
            mode=doc["mode"], status=doc["status"], taps=tuple(doc["taps"]), cb_units=tuple(doc["cb_units"]),
            q_g=np.array(doc["q_g"], float), lam_lo=dd(doc["lam_lo"]), lam_hi=dd(doc["lam_hi"]),
            mu_lo=dd(doc["mu_lo"]), mu_hi=dd(doc["mu_hi"]), v_sq=np.array(doc["v_sq"]), P=np.array(doc["P"]),
            Q=np.array(doc["Q"]), l_sq=np.array(doc["l_sq"]), objective=doc["objective"],
            solve_time=doc["solve_time"], eps=doc["eps"], relaxed=doc.get("relaxed", False),
            bigM=doc.get("bigM", 100.0), nodes=doc.get("nodes", 0), gap=doc.get("gap", 0.0),
            warnings=list(doc.get("warnings", [])), period=doc.get("period", 0),
        )


def decision_json(decision: DispatchDecision, net: Network | None = None) -> str:
    return json.dumps(decision.to_dict(net), indent=2)


def _decode(net: Network, prog: ConicProgram, z: np.ndarray, mode: str) -> dict:
    idx = {name: k for k, name in enumerate(prog.names)}

    def get(name, default=0.0):
        k = idx.get(name)
        return default if k is None else float(z[k])

    taps = []
    for k, o in enumerate(net.oltcs):
        w = [get(f"w[oltc{k},{n}]") for n in range(1, o.n_positions + 1)]
        taps.append(int(np.argmax(w)) + 1)
    cbs = []
    for k, c in enumerate(net.capbanks):
        w = [get(f"c[cb{k},{m}]") for m in range(c.n_units_total + 1)]
        cbs.append(int(np.argmax(w)))
    v = np.array([get(f"v[{b}]") for b in net.bus_ids])
    tags = [f"{br.from_bus}-{br.to_bus}" for br in net.branches]
    P = np.array([get(f"P[{t}]") for t in tags])
    Q = np.array([get(f"Q[{t}]") for t in tags])
    l = np.array([get(f"l[{t}]") for t in tags])
    q = np.array([get(f"q[{u.bus}]") for u in net.pv_units])
    duals = {}
    for key in ("lamlo", "lamhi", "mulo", "muhi"):
        duals[key] = {u.bus: get(f"{key}[{u.bus}]") for u in net.pv_units if f"{key}[{u.bus}]" in idx}
    relaxed_any = any(name.startswith("slo[") for name in prog.names)
    slack = 0.0
    if relaxed_any:
        slack = sum(get(f"slo[{b}]") + get(f"shi[{b}]") for b in net.bus_ids if f"slo[{b}]" in idx)
    loss = float(net.r @ l)
    return {"taps": tuple(taps), "cb": tuple(cbs), "v": v, "P": P, "Q": Q, "l": l, "q": q,
            "duals": duals, "loss": loss, "slack": slack}


@dataclass(frozen=True)
class DispatchConfig:
    bnb: BnbConfig = field(default_factory=lambda: BnbConfig(gap_tol=1e-6))
    bigM: float = 100.0
    max_rescale: int = 2
    penalty: float = 1e4
    audit_fraction: float = 0.99


def _solve_mode(net, forecast, spec, cfg: DispatchConfig, mode: str) -> DispatchDecision:
    t0 = time.perf_counter()
    warnings: list[str] = []
    M = cfg.bigM
    relaxed = False
    res: BnbResult | None = None
    prog = None
    for attempt in range(cfg.max_rescale + 1):
        prog = build_single_level(net, forecast, spec, M, mode=mode, relaxed=relaxed, penalty=cfg.penalty)
        if mode == "bilevel" and net.pv_units and not relaxed:
            res = solve_misocp(prog, cfg.bnb, branch_on=prog.binary[prog.priority == 0],
                               leaf=_FollowerLeaf(net, forecast, spec, prog))
        else:
            res = solve_misocp(prog, cfg.bnb)
        if res.solution is None and not relaxed:
            warnings.append(f"{mode}: single-level problem infeasible ({res.status}); retrying with voltage slacks")
            log.warning(warnings[-1])
            relaxed = True
            prog = build_single_level(net, forecast, spec, M, mode=mode, relaxed=True, penalty=cfg.penalty)
            res = solve_misocp(prog, cfg.bnb)
        if res.solution is None:
            raise DispatchError(f"{mode} dispatch infeasible even with voltage slacks (status {res.status})")
        if mode != "bilevel":
            break
        dec = _result_state(net, prog, res, mode)
        duals = [x for d in dec["duals"].values() for x in d.values()]
        top = max(duals, default=0.0)
        if top < cfg.audit_fraction * M:
            break
        if attempt == cfg.max_rescale:
            warnings.append(f"dual {top:.4g} still within 1% of M = {M:g} after {attempt} rescales")
            log.warning(warnings[-1])
            break
        warnings.append(f"dual {top:.4g} within 1% of M = {M:g}; re-solving with M = {10 * M:g}")
        log.warning(warnings[-1])
        M *= 10.0
    dec = _result_state(net, prog, res, mode)
    eps = relaxation_gap(_Flows(dec["l"], dec["P"], dec["Q"], dec["v"][net.branch_from]))
    status = "optimal" if res.status == OPTIMAL else res.status
    return DispatchDecision(
        mode=mode, status=status, taps=dec["taps"], cb_units=dec["cb"], q_g=dec["q"],
        lam_lo=dec["duals"].get("lamlo", {}), lam_hi=dec["duals"].get("lamhi", {}),
        mu_lo=dec["duals"].get("mulo", {}), mu_hi=dec["duals"].get("muhi", {}),
        v_sq=dec["v"], P=dec["P"], Q=dec["Q"], l_sq=dec["l"], objective=dec["loss"],
        solve_time=time.perf_counter() - t0, eps=eps, relaxed=relaxed, bigM=M, nodes=res.nodes,
        gap=res.gap, warnings=warnings, period=forecast.period,
    )


class _FollowerLeaf:
    """Exact evaluation of a node whose device binaries are all integral.

    With the devices fixed the follower's response is unique (its Hessian is
    positive definite), so the node's best bilevel-feasible point is the
    network state under that response.  Payload: (fixed program, solution,
    follower solution).
    """

    def __init__(self, net, forecast, spec, prog):
        self.net, self.forecast, self.spec, self.prog = net, forecast, spec, prog
        self.cache: dict = {}
        self.idx = {name: k for k, name in enumerate(prog.names)}

    def __call__(self, lb, ub, sol):
        from .agents import solve_lower_central

        dec = _decode(self.net, self.prog, sol.z, "bilevel")
        key = (dec["taps"], dec["cb"])
        # the tuple is pinned once each one-hot group's chosen setting has lb = 1
        determined = all(lb[self.idx[name]] == 1.0 for name in self._chosen(key))
        if key not in self.cache:
            taps, cb = key
            low = solve_lower_central(self.net.with_devices(taps, cb), self.forecast.instant(taps, cb), self.spec)
            out = (math.inf, None)
            if low.feasible:
                fprog, fsol = evaluate_fixed(self.net, self.forecast, taps, cb, low.q)
                if fsol.status == OPTIMAL:
                    out = (_decode(self.net, fprog, fsol.z, "bilevel")["loss"], (fprog, fsol, low))
            self.cache[key] = out
        return (*self.cache[key], determined)

    @staticmethod
    def _chosen(key):
        taps, cb = key
        return [f"w[oltc{k},{n}]" for k, n in enumerate(taps)] + [f"c[cb{k},{m}]" for k, m in enumerate(cb)]


def _result_state(net, prog, res: BnbResult, mode: str) -> dict:
    if res.payload is None:
        return _decode(net, prog, res.solution.z, mode)
    fprog, fsol, low = res.payload
    dec = _decode(net, fprog, fsol.z, mode)
    dec["duals"] = low.duals_by_bus(net)
    return dec


@dataclass
class _Flows:
    l_sq: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    v_from: np.ndarray


def dispatch_period(net: Network, forecast: PeriodForecast, lower_spec: LowerObjectiveSpec | None = None,
                    cfg: DispatchConfig | None = None) -> DispatchDecision:
    """Bilevel dispatch of one period via the single-level MISOCP."""
    return _solve_mode(net, forecast, lower_spec or LowerObjectiveSpec(), cfg or DispatchConfig(), "bilevel")


def dispatch_model1(net: Network, forecast: PeriodForecast, cfg: DispatchConfig | None = None) -> DispatchDecision:
    """Baseline: inverter outputs are upper-level decisions."""
    return _solve_mode(net, forecast, LowerObjectiveSpec(), cfg or DispatchConfig(), "model1")


def dispatch_model2(net: Network, forecast: PeriodForecast, cfg: DispatchConfig | None = None) -> DispatchDecision:
    """Baseline: inverters treated as plain load nodes (no reactive output)."""
    return _solve_mode(net, forecast, LowerObjectiveSpec(), cfg or DispatchConfig(), "model2")


def dispatch(net, forecast, mode: str, lower_spec=None, cfg=None) -> DispatchDecision:
    if mode == "bilevel":
        return dispatch_period(net, forecast, lower_spec, cfg)
    if mode == "model1":
        return dispatch_model1(net, forecast, cfg)
    if mode == "model2":
        return dispatch_model2(net, forecast, cfg)
    raise ValueError(f"unknown mode {mode!r}")


# -- enumeration oracle -------------------------------------------------------------------

def device_tuples(net: Network, forecast: PeriodForecast) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    tap_sets = [list(o.window(t)) for o, t in zip(net.oltcs, forecast.prev_taps)]
    cb_sets = [list(c.window(n)) for c, n in zip(net.capbanks, forecast.prev_cb)]
    return [(tuple(t), tuple(c)) for t in itertools.product(*tap_sets) for c in itertools.product(*cb_sets)]


def evaluate_fixed(net: Network, forecast: PeriodForecast, taps, cb, q: np.ndarray):
    """Conic continuous model with devices and inverter outputs fixed; returns the SOCP solution."""
    prog = build_single_level(net, forecast, None, mode="model1", fixed_devices=(taps, cb), fixed_q=q)
    return prog, solve_socp(prog)


def enumerate_bilevel(
    net: Network,
    forecast: PeriodForecast,
    lower_spec: LowerObjectiveSpec | None = None,
    *,
    cap: int = 10_000,
    tie_rel: float = 1e-7,
) -> DispatchDecision:
    """Exact bilevel oracle: enumerate admissible device tuples, solve the follower
    centrally for each, and evaluate the leader's loss with the follower fixed."""
    from .agents import solve_lower_central

    lower_spec = lower_spec or LowerObjectiveSpec()
    forecast.validate(net)
    t0 = time.perf_counter()
    tuples = device_tuples(net, forecast)
    if len(tuples) > cap:
        raise DispatchError(f"{len(tuples)} device tuples exceed the enumeration cap {cap}", kind="usage")
    best = None
    for taps, cb in tuples:
        if net.pv_units:
            low = solve_lower_central(net.with_devices(taps, cb), forecast.instant(taps, cb), lower_spec)
            if not low.feasible:
                continue
            q = low.q
        else:
            low, q = None, np.zeros(0)
        prog, sol = evaluate_fixed(net, forecast, taps, cb, q)
        if sol.status != OPTIMAL:
            continue
        dec = _decode(net, prog, sol.z, "bilevel")
        moves = sum(abs(a - b) for a, b in zip(taps, forecast.prev_taps)) + \
            sum(abs(a - b) for a, b in zip(cb, forecast.prev_cb))
        key = (dec["loss"], moves, taps, cb)
        if best is None or _better(key, best[0], tie_rel):
            best = (key, dec, low)
    if best is None:
        raise DispatchError("no admissible device tuple yields a feasible follower and network state")
    (_, _, taps, cb), dec, low = best
    eps = relaxation_gap(_Flows(dec["l"], dec["P"], dec["Q"], dec["v"][net.branch_from]))
    duals = low.duals_by_bus(net) if low is not None else {"lamlo": {}, "lamhi": {}, "mulo": {}, "muhi": {}}
    return DispatchDecision(
        mode="oracle", status="optimal", taps=taps, cb_units=cb, q_g=dec["q"],
        lam_lo=duals["lamlo"], lam_hi=duals["lamhi"], mu_lo=duals["mulo"], mu_hi=duals["muhi"],
        v_sq=dec["v"], P=dec["P"], Q=dec["Q"], l_sq=dec["l"], objective=dec["loss"],
        solve_time=time.perf_counter() - t0, eps=eps, nodes=len(tuples), period=forecast.period,
    )


def _better(key, ref, tie_rel) -> bool:
    """Lexicographic: loss (with relative tie band), then moves, then taps, then CB counts."""
    loss, ref_loss = key[0], ref[0]
    if loss < ref_loss - tie_rel * abs(ref_loss):
        return True
    if loss > ref_loss + tie_rel * abs(ref_loss):
        return False
    return key[1:] < ref[1:]


# -- diagnostics ---------------------------------------------------------------------------

def kkt_block_residual(net: Network, forecast: PeriodForecast, decision: DispatchDecision,
                       lower_spec: LowerObjectiveSpec | None = None) -> float:
    """Max residual of the follower's stationarity, feasibility, dual-sign and
    complementarity conditions at the decision's (q, v, duals)."""
    spec = lower_spec or LowerObjectiveSpec()
    qbar = forecast.q_box(net)
    pos = net.pv_bus_pos
    vmin, vmax = net.v_min_sq, net.v_max_sq
    worst = 0.0
    for fm in follower_models(net, spec, qbar):
        if not fm.members:
            continue
        q = decision.q_g[list(fm.members)]
        lam_hi = np.array([decision.lam_hi.get(net.pv_units[j].bus, 0.0) for j in fm.vset])
        lam_lo = np.array([decision.lam_lo.get(net.pv_units[j].bus, 0.0) for j in fm.vset])
        mu_hi = np.array([decision.mu_hi.get(net.pv_units[k].bus, 0.0) for k in fm.members])
        mu_lo = np.array([decision.mu_lo.get(net.pv_units[k].bus, 0.0) for k in fm.members])
        stat = fm.grad(q) + fm.sens.T @ (lam_hi - lam_lo) - mu_lo + mu_hi
        vv = decision.v_sq[pos[list(fm.vset)]]
        lo, hi = vmin[pos[list(fm.vset)]], vmax[pos[list(fm.vset)]]
        qb = qbar[list(fm.members)]
        terms = [np.abs(stat).max(initial=0.0),
                 np.maximum(lo - vv, 0).max(initial=0.0), np.maximum(vv - hi, 0).max(initial=0.0),
                 np.maximum(np.abs(q) - qb, 0).max(initial=0.0),
                 np.maximum(-np.r_[lam_hi, lam_lo, mu_hi, mu_lo], 0).max(initial=0.0),
                 np.abs(lam_hi * (hi - vv)).max(initial=0.0), np.abs(lam_lo * (vv - lo)).max(initial=0.0),
                 np.abs(mu_hi * (qb - q)).max(initial=0.0), np.abs(mu_lo * (q + qb)).max(initial=0.0)]
        worst = max(worst, max(float(t) for t in terms))
    return worst
