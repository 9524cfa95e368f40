"""Lower-level inverter coordination.

* :func:`solve_lower_central` - reference optimizer of the follower problem
  with voltages linearised as ``v = v0 + X (q - q0)`` about the latest plant
  solution, iterated until the linearisation point is a fixed point.
* :func:`run_distributed` - synchronous projected primal-dual rounds in which
  every inverter measures its voltage, updates its voltage multipliers,
  takes a projected gradient step and floods its multipliers to neighbours.
* :func:`run_consensus_equal_ratio` - leader integrates its voltage error into
  a utilization-ratio command that followers track by neighbour averaging.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .conic import OPTIMAL, ProgramBuilder, solve_socp
from .dispatcher import LowerObjectiveSpec, follower_models
from .grid import Network, compute_x_matrix, q_limits
from .powerflow import PfInput, PfSolution, solve_pf

log = logging.getLogger(__name__)


class AgentError(RuntimeError):
    """Distributed run failure (divergence or a broken communication graph)."""


# -- central reference solver ------------------------------------------------------------

@dataclass
class GroupQpResult:
    q: np.ndarray
    lam_lo: np.ndarray
    lam_hi: np.ndarray
    mu_lo: np.ndarray
    mu_hi: np.ndarray
    feasible: bool
    residual: float


def _psd_factor(H: np.ndarray) -> np.ndarray:
    """``L`` with ``L' L = H`` for a symmetric PSD ``H``."""
    try:
        return np.linalg.cholesky(H).T
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(H)
        return (V * np.sqrt(np.clip(w, 0.0, None))).T


def qp_kkt_residual(H, g, S, v0, q0, vlo, vhi, qb, res: GroupQpResult) -> float:
    q = res.q
    vv = v0 + S @ (q - q0)
    stat = 2.0 * H @ q + g + S.T @ (res.lam_hi - res.lam_lo) - res.mu_lo + res.mu_hi
    terms = [
        np.abs(stat).max(initial=0.0),
        np.maximum(vlo - vv, 0).max(initial=0.0), np.maximum(vv - vhi, 0).max(initial=0.0),
        np.maximum(np.abs(q) - qb, 0).max(initial=0.0),
        np.abs(res.lam_hi * (vhi - vv)).max(initial=0.0), np.abs(res.lam_lo * (vv - vlo)).max(initial=0.0),
        np.abs(res.mu_hi * (qb - q)).max(initial=0.0), np.abs(res.mu_lo * (q + qb)).max(initial=0.0),
    ]
    return float(max(terms))


def solve_group_qp(H, g, S, v0, q0, vlo, vhi, qb, *, soft_penalty: float = 1e4) -> GroupQpResult:
    """``min q'Hq + g'q  s.t.  vlo <= v0 + S (q - q0) <= vhi,  |q| <= qb``.

    Solved by the conic IPM (rotated-cone epigraph) and polished on the
    identified active set.  When the voltage band is unreachable inside the
    boxes, returns the least-violation point (penalised slacks) with
    ``feasible = False``.
    """
    n, m = len(g), len(vlo)
    if n == 0:
        z = np.zeros(0)
        vv = np.asarray(v0, float)
        ok = bool(np.all(vv >= vlo - 1e-12) and np.all(vv <= vhi + 1e-12))
        return GroupQpResult(z, np.zeros(m), np.zeros(m), z, z, ok, 0.0)
    for soft in (False, True):
        sol, idx = _qp_socp(H, g, S, v0, q0, vlo, vhi, qb, soft, soft_penalty)
        if sol.status == OPTIMAL or (soft and sol.z is not None and np.all(np.isfinite(sol.z))):
            break
    q = sol.z[idx["q"]]
    c = S @ q0 - v0
    zi = sol.z_ineq
    res = GroupQpResult(q=q, lam_hi=zi[idx["hi"]].copy(), lam_lo=zi[idx["lo"]].copy(),
                        mu_hi=sol.z_ub[idx["q"]].copy(), mu_lo=sol.z_lb[idx["q"]].copy(),
                        feasible=not soft, residual=np.inf)
    if not soft:
        res = _polish(H, g, S, c, vlo, vhi, qb, res)
    res.residual = qp_kkt_residual(H, g, S, v0, q0, vlo, vhi, qb, res) if not soft else np.inf
    return res


def _qp_socp(H, g, S, v0, q0, vlo, vhi, qb, soft, penalty):
    n = len(g)
    Lf = _psd_factor(H)
    B = ProgramBuilder()
    q = [B.var(f"q{i}", -qb[i], qb[i]) for i in range(n)]
    t = B.var("t", 0.0)
    B.cost(t, 1.0)
    for i in range(n):
        B.cost(q[i], g[i])
    zs = []
    for r_ in range(Lf.shape[0]):
        zr = B.var(f"z{r_}")
        B.eq({zr: 1.0, **{q[i]: -2.0 * Lf[r_, i] for i in range(n) if Lf[r_, i]}}, 0.0)
        zs.append(zr)
    a = B.var("a")
    b = B.var("b", 0.0)
    B.eq({a: 1.0, t: -1.0}, -1.0)
    B.eq({b: 1.0, t: -1.0}, 1.0)
    B.cone(zs + [a], b)
    const = v0 - S @ q0
    hi_rows, lo_rows = [], []
    for j in range(len(vlo)):
        row = {q[i]: S[j, i] for i in range(n) if S[j, i]}
        if soft:
            sh = B.var(f"sh{j}", 0.0)
            sl = B.var(f"sl{j}", 0.0)
            B.cost(sh, penalty)
            B.cost(sl, penalty)
            hi_rows.append(B.le({**row, sh: -1.0}, vhi[j] - const[j]))
            lo_rows.append(B.le({**{k: -c for k, c in row.items()}, sl: -1.0}, const[j] - vlo[j]))
        else:
            hi_rows.append(B.le(row, vhi[j] - const[j]))
            lo_rows.append(B.le({k: -c for k, c in row.items()}, const[j] - vlo[j]))
    prog = B.build()
    sol = solve_socp(prog, tol=1e-10, max_iter=100)
    return sol, {"q": np.array(q), "hi": np.array(hi_rows, int), "lo": np.array(lo_rows, int)}


def _polish(H, g, S, c, vlo, vhi, qb, res: GroupQpResult) -> GroupQpResult:
    """Re-solve the KKT equations on the active set the IPM identified."""
    n = len(g)
    q = res.q
    vv = S @ q - c
    act_hi = np.flatnonzero(res.lam_hi > (vhi - vv))
    act_lo = np.flatnonzero(res.lam_lo > (vv - vlo))
    act_qh = np.flatnonzero(res.mu_hi > (qb - q))
    act_ql = np.flatnonzero(res.mu_lo > (q + qb))
    # unknowns: q, lam_hi[act], lam_lo[act], mu_hi[act], mu_lo[act]
    na = [len(act_hi), len(act_lo), len(act_qh), len(act_ql)]
    N = n + sum(na)
    K = np.zeros((N, N))
    rhs = np.zeros(N)
    K[:n, :n] = 2.0 * H
    rhs[:n] = -g
    col = n
    blocks = [(act_hi, S[act_hi], vhi[act_hi] + c[act_hi], 1.0),
              (act_lo, -S[act_lo], -(vlo[act_lo] + c[act_lo]), 1.0),
              (act_qh, np.eye(n)[act_qh], qb[act_qh], 1.0),
              (act_ql, -np.eye(n)[act_ql], qb[act_ql], 1.0)]
    for act, rows, b, _ in blocks:
        k = len(act)
        K[:n, col:col + k] = rows.T
        K[col:col + k, :n] = rows
        rhs[col:col + k] = b
        col += k
    sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    qn = sol[:n]
    mult = np.split(sol[n:], np.cumsum(na)[:-1]) if sum(na) else [np.zeros(0)] * 4
    vn = S @ qn - c
    ok = (np.all(vn <= vhi + 1e-11) and np.all(vn >= vlo - 1e-11) and np.all(np.abs(qn) <= qb + 1e-11)
          and all(np.all(mm >= -1e-10) for mm in mult))
    if not ok:
        return res
    out = GroupQpResult(q=np.clip(qn, -qb, qb), lam_lo=np.zeros(len(vlo)), lam_hi=np.zeros(len(vhi)),
                        mu_lo=np.zeros(n), mu_hi=np.zeros(n), feasible=True, residual=np.inf)
    out.lam_hi[act_hi] = np.maximum(mult[0], 0.0)
    out.lam_lo[act_lo] = np.maximum(mult[1], 0.0)
    out.mu_hi[act_qh] = np.maximum(mult[2], 0.0)
    out.mu_lo[act_ql] = np.maximum(mult[3], 0.0)
    return out


@dataclass
class LowerSolution:
    q: np.ndarray                 # per PV unit (net.pv_units order)
    lam_lo: np.ndarray            # per PV unit; zero where no voltage constraint applies
    lam_hi: np.ndarray
    mu_lo: np.ndarray
    mu_hi: np.ndarray
    v_sq: np.ndarray              # plant voltages at q
    feasible: bool
    iterations: int
    kkt_residual: float
    converged: bool
    pf: PfSolution | None = None
    constrained: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def duals_by_bus(self, net: Network) -> dict[str, dict[int, float]]:
        out = {"lamlo": {}, "lamhi": {}, "mulo": {}, "muhi": {}}
        for k, u in enumerate(net.pv_units):
            if self.constrained.size and self.constrained[k]:
                out["lamlo"][u.bus] = float(self.lam_lo[k])
                out["lamhi"][u.bus] = float(self.lam_hi[k])
            out["mulo"][u.bus] = float(self.mu_lo[k])
            out["muhi"][u.bus] = float(self.mu_hi[k])
        return out

    def ratios(self, qbar: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(qbar > 0, self.q / np.where(qbar > 0, qbar, 1.0), 0.0)


def instant_qbar(net: Network, pv_p: np.ndarray) -> np.ndarray:
    p = np.minimum(np.asarray(pv_p, float), [u.s_rating for u in net.pv_units])
    return np.array([q_limits(u, max(pk, 0.0))[1] for u, pk in zip(net.pv_units, p)])


def solve_lower_central(
    net: Network,
    instant: PfInput,
    spec: LowerObjectiveSpec | None = None,
    *,
    device_state: tuple[Sequence[int], Sequence[int]] | None = None,
    q0: np.ndarray | None = None,
    tol: float = 1e-10,
    max_outer: int = 100,
    X: np.ndarray | None = None,
) -> LowerSolution:
    """Follower optimum with voltages linearised about the plant solution.

    The linearisation point is refreshed from the plant until the inverter
    outputs change by less than ``tol``; at the fixed point the voltages in
    the constraints are the plant's own, and stationarity uses ``X`` as the
    voltage sensitivity.
    """
    spec = spec or LowerObjectiveSpec()
    if device_state is not None:
        instant = PfInput(load_p=instant.load_p, load_q=instant.load_q, pv_p=instant.pv_p,
                          taps=tuple(device_state[0]), cb_units=tuple(device_state[1]))
    inp = instant.resolved(net)
    npv = len(net.pv_units)
    qbar = instant_qbar(net, inp.pv_p)
    if X is None:
        X = compute_x_matrix(net).full
    models = follower_models(net, spec, qbar, X)
    pos = net.pv_bus_pos
    vmin, vmax = net.v_min_sq, net.v_max_sq
    q = np.zeros(npv) if q0 is None else np.clip(np.asarray(q0, float), -qbar, qbar)
    out = dict(lam_lo=np.zeros(npv), lam_hi=np.zeros(npv), mu_lo=np.zeros(npv), mu_hi=np.zeros(npv))
    constrained = np.zeros(npv, dtype=bool)
    for fm in models:
        constrained[list(fm.vset)] = True
    feasible = True
    converged = False
    residual = 0.0
    pf = None
    it = 0
    v_init = None
    for it in range(1, max_outer + 1):
        pf = solve_pf(net, PfInput(load_p=inp.load_p, load_q=inp.load_q, pv_p=inp.pv_p, pv_q=q,
                                   taps=inp.taps, cb_units=inp.cb_units), v_init=v_init)
        if not pf.converged:
            raise AgentError(f"plant did not converge while linearising the follower: {pf.message}")
        v_init = pf.v_sq
        q_new = np.zeros(npv)
        feasible = True
        residual = 0.0
        for fm in models:
            mem = list(fm.members)
            vs = list(fm.vset)
            r = solve_group_qp(fm.hess, fm.lin, fm.sens, pf.v_sq[pos[vs]], q[mem],
                               vmin[pos[vs]], vmax[pos[vs]], qbar[mem])
            q_new[mem] = r.q
            out["lam_lo"][vs] = r.lam_lo
            out["lam_hi"][vs] = r.lam_hi
            out["mu_lo"][mem] = r.mu_lo
            out["mu_hi"][mem] = r.mu_hi
            feasible &= r.feasible
            residual = max(residual, r.residual)
        step = float(np.abs(q_new - q).max(initial=0.0))
        q = q_new
        if step < tol:
            converged = True
            break
    pf = solve_pf(net, PfInput(load_p=inp.load_p, load_q=inp.load_q, pv_p=inp.pv_p, pv_q=q,
                               taps=inp.taps, cb_units=inp.cb_units), v_init=v_init)
    if not converged:
        log.warning("follower linearisation did not reach a fixed point in %d iterations", max_outer)
    return LowerSolution(q=q, v_sq=pf.v_sq, feasible=feasible, iterations=it, kkt_residual=residual,
                         converged=converged, pf=pf, constrained=constrained, **out)


# -- plant access ----------------------------------------------------------------------

class Plant:
    """Power-flow callback ``q -> PfSolution`` for one instant, warm-started between calls."""

    def __init__(self, net: Network, instant: PfInput):
        self.net = net
        self.inp = instant.resolved(net)
        self._v = None
        self.solves = 0

    def __call__(self, q: np.ndarray) -> PfSolution:
        inp = self.inp
        pf = solve_pf(self.net, PfInput(load_p=inp.load_p, load_q=inp.load_q, pv_p=inp.pv_p, pv_q=q,
                                        taps=inp.taps, cb_units=inp.cb_units), v_init=self._v)
        self.solves += 1
        if not pf.converged:
            raise AgentError(f"plant failed: {pf.message}")
        self._v = pf.v_sq
        return pf


# -- distributed rounds ----------------------------------------------------------------

@dataclass(frozen=True)
class RoundConfig:
    alpha: float = 2.0              # dual step (per p.u.^2 of violation)
    beta: float = 0.2               # primal step
    period: float = 0.5             # simulated seconds per round
    window: int = 10                # rounds of small moves that count as converged
    tol: float = 1e-4               # p.u. of output per round
    ratio_tol: float = 1e-6         # ratio moves per round (consensus mode)
    max_rounds: int = 2000
    delay: int = 0                  # extra rounds before a posted message is delivered
    noise: float = 0.0              # half-width of uniform noise on v_meas (p.u.^2)
    seed: int = 0
    divergence_window: int = 50

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("step sizes alpha and beta must be positive")
        if self.period <= 0 or self.window < 1 or self.max_rounds < 1 or self.delay < 0:
            raise ValueError("round period, window and max_rounds must be positive; delay >= 0")
        if self.tol <= 0 or self.ratio_tol <= 0 or self.noise < 0:
            raise ValueError("tol must be positive and noise non-negative")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "RoundConfig":
        return cls(**{k: doc[k] for k in cls.__dataclass_fields__ if k in doc})


@dataclass
class AgentMessage:
    sender: int                     # bus that forwarded it this round
    source: int                     # bus whose values it carries
    seq: int
    payload: dict[str, float]
    hops: int = 1


@dataclass
class AgentState:
    bus: int
    index: int                      # position in net.pv_units
    q_now: float
    q_box: tuple[float, float]
    v_meas: float = float("nan")
    lam_lo: float = 0.0
    lam_hi: float = 0.0
    ratio: float = 0.0
    seq: int = 0
    known: dict[int, tuple[int, dict[str, float]]] = field(default_factory=dict)
    inbox: list[AgentMessage] = field(default_factory=list)
    outbox: list[AgentMessage] = field(default_factory=list)

    def payload(self) -> dict[str, float]:
        return {"q": self.q_now, "lam_lo": self.lam_lo, "lam_hi": self.lam_hi, "ratio": self.ratio}

    def value(self, bus: int, key: str) -> float:
        if bus == self.bus:
            return self.payload()[key]
        entry = self.known.get(bus)
        return 0.0 if entry is None else entry[1][key]


@dataclass
class RoundRecord:
    round: int
    time: float
    q: np.ndarray
    v_meas: np.ndarray
    lam_lo: np.ndarray
    lam_hi: np.ndarray
    ratio: np.ndarray


@dataclass
class DistributedResult:
    q: np.ndarray
    lam_lo: np.ndarray
    lam_hi: np.ndarray
    rounds: int
    converged: bool
    trajectory: list[RoundRecord]
    agents: list[AgentState]
    pf: PfSolution | None = None

    def ratios(self) -> np.ndarray:
        return np.array([a.ratio for a in self.agents])


def write_trajectory(result: DistributedResult, path: str | Path, buses: Sequence[int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["round", "time"]
        for key in ("q", "v_meas", "lam_lo", "lam_hi", "ratio"):
            cols += [f"{key}[{b}]" for b in buses]
        w.writerow(cols)
        for r in result.trajectory:
            w.writerow([r.round, r.time, *map(repr, np.concatenate([r.q, r.v_meas, r.lam_lo, r.lam_hi, r.ratio]))])


class _Mesh:
    """Neighbour-only flooding with per-source sequence numbers and fixed delivery delay."""

    def __init__(self, agents: list[AgentState], edges: Sequence[tuple[int, int]], delay: int):
        self.by_bus = {a.bus: a for a in agents}
        self.nbrs: dict[int, list[int]] = {a.bus: [] for a in agents}
        for a, b in edges:
            if a in self.nbrs and b in self.nbrs:
                self.nbrs[a].append(b)
                self.nbrs[b].append(a)
        self.delay = delay
        self.pending: dict[int, list[tuple[int, AgentMessage]]] = {}
        self.hop_cap = max(len(agents), 1)

    def post(self, now: int) -> None:
        """Ship every outbox to the sender's neighbours for delivery after the delay."""
        due = now + 1 + self.delay
        for a in self.by_bus.values():
            for msg in a.outbox:
                for nb in self.nbrs[a.bus]:
                    if nb != msg.source:
                        fwd = AgentMessage(a.bus, msg.source, msg.seq, dict(msg.payload), msg.hops)
                        self.pending.setdefault(due, []).append((nb, fwd))
            a.outbox = []

    def deliver(self, now: int) -> None:
        for dest, msg in self.pending.pop(now, []):
            self.by_bus[dest].inbox.append(msg)

    def absorb(self, a: AgentState) -> None:
        """Keep the newest value per source and queue it for forwarding."""
        for msg in a.inbox:
            if not all(np.isfinite(v) for v in msg.payload.values()):
                raise AgentError(f"agent {a.bus}: non-finite payload from {msg.source}")
            old = a.known.get(msg.source)
            if msg.source == a.bus or (old is not None and old[0] >= msg.seq):
                continue
            a.known[msg.source] = (msg.seq, msg.payload)
            if msg.hops < self.hop_cap:
                a.outbox.append(AgentMessage(a.bus, msg.source, msg.seq, msg.payload, msg.hops + 1))
        a.inbox = []

    def publish(self, a: AgentState) -> None:
        a.seq += 1
        a.outbox.append(AgentMessage(a.bus, a.bus, a.seq, a.payload(), 1))


def _comm_edges(net: Network, spec: LowerObjectiveSpec) -> list[tuple[int, int]]:
    if spec.groups is None:
        return list(net.comm_edges)
    return list(net.with_groups(spec.groups).comm_edges)


def _check_connected(groups: Mapping[str, Sequence[int]], net: Network, edges) -> None:
    from .grid import _connected
    for g, members in groups.items():
        buses = [net.pv_units[k].bus for k in members]
        if len(buses) > 1 and not _connected(buses, [e for e in edges if e[0] in buses and e[1] in buses]):
            raise AgentError(f"communication graph of PV group {g!r} is not connected")


class _Controller:
    """Shared round bookkeeping for the two inverter protocols."""

    def __init__(self, net: Network, spec: LowerObjectiveSpec, cfg: RoundConfig,
                 qbar: np.ndarray, q0: np.ndarray | None = None, X: np.ndarray | None = None):
        self.net, self.spec, self.cfg = net, spec, cfg
        self.X = compute_x_matrix(net).full if X is None else X
        self.groups = spec.group_members(net)
        edges = _comm_edges(net, spec)
        _check_connected(self.groups, net, edges)
        qbar = np.asarray(qbar, float)
        q0 = np.zeros(len(net.pv_units)) if q0 is None else np.clip(np.asarray(q0, float), -qbar, qbar)
        self.agents = [AgentState(bus=u.bus, index=k, q_now=float(q0[k]), q_box=(-qbar[k], qbar[k]))
                       for k, u in enumerate(net.pv_units)]
        self.mesh = _Mesh(self.agents, edges, cfg.delay)
        self.rng = np.random.default_rng(cfg.seed)
        self.round = 0
        self.time = 0.0
        self.trajectory: list[RoundRecord] = []
        self._quiet = 0
        self._norms: list[float] = []
        self.pf: PfSolution | None = None
        for a in self.agents:
            self.mesh.publish(a)

    @property
    def q(self) -> np.ndarray:
        return np.array([a.q_now for a in self.agents])

    def set_boxes(self, qbar: np.ndarray) -> None:
        """Refresh capability boxes (PV output changed); outputs are re-clipped."""
        for a, qb in zip(self.agents, qbar):
            a.q_box = (-float(qb), float(qb))
            a.q_now = float(np.clip(a.q_now, -qb, qb))

    def measure(self, plant: Callable[[np.ndarray], PfSolution]) -> np.ndarray:
        pf = plant(self.q)
        self.pf = pf
        v = pf.v_sq[self.net.pv_bus_pos].copy()
        if self.cfg.noise:
            v += self.rng.uniform(-self.cfg.noise, self.cfg.noise, size=v.shape)
        for a, vv in zip(self.agents, v):
            a.v_meas = float(vv)
        return v

    def exchange(self) -> None:
        self.mesh.post(self.round)
        self.mesh.deliver(self.round + 1)
        for a in self.agents:
            self.mesh.absorb(a)

    def signal(self) -> np.ndarray:
        """Quantity whose per-round moves decide convergence."""
        return self.q

    @property
    def tolerance(self) -> float:
        return self.cfg.tol

    def finish_round(self, before: np.ndarray) -> float:
        q = self.q
        for a in self.agents:
            lo, hi = a.q_box
            assert lo - 1e-12 <= a.q_now <= hi + 1e-12, f"agent {a.bus} left its box"
        self.round += 1
        self.time = self.round * self.cfg.period
        self.trajectory.append(RoundRecord(
            self.round, self.time, q, np.array([a.v_meas for a in self.agents]),
            np.array([a.lam_lo for a in self.agents]), np.array([a.lam_hi for a in self.agents]),
            np.array([a.ratio for a in self.agents])))
        move = float(np.abs(self.signal() - before).max(initial=0.0))
        self._quiet = self._quiet + 1 if move < self.tolerance else 0
        self._watch_divergence()
        return move

    def _watch_divergence(self) -> None:
        state = np.array([[a.q_now, a.lam_lo, a.lam_hi, a.ratio] for a in self.agents])
        if not np.all(np.isfinite(state)):
            raise AgentError(f"non-finite agent state at round {self.round}; reduce alpha/beta "
                             f"(alpha={self.cfg.alpha}, beta={self.cfg.beta})")
        # outputs and ratios are boxed, so only the multipliers can run away
        self._norms.append(float(np.linalg.norm(state[:, 1:3])))
        w = self.cfg.divergence_window
        if len(self._norms) > w:
            tail = np.array(self._norms[-w - 1:])
            if np.all(np.diff(tail) > 0) and tail[-1] > 10.0 * max(tail[0], 1.0):
                raise AgentError(f"agent state grew for {w} consecutive rounds "
                                 f"(norm {tail[0]:.3g} -> {tail[-1]:.3g}); reduce alpha={self.cfg.alpha} "
                                 f"or beta={self.cfg.beta}")

    @property
    def quiet(self) -> int:
        """Consecutive rounds whose moves stayed below ``tol``."""
        return self._quiet

    @property
    def converged(self) -> bool:
        return self._quiet >= self.cfg.window

    def run(self, plant, rounds: int | None = None, stop_on_convergence: bool = True) -> DistributedResult:
        limit = self.cfg.max_rounds if rounds is None else rounds
        for _ in range(limit):
            self.step(plant)
            if stop_on_convergence and self.converged:
                break
        return self.result()

    def result(self) -> DistributedResult:
        return DistributedResult(
            q=self.q, lam_lo=np.array([a.lam_lo for a in self.agents]),
            lam_hi=np.array([a.lam_hi for a in self.agents]), rounds=self.round,
            converged=self.converged, trajectory=self.trajectory, agents=self.agents, pf=self.pf)


class PrimalDualController(_Controller):
    """Projected primal-dual rounds for the cost / loss / weighted objectives.

    Each agent knows its own row of the objective and of ``X``; everything it
    needs about other inverters (their outputs for the loss term, their
    voltage multipliers) comes from flooded messages.
    """

    def __init__(self, net, spec, cfg, qbar, q0=None, X=None):
        if spec.kind == "equal_ratio":
            raise ValueError("use ConsensusController for the equal_ratio objective")
        super().__init__(net, spec, cfg, qbar, q0, X)
        wc, wl = spec.cost_loss_weights
        pos = net.pv_bus_pos
        self.group_of = {k: g for g, mem in self.groups.items() for k in mem}
        self.rows = {}
        for a in self.agents:
            k = a.index
            u = net.pv_units[k]
            peers = [j for j in self.groups[self.group_of[k]]]
            xrow = np.array([self.X[pos[k], pos[j]] for j in peers])
            self.rows[k] = (peers, xrow, wc * u.cost_a**2, wc * u.cost_b, wl)

    def gradient(self, a: AgentState) -> float:
        peers, xrow, ca, cb, wl = self.rows[a.index]
        buses = [self.net.pv_units[j].bus for j in peers]
        qv = np.array([a.value(b, "q") for b in buses])
        lam = np.array([a.value(b, "lam_hi") - a.value(b, "lam_lo") for b in buses])
        return 2.0 * ca * a.q_now + cb + 2.0 * wl * (xrow @ qv) + xrow @ lam

    def step(self, plant) -> float:
        cfg = self.cfg
        before = self.signal()
        self.measure(plant)
        vmin, vmax = self.net.v_min_sq, self.net.v_max_sq
        pos = self.net.pv_bus_pos
        for a in self.agents:
            i = pos[a.index]
            a.lam_hi = max(0.0, a.lam_hi + cfg.alpha * (a.v_meas - vmax[i]))
            a.lam_lo = max(0.0, a.lam_lo + cfg.alpha * (vmin[i] - a.v_meas))
        grads = [self.gradient(a) for a in self.agents]
        for a, g in zip(self.agents, grads):
            lo, hi = a.q_box
            a.q_now = float(np.clip(a.q_now - cfg.beta * g, lo, hi))
            a.ratio = a.q_now / hi if hi > 0 else 0.0
            self.mesh.publish(a)
        self.exchange()
        return self.finish_round(before)


class ConsensusController(_Controller):
    """Leader-follower utilization-ratio consensus (equal_ratio objective).

    The leader of each group runs dual ascent on its voltage band and sets
    ``u = clip(xi_lo - xi_hi, -1, 1)``; followers move their ratio estimate
    to the average of their own and their neighbours' latest estimates.
    """

    def __init__(self, net, spec, cfg, qbar, q0=None, X=None):
        super().__init__(net, spec, cfg, qbar, q0, X)
        self.leaders = set(spec.leaders(net).values())
        self.nbrs = self.mesh.nbrs
        for a in self.agents:
            hi = a.q_box[1]
            a.ratio = a.q_now / hi if hi > 0 else 0.0

    def signal(self) -> np.ndarray:
        # neighbour averaging lags the leader by many rounds, so small output
        # moves do not yet mean agreement; judge convergence on the ratios
        return np.array([a.ratio for a in self.agents])

    @property
    def tolerance(self) -> float:
        return self.cfg.ratio_tol

    def step(self, plant) -> float:
        cfg = self.cfg
        before = self.signal()
        self.measure(plant)
        vmin, vmax = self.net.v_min_sq, self.net.v_max_sq
        pos = self.net.pv_bus_pos
        new = {}
        for a in self.agents:
            if a.index in self.leaders:
                i = pos[a.index]
                # u only sees the multipliers through clip(., -1, 1); capping them at 1
                # stops wind-up while the leader sits saturated
                a.lam_hi = min(max(0.0, a.lam_hi + cfg.alpha * (a.v_meas - vmax[i])), 1.0)
                a.lam_lo = min(max(0.0, a.lam_lo + cfg.alpha * (vmin[i] - a.v_meas)), 1.0)
                new[a.bus] = float(np.clip(a.lam_lo - a.lam_hi, -1.0, 1.0))
            else:
                vals = [a.ratio] + [a.value(b, "ratio") for b in self.nbrs[a.bus] if b in a.known]
                new[a.bus] = float(np.mean(vals))
        for a in self.agents:
            a.ratio = new[a.bus]
            hi = a.q_box[1]
            a.q_now = float(np.clip(a.ratio * hi, -hi, hi))
            self.mesh.publish(a)
        self.exchange()
        return self.finish_round(before)


def make_controller(net, spec, cfg, qbar, q0=None, X=None) -> _Controller:
    cls = ConsensusController if spec.kind == "equal_ratio" else PrimalDualController
    return cls(net, spec, cfg, qbar, q0, X)


def run_distributed(net: Network, plant: Callable[[np.ndarray], PfSolution], spec: LowerObjectiveSpec | None,
                    cfg: RoundConfig | None = None, *, qbar: np.ndarray | None = None,
                    q0: np.ndarray | None = None) -> DistributedResult:
    """Run projected primal-dual rounds against ``plant`` until converged or ``max_rounds``.

    ``qbar`` defaults to the capability boxes of the plant's PV outputs.
    """
    spec = spec or LowerObjectiveSpec()
    cfg = cfg or RoundConfig()
    if qbar is None:
        qbar = _plant_qbar(net, plant)
    ctl = PrimalDualController(net, spec, cfg, qbar, q0)
    return ctl.run(plant)


def run_consensus_equal_ratio(net: Network, plant: Callable[[np.ndarray], PfSolution],
                              leader: int | Mapping[str, int], cfg: RoundConfig | None = None, *,
                              groups: Mapping[str, Sequence[int]] | None = None,
                              qbar: np.ndarray | None = None, q0: np.ndarray | None = None) -> DistributedResult:
    """Leader-follower ratio consensus; ``leader`` is a PV bus (or group -> bus mapping)."""
    spec = LowerObjectiveSpec(kind="equal_ratio", leader=leader, groups=groups)
    cfg = cfg or RoundConfig()
    if qbar is None:
        qbar = _plant_qbar(net, plant)
    ctl = ConsensusController(net, spec, cfg, qbar, q0)
    return ctl.run(plant)


def _plant_qbar(net: Network, plant) -> np.ndarray:
    inp = getattr(plant, "inp", None)
    if inp is None:
        raise ValueError("qbar is required when the plant does not expose its PfInput")
    return instant_qbar(net, inp.pv_p)


# -- objective gradients ---------------------------------------------------------------

def cost_gradient(net: Network, q: np.ndarray) -> np.ndarray:
    """Gradient of sum_i a_i^2 q_i^2 + b_i q_i + c_i."""
    a = np.array([u.cost_a for u in net.pv_units])
    b = np.array([u.cost_b for u in net.pv_units])
    return 2.0 * a**2 * q + b


def loss_gradient(net: Network, q: np.ndarray, X: np.ndarray | None = None) -> np.ndarray:
    """Gradient of q' X_gg q."""
    X = compute_x_matrix(net).gg if X is None else X
    return 2.0 * X @ q


def equal_ratio_gradient(net: Network, q: np.ndarray, qbar: np.ndarray, leader: int) -> np.ndarray:
    """Gradient of sum_i X_li q_i^2 / (2 qbar_i) for leader PV index ``leader``."""
    X = compute_x_matrix(net).full
    pos = net.pv_bus_pos
    xl = X[pos[leader], pos]
    return xl * q / qbar


def lower_objective(net: Network, spec: LowerObjectiveSpec, q: np.ndarray, qbar: np.ndarray) -> float:
    """Follower objective summed over groups (constant terms dropped)."""
    return float(sum(fm.value(q[list(fm.members)]) for fm in follower_models(net, spec, qbar)))
