"""Radial feeder data model, per-unit handling and topology queries.

Networks are loaded from a JSON document (see ``docs/network_schema.md``) and
kept in per-unit on the system MVA/kV base.  Everything downstream indexes
buses by *position* (0..n-1); the original integer ids are kept for
presentation and file I/O.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, replace
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

SQRT3 = math.sqrt(3.0)


class NetworkError(ValueError):
    """Invalid feeder description (parse, topology or reference error)."""


@dataclass(frozen=True)
class Bus:
    id: int
    load_p: float
    load_q: float
    v_min_sq: float
    v_max_sq: float
    is_slack: bool = False


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    i_max_sq: float


@dataclass(frozen=True)
class Oltc:
    branch: int
    n_positions: int
    step: tuple[float, ...]
    max_move: int
    position: int
    step_pu: float = 0.00625

    @property
    def neutral(self) -> int:
        return (self.n_positions + 1) // 2

    def ratio_sq(self, position: int) -> float:
        if not 1 <= position <= self.n_positions:
            raise ValueError(f"tap position {position} outside 1..{self.n_positions}")
        return self.step[position - 1]

    def label(self, position: int) -> int:
        """Presentation label, e.g. -8..8 for a 17-position changer."""
        return position - self.neutral

    def window(self, previous: int) -> range:
        lo = max(1, previous - self.max_move)
        hi = min(self.n_positions, previous + self.max_move)
        return range(lo, hi + 1)


@dataclass(frozen=True)
class CapBank:
    bus: int
    n_units_total: int
    q_total: float
    max_move: int
    units_on: int = 0

    def injection(self, units_on: int) -> float:
        return units_on / self.n_units_total * self.q_total

    def window(self, previous: int) -> range:
        lo = max(0, previous - self.max_move)
        hi = min(self.n_units_total, previous + self.max_move)
        return range(lo, hi + 1)


@dataclass(frozen=True)
class PvUnit:
    bus: int
    s_rating: float
    p_rating: float
    cost_a: float = 1.0
    cost_b: float = 0.0
    cost_c: float = 0.0
    group: str = "1"


def q_limits(pv: PvUnit, p_now: float) -> tuple[float, float]:
    """Symmetric reactive capability box of an inverter producing ``p_now``."""
    if p_now < 0:
        raise ValueError(f"negative active output {p_now} at bus {pv.bus}")
    if p_now > pv.s_rating * (1 + 1e-12):
        raise ValueError(
            f"active output {p_now} exceeds inverter rating {pv.s_rating} at bus {pv.bus}"
        )
    q_max = math.sqrt(max(pv.s_rating**2 - p_now**2, 0.0))
    return -q_max, q_max


@dataclass(frozen=True)
class SensitivityMatrix:
    """Reactance-path sensitivity ``X_ij = 2 * sum of x over the shared root path``."""

    full: np.ndarray
    pv_index: np.ndarray

    @property
    def gg(self) -> np.ndarray:
        return self.full[np.ix_(self.pv_index, self.pv_index)]

    @property
    def lg(self) -> np.ndarray:
        mask = np.ones(self.full.shape[0], dtype=bool)
        mask[self.pv_index] = False
        return self.full[np.ix_(mask, self.pv_index)]

    @property
    def gl(self) -> np.ndarray:
        return self.lg.T

    @property
    def ll(self) -> np.ndarray:
        mask = np.ones(self.full.shape[0], dtype=bool)
        mask[self.pv_index] = False
        return self.full[np.ix_(mask, mask)]


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    oltcs: tuple[Oltc, ...] = ()
    capbanks: tuple[CapBank, ...] = ()
    pv_units: tuple[PvUnit, ...] = ()
    mva_base: float = 10.0
    kv_base: float = 12.66
    slack_voltage: float = 1.0
    comm_edges: tuple[tuple[int, int], ...] = ()
    name: str = "network"

    def __post_init__(self):
        _validate(self)
        if not self.comm_edges and len(self.pv_units) > 1:
            object.__setattr__(self, "comm_edges", tuple(build_comm_graph(self)))

    # -- indexing -----------------------------------------------------------
    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @cached_property
    def bus_pos(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @cached_property
    def slack(self) -> int:
        return next(k for k, b in enumerate(self.buses) if b.is_slack)

    @cached_property
    def bus_ids(self) -> np.ndarray:
        return np.array([b.id for b in self.buses])

    @cached_property
    def branch_to(self) -> np.ndarray:
        """Receiving-end bus position of every branch (branches point away from the slack)."""
        return np.array([self.bus_pos[br.to_bus] for br in self.branches])

    @cached_property
    def branch_from(self) -> np.ndarray:
        return np.array([self.bus_pos[br.from_bus] for br in self.branches])

    @cached_property
    def parent_branch(self) -> np.ndarray:
        """Branch feeding each bus (-1 for the slack)."""
        pb = -np.ones(self.n_bus, dtype=int)
        pb[self.branch_to] = np.arange(self.n_branch)
        return pb

    @cached_property
    def children(self) -> tuple[tuple[int, ...], ...]:
        """Outgoing branch indices per bus."""
        out: list[list[int]] = [[] for _ in range(self.n_bus)]
        for e, f in enumerate(self.branch_from):
            out[f].append(e)
        return tuple(tuple(c) for c in out)

    @cached_property
    def order(self) -> np.ndarray:
        """Branch indices in breadth-first order from the slack."""
        seq = []
        queue = deque([self.slack])
        while queue:
            b = queue.popleft()
            for e in self.children[b]:
                seq.append(e)
                queue.append(self.branch_to[e])
        return np.array(seq, dtype=int)

    @cached_property
    def r(self) -> np.ndarray:
        return np.array([br.r for br in self.branches])

    @cached_property
    def x(self) -> np.ndarray:
        return np.array([br.x for br in self.branches])

    @cached_property
    def load_p(self) -> np.ndarray:
        return np.array([b.load_p for b in self.buses])

    @cached_property
    def load_q(self) -> np.ndarray:
        return np.array([b.load_q for b in self.buses])

    @cached_property
    def v_min_sq(self) -> np.ndarray:
        return np.array([b.v_min_sq for b in self.buses])

    @cached_property
    def v_max_sq(self) -> np.ndarray:
        return np.array([b.v_max_sq for b in self.buses])

    @cached_property
    def pv_bus_pos(self) -> np.ndarray:
        return np.array([self.bus_pos[u.bus] for u in self.pv_units], dtype=int)

    @cached_property
    def path_incidence(self) -> np.ndarray:
        """``(n_bus, n_branch)`` 0/1 matrix: branch e lies on the slack->bus path."""
        m = np.zeros((self.n_bus, self.n_branch))
        for e in self.order:
            f, t = self.branch_from[e], self.branch_to[e]
            m[t] = m[f]
            m[t, e] = 1.0
        return m

    @cached_property
    def oltc_on_branch(self) -> dict[int, int]:
        return {o.branch: k for k, o in enumerate(self.oltcs)}

    def pv_groups(self) -> dict[str, list[int]]:
        """Group label -> indices into ``pv_units`` (insertion ordered)."""
        groups: dict[str, list[int]] = {}
        for k, u in enumerate(self.pv_units):
            groups.setdefault(u.group, []).append(k)
        return groups

    def device_state(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        return tuple(o.position for o in self.oltcs), tuple(c.units_on for c in self.capbanks)

    def with_groups(self, groups: Mapping[str, Iterable[int]]) -> "Network":
        """Copy with PV group labels reassigned; the communication graph is rebuilt."""
        label = {}
        for g, members in groups.items():
            for b in members:
                label[int(b)] = str(g)
        missing = [u.bus for u in self.pv_units if u.bus not in label]
        if missing:
            raise NetworkError(f"PV buses {missing} are not assigned to any group")
        extra = set(label) - {u.bus for u in self.pv_units}
        if extra:
            raise NetworkError(f"group members {sorted(extra)} are not PV buses")
        pv = tuple(replace(u, group=label[u.bus]) for u in self.pv_units)
        return replace(self, pv_units=pv, comm_edges=())

    def with_pv_units(self, pv_units: Sequence[PvUnit]) -> "Network":
        return replace(self, pv_units=tuple(pv_units), comm_edges=())

    def with_devices(self, taps: Sequence[int], units: Sequence[int]) -> "Network":
        oltcs = tuple(replace(o, position=int(p)) for o, p in zip(self.oltcs, taps))
        caps = tuple(replace(c, units_on=int(n)) for c, n in zip(self.capbanks, units))
        return replace(self, oltcs=oltcs, capbanks=caps)



def _validate(net: Network) -> None:
    slack = [b for b in net.buses if b.is_slack]
    if len(slack) != 1:
        raise NetworkError(f"expected exactly one slack bus, found {len(slack)}")
    ids = [b.id for b in net.buses]
    if len(set(ids)) != len(ids):
        raise NetworkError("duplicate bus ids")
    for b in net.buses:
        if not (0 < b.v_min_sq < b.v_max_sq):
            raise NetworkError(f"bus {b.id}: voltage bounds must satisfy 0 < v_min < v_max")
        if not (math.isfinite(b.load_p) and math.isfinite(b.load_q)):
            raise NetworkError(f"bus {b.id}: non-finite load")
    known = set(ids)
    for k, br in enumerate(net.branches):
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                raise NetworkError(f"branch {k} ({br.from_bus}-{br.to_bus}) references unknown bus {end}")
        if br.r < 0 or br.x < 0 or (br.r == 0 and br.x == 0):
            raise NetworkError(f"branch {k} ({br.from_bus}-{br.to_bus}): need r >= 0, x >= 0, not both zero")
        if br.i_max_sq <= 0:
            raise NetworkError(f"branch {k} ({br.from_bus}-{br.to_bus}): non-positive current limit")
    if len(net.branches) != len(net.buses) - 1:
        raise NetworkError(
            f"non-radial topology: {len(net.buses)} buses but {len(net.branches)} branches"
        )
    # orientation: every bus except the slack is the receiving end of exactly one branch
    seen = {slack[0].id}
    adj: dict[int, list[int]] = {i: [] for i in ids}
    for br in net.branches:
        adj[br.from_bus].append(br.to_bus)
    queue = deque([slack[0].id])
    while queue:
        b = queue.popleft()
        for c in adj[b]:
            if c in seen:
                raise NetworkError(f"non-radial topology: bus {c} reached twice")
            seen.add(c)
            queue.append(c)
    if seen != known:
        raise NetworkError(f"non-radial topology: buses {sorted(known - seen)} not reachable from the slack")
    for o in net.oltcs:
        if not 0 <= o.branch < len(net.branches):
            raise NetworkError(f"OLTC references missing branch {o.branch}")
        if o.n_positions < 1 or len(o.step) != o.n_positions:
            raise NetworkError(f"OLTC on branch {o.branch}: ratio table size mismatch")
        if any(b <= a for a, b in zip(o.step, o.step[1:])):
            raise NetworkError(f"OLTC on branch {o.branch}: ratio table not strictly increasing")
        if not 1 <= o.position <= o.n_positions:
            raise NetworkError(f"OLTC on branch {o.branch}: position {o.position} out of range")
    for c in net.capbanks:
        if c.bus not in known:
            raise NetworkError(f"capacitor bank references unknown bus {c.bus}")
        if not 0 <= c.units_on <= c.n_units_total:
            raise NetworkError(f"capacitor bank at bus {c.bus}: units_on out of range")
    pv_buses = [u.bus for u in net.pv_units]
    if len(set(pv_buses)) != len(pv_buses):
        raise NetworkError("more than one PV unit on a bus")
    for u in net.pv_units:
        if u.bus not in known:
            raise NetworkError(f"PV unit references unknown bus {u.bus}")
        if u.bus == slack[0].id:
            raise NetworkError("PV unit on the slack bus")
        if u.s_rating < u.p_rating:
            raise NetworkError(f"PV unit at bus {u.bus}: s_rating below p_rating")
        if u.cost_a <= 0:
            raise NetworkError(f"PV unit at bus {u.bus}: cost_a must be positive")
    pv_set = set(pv_buses)
    for i, j in net.comm_edges:
        if i not in pv_set or j not in pv_set:
            raise NetworkError(f"communication edge ({i}, {j}) touches a non-PV bus")
    if net.comm_edges:
        group_of = {u.bus: u.group for u in net.pv_units}
        for g in set(group_of.values()):
            members = [b for b, gg in group_of.items() if gg == g]
            if not _connected(members, net.comm_edges):
                raise NetworkError(f"communication graph of PV group '{g}' is not connected")


def _connected(nodes: Sequence[int], edges: Iterable[tuple[int, int]]) -> bool:
    if len(nodes) <= 1:
        return True
    node_set = set(nodes)
    adj: dict[int, set[int]] = {n: set() for n in nodes}
    for i, j in edges:
        if i in node_set and j in node_set:
            adj[i].add(j)
            adj[j].add(i)
    seen = {nodes[0]}
    stack = [nodes[0]]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(node_set)


# -- topology queries --------------------------------------------------------

def tree_path(net: Network, a: int, b: int) -> list[int]:
    """Bus positions on the unique tree path from position ``a`` to ``b`` (inclusive)."""
    def up(k):
        seq = [k]
        while net.parent_branch[k] >= 0:
            k = net.branch_from[net.parent_branch[k]]
            seq.append(k)
        return seq

    pa, pb = up(a), up(b)
    sb = set(pb)
    lca = next(k for k in pa if k in sb)
    left = pa[: pa.index(lca) + 1]
    right = pb[: pb.index(lca)]
    return left + right[::-1]


def build_comm_graph(net: Network) -> list[tuple[int, int]]:
    """Neighbor pairs of PV buses whose connecting path has no other PV bus of the same group."""
    out: list[tuple[int, int]] = []
    adj: list[list[int]] = [[] for _ in range(net.n_bus)]
    for f, t in zip(net.branch_from, net.branch_to):
        adj[f].append(t)
        adj[t].append(f)
    for members in net.pv_groups().values():
        pos = [net.bus_pos[net.pv_units[k].bus] for k in members]
        in_group = set(pos)
        for src in pos:
            seen = {src}
            stack = [src]
            while stack:
                k = stack.pop()
                for nb in adj[k]:
                    if nb in seen:
                        continue
                    seen.add(nb)
                    if nb in in_group:
                        if src < nb:
                            out.append((int(net.bus_ids[src]), int(net.bus_ids[nb])))
                    else:
                        stack.append(nb)
    return sorted(out)


def compute_x_matrix(net: Network) -> SensitivityMatrix:
    """Shared-path reactance matrix; exact symmetry by construction via the LCA."""
    cum = np.zeros(net.n_bus)
    depth = np.zeros(net.n_bus, dtype=int)
    for e in net.order:
        f, t = net.branch_from[e], net.branch_to[e]
        cum[t] = cum[f] + net.x[e]
        depth[t] = depth[f] + 1
    parent = np.full(net.n_bus, -1)
    parent[net.branch_to] = net.branch_from
    n = net.n_bus
    X = np.zeros((n, n))
    for i in range(n):
        anc = set()
        k = i
        while k >= 0:
            anc.add(k)
            k = parent[k]
        for j in range(i, n):
            k = j
            while k not in anc:
                k = parent[k]
            X[i, j] = X[j, i] = 2.0 * cum[k]
    return SensitivityMatrix(full=X, pv_index=net.pv_bus_pos.copy())


def is_positive_definite(m: np.ndarray) -> bool:
    if m.size == 0:
        return True
    return bool(np.linalg.eigvalsh(m).min() > 0)


# -- file I/O ----------------------------------------------------------------

def _z_base(mva: float, kv: float) -> float:
    return kv * kv / mva


def _i_base(mva: float, kv: float) -> float:
    return mva * 1000.0 / (SQRT3 * kv)


def _oltc_table(n_positions: int, step_pu: float) -> tuple[float, ...]:
    neutral = (n_positions + 1) // 2
    return tuple((1.0 + step_pu * (n - neutral)) ** 2 for n in range(1, n_positions + 1))


def network_from_dict(doc: Mapping) -> Network:
    """Build a validated per-unit Network from a parsed JSON document."""
    try:
        mva = float(doc.get("mva_base", 10.0))
        kv = float(doc.get("kv_base", 12.66))
        units = doc.get("units", "physical")
        if units not in ("physical", "pu"):
            raise NetworkError(f"unknown units '{units}'")
        phys = units == "physical"
        sbase_kw = mva * 1000.0
        zb, ib = _z_base(mva, kv), _i_base(mva, kv)
        vmin_d, vmax_d = float(doc.get("v_min", 0.95)), float(doc.get("v_max", 1.05))
        slack_id = int(doc["slack_bus"])
        buses = []
        for b in doc["buses"]:
            if phys:
                p, q = float(b.get("p_kw", 0.0)) / sbase_kw, float(b.get("q_kvar", 0.0)) / sbase_kw
            else:
                p, q = float(b.get("p", 0.0)), float(b.get("q", 0.0))
            buses.append(Bus(
                id=int(b["id"]), load_p=p, load_q=q,
                v_min_sq=float(b.get("v_min", vmin_d)) ** 2,
                v_max_sq=float(b.get("v_max", vmax_d)) ** 2,
                is_slack=int(b["id"]) == slack_id,
            ))
        branches = []
        for br in doc["branches"]:
            if phys:
                r, x = float(br["r_ohm"]) / zb, float(br["x_ohm"]) / zb
                imax = float(br.get("i_max_a", 1e6)) / ib
            else:
                r, x, imax = float(br["r"]), float(br["x"]), float(br.get("i_max", 1e3))
            branches.append(Branch(int(br["from"]), int(br["to"]), r, x, imax * imax))
        bkey = {(b.from_bus, b.to_bus): k for k, b in enumerate(branches)}
        oltcs = []
        for o in doc.get("oltcs", []):
            key = (int(o["from"]), int(o["to"]))
            if key not in bkey:
                raise NetworkError(f"OLTC references missing branch {key[0]}-{key[1]}")
            n = int(o.get("n_positions", 17))
            step = float(o.get("step_pu", 0.00625))
            oltcs.append(Oltc(
                branch=bkey[key], n_positions=n, step=_oltc_table(n, step),
                max_move=int(o.get("max_move", 3)), position=int(o.get("position", (n + 1) // 2)),
                step_pu=step,
            ))
        caps = []
        for c in doc.get("capbanks", []):
            qt = float(c["kvar_total"]) / sbase_kw if phys else float(c["q_total"])
            caps.append(CapBank(
                bus=int(c["bus"]), n_units_total=int(c.get("n_units", 3)), q_total=qt,
                max_move=int(c.get("max_move", 1)), units_on=int(c.get("units_on", 0)),
            ))
        pvs = []
        for u in doc.get("pv_units", []):
            if phys:
                p = float(u["p_kw"]) / sbase_kw
                s = float(u.get("s_kva", 1.1 * float(u["p_kw"]))) / sbase_kw
            else:
                p, s = float(u["p_rating"]), float(u.get("s_rating", 1.1 * float(u["p_rating"])))
            pvs.append(PvUnit(
                bus=int(u["bus"]), s_rating=s, p_rating=p,
                cost_a=float(u.get("cost_a", 1.0)), cost_b=float(u.get("cost_b", 0.0)),
                cost_c=float(u.get("cost_c", 0.0)), group=str(u.get("group", "1")),
            ))
        comm = tuple((int(i), int(j)) for i, j in doc.get("comm_edges", []))
    except NetworkError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkError(f"malformed network document: {exc!r}") from exc
    return Network(
        buses=tuple(buses), branches=tuple(branches), oltcs=tuple(oltcs),
        capbanks=tuple(caps), pv_units=tuple(pvs), mva_base=mva, kv_base=kv,
        slack_voltage=float(doc.get("slack_voltage", 1.0)), comm_edges=comm,
        name=str(doc.get("name", "network")),
    )


def network_to_dict(net: Network, units: str = "physical") -> dict:
    """Inverse of :func:`network_from_dict`; ``units`` is ``physical`` or ``pu``."""
    phys = units == "physical"
    sbase_kw = net.mva_base * 1000.0
    zb, ib = _z_base(net.mva_base, net.kv_base), _i_base(net.mva_base, net.kv_base)
    slack = net.buses[net.slack].id
    doc: dict = {
        "name": net.name, "mva_base": net.mva_base, "kv_base": net.kv_base,
        "units": units, "slack_bus": slack, "slack_voltage": net.slack_voltage,
    }
    buses = []
    for b in net.buses:
        d = {"id": b.id, "v_min": math.sqrt(b.v_min_sq), "v_max": math.sqrt(b.v_max_sq)}
        if phys:
            d.update(p_kw=b.load_p * sbase_kw, q_kvar=b.load_q * sbase_kw)
        else:
            d.update(p=b.load_p, q=b.load_q)
        buses.append(d)
    doc["buses"] = buses
    branches = []
    for br in net.branches:
        d = {"from": br.from_bus, "to": br.to_bus}
        if phys:
            d.update(r_ohm=br.r * zb, x_ohm=br.x * zb, i_max_a=math.sqrt(br.i_max_sq) * ib)
        else:
            d.update(r=br.r, x=br.x, i_max=math.sqrt(br.i_max_sq))
        branches.append(d)
    doc["branches"] = branches
    doc["oltcs"] = [
        {"from": net.branches[o.branch].from_bus, "to": net.branches[o.branch].to_bus,
         "n_positions": o.n_positions, "step_pu": o.step_pu, "max_move": o.max_move,
         "position": o.position}
        for o in net.oltcs
    ]
    caps = []
    for c in net.capbanks:
        d = {"bus": c.bus, "n_units": c.n_units_total, "max_move": c.max_move, "units_on": c.units_on}
        if phys:
            d["kvar_total"] = c.q_total * sbase_kw
        else:
            d["q_total"] = c.q_total
        caps.append(d)
    doc["capbanks"] = caps
    pvs = []
    for u in net.pv_units:
        d = {"bus": u.bus, "cost_a": u.cost_a, "cost_b": u.cost_b, "cost_c": u.cost_c, "group": u.group}
        if phys:
            d.update(p_kw=u.p_rating * sbase_kw, s_kva=u.s_rating * sbase_kw)
        else:
            d.update(p_rating=u.p_rating, s_rating=u.s_rating)
        pvs.append(d)
    doc["pv_units"] = pvs
    doc["comm_edges"] = [list(e) for e in net.comm_edges]
    return doc


def load_network(path: str | Path, groups: str | Path | Mapping | None = None) -> Network:
    """Read a network JSON file; optionally apply a PV group partition file or mapping."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"network file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise NetworkError(f"{path}: JSON parse error at line {exc.lineno}: {exc.msg}") from exc
    net = network_from_dict(doc)
    if groups is not None:
        net = net.with_groups(load_groups(groups))
    return net


def load_groups(src: str | Path | Mapping) -> dict[str, list[int]]:
    if isinstance(src, Mapping):
        doc = src
    else:
        doc = json.loads(Path(src).read_text())
    return {str(k): [int(b) for b in v] for k, v in doc.get("groups", doc).items()}


def bundled_path(name: str) -> Path:
    """Path of a bundled asset: ``ieee33.json``, ``ieee33_groups.json``, ``ieee123_backbone.json``."""
    return Path(str(resources.files("bilevel_vvc") / "data" / name))


def ieee33(groups: bool = False) -> Network:
    net = load_network(bundled_path("ieee33.json"))
    if groups:
        net = net.with_groups(load_groups(bundled_path("ieee33_groups.json")))
    return net


def ieee123() -> Network:
    return load_network(bundled_path("ieee123_backbone.json"))
