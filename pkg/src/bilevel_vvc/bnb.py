"""Branch-and-bound over the binary variables of a :class:`ConicProgram`.

Best-first search on the relaxation bound with depth-first plunging: after a
node branches, the child on the rounding side of the branching variable is
processed immediately while it can still improve the incumbent, and its
sibling goes to the heap.  Integral relaxations are polished by re-solving
with every binary fixed, so incumbents are exactly integral.
"""

from __future__ import annotations

import csv
import heapq
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .conic import INFEASIBLE, ITERATION_LIMIT, OPTIMAL, UNBOUNDED, ConicProgram, ConicSolution, solve_socp

log = logging.getLogger(__name__)

BRANCHING_RULES = ("most-fractional",)
ABS_GAP = 1e-10


@dataclass(frozen=True)
class BnbConfig:
    gap_tol: float = 1e-6          # relative
    node_limit: int = 100_000
    int_tol: float = 1e-6
    branching: str = "most-fractional"
    time_limit: float | None = None
    socp_tol: float = 1e-8
    log_nodes: bool = False
    # accept relaxations that stop at the iteration cap if residuals are this small
    accept_residual: float = 1e-6

    def __post_init__(self):
        if not self.gap_tol > 0:
            raise ValueError("gap_tol must be positive")
        if self.node_limit < 1:
            raise ValueError("node_limit must be at least 1")
        if self.branching not in BRANCHING_RULES:
            raise ValueError(f"unknown branching rule {self.branching!r}; choose from {BRANCHING_RULES}")
        if not 0 < self.int_tol < 0.5:
            raise ValueError("int_tol must lie in (0, 0.5)")


@dataclass
class NodeRecord:
    node: int
    parent: int
    depth: int
    bound: float           # parent-clamped relaxation bound
    relaxation: float      # raw relaxation objective (nan if not solved to optimality)
    fractional: int
    status: str
    branch_var: int
    incumbent: float


@dataclass
class BnbResult:
    status: str                       # optimal | infeasible | node-limit | time-limit | unbounded
    solution: ConicSolution | None
    objective: float
    bound: float
    gap: float
    nodes: int
    node_log: list[NodeRecord] = field(default_factory=list)
    incumbent_history: list[tuple[int, float]] = field(default_factory=list)
    solve_time: float = 0.0
    socp_solves: int = 0
    unresolved: int = 0        # nodes whose relaxation did not converge
    dropped: int = 0           # unresolved nodes with nothing left to branch on
    payload: Any = None        # incumbent payload returned by a leaf evaluator

    @property
    def z(self) -> np.ndarray | None:
        return None if self.solution is None else self.solution.z


def write_node_log(result: BnbResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "parent", "depth", "bound", "relaxation", "fractional", "status", "branch_var", "incumbent"])
        for r in result.node_log:
            w.writerow([r.node, r.parent, r.depth, repr(r.bound), repr(r.relaxation), r.fractional,
                        r.status, r.branch_var, repr(r.incumbent)])


def _relative_gap(inc: float, bound: float) -> float:
    if not math.isfinite(inc):
        return math.inf
    return max(inc - bound, 0.0) / max(abs(inc), 1e-12)


class _Search:
    def __init__(self, prog: ConicProgram, cfg: BnbConfig):
        self.prog = prog
        self.cfg = cfg
        self.bins = np.asarray(prog.binary, dtype=int)
        self.prio = (np.asarray(prog.priority, dtype=int) if prog.priority.size
                     else np.zeros(self.bins.size, dtype=int))
        self.incumbent: ConicSolution | None = None
        self.payload: Any = None
        self.inc_obj = math.inf
        self.history: list[tuple[int, float]] = []
        self.log: list[NodeRecord] = []
        self.solves = 0
        self.unresolved = 0
        self.dropped = 0
        self.counter = 0
        self._last_id = 0

    def new_id(self) -> int:
        self._last_id += 1
        return self._last_id

    def relax(self, lb, ub) -> ConicSolution:
        self.solves += 1
        return solve_socp(self.prog.with_bounds(lb, ub), tol=self.cfg.socp_tol)

    def usable(self, sol: ConicSolution) -> bool:
        if sol.status == OPTIMAL:
            return True
        if sol.status == ITERATION_LIMIT:
            r = sol.kkt_residuals
            return max(r["primal"], r["dual"]) <= self.cfg.accept_residual
        return False

    def pick(self, z: np.ndarray) -> tuple[int, int]:
        """Branching variable (position in ``bins``) and fractional count; -1 if integral."""
        vals = z[self.bins]
        frac = np.minimum(np.abs(vals), np.abs(1.0 - vals))
        cand = np.flatnonzero(frac > self.cfg.int_tol)
        if cand.size == 0:
            return -1, 0
        score = np.round(frac[cand], 9)
        order = np.lexsort((self.bins[cand], self.prio[cand], -score))
        return int(cand[order[0]]), int(cand.size)

    def pick_free(self, lb: np.ndarray, ub: np.ndarray, z: np.ndarray) -> tuple[int, int]:
        """Branching choice when the relaxation is unreliable: most fractional free binary."""
        free = np.flatnonzero(lb[self.bins] < ub[self.bins])
        if free.size == 0:
            return -1, 0
        vals = np.nan_to_num(z[self.bins[free]], nan=0.5)
        frac = np.minimum(np.abs(vals), np.abs(1.0 - vals))
        order = np.lexsort((self.bins[free], self.prio[free], -np.round(frac, 9)))
        return int(free[order[0]]), int(free.size)

    def pick_open(self, lb: np.ndarray, ub: np.ndarray, z: np.ndarray) -> int:
        """Lowest-index free binary sitting at 1 (excludes the evaluated point), else any free one."""
        free = np.flatnonzero(lb[self.bins] < ub[self.bins])
        if free.size == 0:
            return -1
        on = free[np.round(z[self.bins[free]]) == 1.0]
        pool = on if on.size else free
        return int(pool[np.lexsort((self.bins[pool], self.prio[pool]))[0]])

    def try_incumbent(self, z: np.ndarray, lb: np.ndarray, ub: np.ndarray, node: int) -> None:
        """Fix the (integral) binaries and re-solve to obtain an exactly integral point."""
        lb = lb.copy()
        ub = ub.copy()
        vals = np.round(z[self.bins])
        lb[self.bins] = vals
        ub[self.bins] = vals
        sol = self.relax(lb, ub)
        if not self.usable(sol):
            log.debug("polish at node %d failed with status %s", node, sol.status)
            return
        if sol.objective < self.inc_obj:
            self.incumbent = sol
            self.inc_obj = sol.objective
            self.history.append((node, sol.objective))


LeafFn = Callable[[np.ndarray, np.ndarray, ConicSolution], "tuple[float, Any, bool]"]


def solve_misocp(prog: ConicProgram, cfg: BnbConfig | None = None, *,
                 branch_on: np.ndarray | None = None, leaf: LeafFn | None = None) -> BnbResult:
    """Minimise ``prog`` with its binaries enforced.

    ``branch_on`` restricts branching to a subset of ``prog.binary``; the
    remaining binaries stay relaxed.  When every branching binary is integral
    at a node, ``leaf(lb, ub, relaxation)`` (if given) evaluates that integral
    point exactly and returns ``(objective, payload, determined)``, with
    ``inf`` for an infeasible point.  ``determined`` says the bounds already
    pin the point, which closes the node; otherwise the search keeps
    branching below it.  Without ``leaf`` an integral node is polished by
    fixing its binaries and re-solving.

    With no binaries this is a single conic solve.  Statuses: ``optimal``
    (gap within ``cfg.gap_tol``), ``infeasible`` (no integral leaf),
    ``node-limit`` / ``time-limit`` (incumbent and bound as reached),
    ``unbounded`` (root relaxation unbounded) and ``incomplete`` (the search
    ended but a relaxation failed with nothing left to branch on, so the
    result is unproven).
    """
    cfg = cfg or BnbConfig()
    t0 = time.perf_counter()
    S = _Search(prog, cfg)
    if branch_on is not None:
        keep = np.isin(S.bins, np.asarray(branch_on, dtype=int))
        S.bins, S.prio = S.bins[keep], S.prio[keep]
    lb0 = prog.lb.copy()
    ub0 = prog.ub.copy()
    if S.bins.size:
        lb0[S.bins] = np.maximum(lb0[S.bins], 0.0)
        ub0[S.bins] = np.minimum(ub0[S.bins], 1.0)

    def finish(status, bound):
        gap = _relative_gap(S.inc_obj, bound)
        if status == OPTIMAL and S.dropped:
            # a subtree was lost to solver failure, so neither claim is proven
            status = "incomplete"
        elif status == OPTIMAL and S.incumbent is None:
            status = INFEASIBLE
        return BnbResult(
            status=status, solution=S.incumbent, objective=S.inc_obj, bound=bound, gap=gap,
            nodes=S.counter, node_log=S.log, incumbent_history=S.history,
            solve_time=time.perf_counter() - t0, socp_solves=S.solves,
            unresolved=S.unresolved, dropped=S.dropped, payload=S.payload,
        )

    def gap_closed(bound: float) -> bool:
        if not math.isfinite(S.inc_obj):
            return False
        return S.inc_obj - bound <= max(cfg.gap_tol * abs(S.inc_obj), ABS_GAP)

    # heap entries: (bound, node_id, depth, parent, lb, ub)
    heap: list = []
    heapq.heappush(heap, (-math.inf, 0, 0, -1, lb0, ub0))
    stack: list = []          # plunge candidate processed before the heap
    status = OPTIMAL
    root_unbounded = False
    while heap or stack:
        if S.counter >= cfg.node_limit:
            status = "node-limit"
            break
        if cfg.time_limit is not None and time.perf_counter() - t0 > cfg.time_limit:
            status = "time-limit"
            break
        if stack:
            bound, nid, depth, parent, lb, ub = stack.pop()
        else:
            bound, nid, depth, parent, lb, ub = heapq.heappop(heap)
        if gap_closed(bound):
            continue
        S.counter += 1
        sol = S.relax(lb, ub)
        rec = NodeRecord(node=nid, parent=parent, depth=depth, bound=bound, relaxation=math.nan,
                         fractional=0, status=sol.status, branch_var=-1, incumbent=S.inc_obj)
        if sol.status == UNBOUNDED and depth == 0:
            root_unbounded = True
            S.log.append(rec)
            break
        if sol.status == INFEASIBLE:
            S.log.append(rec)
            continue
        if S.usable(sol):
            rec.relaxation = sol.objective
            node_bound = max(sol.objective, bound)
            k, nfrac = S.pick(sol.z)
        else:
            # unreliable relaxation: keep the parent bound and split on a free binary
            node_bound = bound
            k, nfrac = S.pick_free(lb, ub, sol.z)
            S.unresolved += 1
            if k < 0:
                log.warning("node %d: relaxation ended with status %s and no free binary is left; "
                            "node dropped (residuals %s)", nid, sol.status, sol.kkt_residuals)
                rec.status = "failed"
                S.dropped += 1
                S.log.append(rec)
                continue
            log.warning("node %d: relaxation ended with status %s; branching without a new bound",
                        nid, sol.status)
        rec.bound = node_bound
        if gap_closed(node_bound):
            rec.status = "pruned"
            S.log.append(rec)
            continue
        rec.fractional = nfrac
        if k < 0 and leaf is not None:
            S.solves += 1
            value, payload, determined = leaf(lb, ub, sol)
            if value < S.inc_obj:
                S.inc_obj, S.payload, S.incumbent = float(value), payload, sol
                S.history.append((nid, S.inc_obj))
            rec.incumbent = S.inc_obj
            # integral but not pinned: other settings in this subtree are still open
            k = -1 if determined else S.pick_open(lb, ub, sol.z)
            if k < 0 or gap_closed(node_bound):
                rec.status = "leaf"
                S.log.append(rec)
                continue
        if k < 0:
            S.try_incumbent(sol.z, lb, ub, nid)
            rec.status = "integral"
            rec.incumbent = S.inc_obj
            S.log.append(rec)
            continue
        var = int(S.bins[k])
        rec.branch_var = var
        rec.status = "branched"
        S.log.append(rec)
        val = sol.z[var]
        lb_up, ub_up = lb.copy(), ub.copy()
        lb_up[var] = 1.0
        lb_dn, ub_dn = lb.copy(), ub.copy()
        ub_dn[var] = 0.0
        up_first = val >= 0.5
        children = [(lb_up, ub_up), (lb_dn, ub_dn)] if up_first else [(lb_dn, ub_dn), (lb_up, ub_up)]
        stack.append((node_bound, S.new_id(), depth + 1, nid, *children[0]))
        heapq.heappush(heap, (node_bound, S.new_id(), depth + 1, nid, *children[1]))

    if root_unbounded:
        return finish(UNBOUNDED, -math.inf)
    if status == OPTIMAL:
        bound = S.inc_obj if S.incumbent is not None else math.inf
        return finish(OPTIMAL, bound)
    open_bounds = [e[0] for e in heap] + [e[0] for e in stack]
    bound = min(open_bounds) if open_bounds else S.inc_obj
    bound = min(bound, S.inc_obj)
    return finish(status, bound)

