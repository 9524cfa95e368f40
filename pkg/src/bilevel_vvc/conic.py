"""Sparse second-order cone programs and a primal-dual interior-point solver.

Problem form (``ConicProgram``)::

    minimize    c @ z + c0
    subject to  A z == b
                G z <= h
                lb <= z <= ub
                ||z[k_1..k_{m-1}]||_2 <= z[k_m]   for every cone (k_1, ..., k_m)

Variables listed in ``binary`` must be 0/1; here they are relaxed to [0, 1]
(``bnb`` handles integrality).

Internally every inequality, bound and cone becomes a row of
``G' x + s = h'`` with ``s`` in the product of the nonnegative orthant and
second-order cones, and the homogeneous self-dual embedding is solved with
Mehrotra predictor-corrector steps under Nesterov-Todd scaling.  Each
iteration factors the quasi-definite reduced KKT matrix
``[[G'^T W^-2 G' + d I, A^T], [A, -d I]]`` once (SuperLU) and reuses it for
three right-hand sides with iterative refinement.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import reverse_cuthill_mckee

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration-limit"


class SingularKKTError(ArithmeticError):
    """The reduced KKT matrix could not be factored."""

    def __init__(self, message: str, pivot: int):
        super().__init__(message)
        self.pivot = pivot


# -- problem -----------------------------------------------------------------

@dataclass(frozen=True)
class ConicProgram:
    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    cones: tuple[tuple[int, ...], ...] = ()
    binary: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    c0: float = 0.0
    names: tuple[str, ...] = ()
    priority: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        n = self.c.shape[0]
        if self.A.shape[1] != n or self.G.shape[1] != n:
            raise ValueError("constraint matrices do not match the variable count")
        if self.A.shape[0] != self.b.shape[0] or self.G.shape[0] != self.h.shape[0]:
            raise ValueError("right-hand sides do not match the constraint counts")
        if self.lb.shape != (n,) or self.ub.shape != (n,):
            raise ValueError("bound vectors do not match the variable count")
        seen: set[int] = set()
        for cone in self.cones:
            if len(cone) < 2:
                raise ValueError(f"cone {cone} has dimension < 2")
            for k in cone:
                if not 0 <= k < n:
                    raise ValueError(f"cone index {k} out of range")
                if k in seen:
                    raise ValueError(f"variable {k} appears in more than one cone")
                seen.add(k)
        if self.binary.size and (self.binary.min() < 0 or self.binary.max() >= n):
            raise ValueError("binary index out of range")
        if self.priority.size and self.priority.shape != self.binary.shape:
            raise ValueError("priority must align with the binary index list")
        for arr in (self.c, self.b, self.h, self.lb, self.ub, self.binary, self.priority):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.c.shape[0]

    def with_bounds(self, lb: np.ndarray, ub: np.ndarray) -> "ConicProgram":
        return ConicProgram(
            c=self.c, A=self.A, b=self.b, G=self.G, h=self.h, lb=np.asarray(lb, float).copy(),
            ub=np.asarray(ub, float).copy(), cones=self.cones, binary=self.binary, c0=self.c0,
            names=self.names, priority=self.priority,
        )

    def with_objective(self, c: np.ndarray, c0: float | None = None) -> "ConicProgram":
        return ConicProgram(
            c=np.asarray(c, float).copy(), A=self.A, b=self.b, G=self.G, h=self.h, lb=self.lb,
            ub=self.ub, cones=self.cones, binary=self.binary,
            c0=self.c0 if c0 is None else c0, names=self.names, priority=self.priority,
        )

    def objective(self, z: np.ndarray) -> float:
        return float(self.c @ z + self.c0)

    def to_dict(self) -> dict:
        """Debug dump; matrices as COO triplets."""
        def coo(m):
            m = m.tocoo()
            return {"shape": list(m.shape), "row": m.row.tolist(), "col": m.col.tolist(), "val": m.data.tolist()}

        def fl(a):
            return [None if not math.isfinite(v) else float(v) for v in a]

        return {
            "n": self.n, "c": self.c.tolist(), "c0": self.c0, "A": coo(self.A), "b": self.b.tolist(),
            "G": coo(self.G), "h": self.h.tolist(), "lb": fl(self.lb), "ub": fl(self.ub),
            "cones": [list(c) for c in self.cones], "binary": self.binary.tolist(),
            "priority": self.priority.tolist(), "names": list(self.names),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ConicProgram":
        def mat(d):
            return sp.csr_matrix((d["val"], (d["row"], d["col"])), shape=tuple(d["shape"]))

        lb = np.array([-np.inf if v is None else v for v in doc["lb"]], float)
        ub = np.array([np.inf if v is None else v for v in doc["ub"]], float)
        return cls(
            c=np.array(doc["c"], float), A=mat(doc["A"]), b=np.array(doc["b"], float),
            G=mat(doc["G"]), h=np.array(doc["h"], float), lb=lb, ub=ub,
            cones=tuple(tuple(c) for c in doc["cones"]), binary=np.array(doc["binary"], int),
            c0=float(doc.get("c0", 0.0)), names=tuple(doc.get("names", ())),
            priority=np.array(doc.get("priority", []), int),
        )


def dump_program(prog: ConicProgram, path: str | Path) -> None:
    Path(path).write_text(json.dumps(prog.to_dict()))


def load_program(path: str | Path) -> ConicProgram:
    return ConicProgram.from_dict(json.loads(Path(path).read_text()))


class ProgramBuilder:
    """Incremental assembly of a :class:`ConicProgram` by named variables."""

    def __init__(self):
        self._names: list[str] = []
        self._lb: list[float] = []
        self._ub: list[float] = []
        self._c: dict[int, float] = {}
        self.c0 = 0.0
        self._eq: list[tuple[dict[int, float], float]] = []
        self._le: list[tuple[dict[int, float], float]] = []
        self._cones: list[tuple[int, ...]] = []
        self._binary: list[int] = []
        self._priority: list[int] = []
        self.index: dict[str, int] = {}

    @property
    def n(self) -> int:
        return len(self._names)

    def var(self, name: str, lb: float = -np.inf, ub: float = np.inf) -> int:
        if name in self.index:
            raise KeyError(f"duplicate variable {name}")
        k = len(self._names)
        self._names.append(name)
        self._lb.append(float(lb))
        self._ub.append(float(ub))
        self.index[name] = k
        return k

    def binary(self, name: str, priority: int = 0, fixed: int | None = None) -> int:
        lo, hi = (0.0, 1.0) if fixed is None else (float(fixed), float(fixed))
        k = self.var(name, lo, hi)
        self._binary.append(k)
        self._priority.append(priority)
        return k

    def set_bounds(self, k: int, lb: float | None = None, ub: float | None = None) -> None:
        if lb is not None:
            self._lb[k] = float(lb)
        if ub is not None:
            self._ub[k] = float(ub)

    def cost(self, k: int, coef: float) -> None:
        self._c[k] = self._c.get(k, 0.0) + coef

    def eq(self, terms: Mapping[int, float] | Iterable[tuple[int, float]], rhs: float) -> int:
        self._eq.append((_merge(terms), float(rhs)))
        return len(self._eq) - 1

    def le(self, terms: Mapping[int, float] | Iterable[tuple[int, float]], rhs: float) -> int:
        self._le.append((_merge(terms), float(rhs)))
        return len(self._le) - 1

    def ge(self, terms, rhs: float) -> int:
        return self.le({k: -v for k, v in _merge(terms).items()}, -rhs)

    def cone(self, tail: Sequence[int], head: int) -> int:
        self._cones.append(tuple(tail) + (head,))
        return len(self._cones) - 1

    def build(self) -> ConicProgram:
        n = self.n

        def mat(rows):
            r, c, v = [], [], []
            for i, (terms, _) in enumerate(rows):
                for k, a in terms.items():
                    r.append(i)
                    c.append(k)
                    v.append(a)
            return sp.csr_matrix((v, (r, c)), shape=(len(rows), n))

        c = np.zeros(n)
        for k, v in self._c.items():
            c[k] = v
        return ConicProgram(
            c=c, A=mat(self._eq), b=np.array([r for _, r in self._eq], float),
            G=mat(self._le), h=np.array([r for _, r in self._le], float),
            lb=np.array(self._lb), ub=np.array(self._ub), cones=tuple(self._cones),
            binary=np.array(self._binary, dtype=int), c0=self.c0, names=tuple(self._names),
            priority=np.array(self._priority, dtype=int),
        )


def _merge(terms) -> dict[int, float]:
    items = terms.items() if isinstance(terms, Mapping) else terms
    out: dict[int, float] = {}
    for k, v in items:
        if v != 0.0:
            out[int(k)] = out.get(int(k), 0.0) + float(v)
    return out


# -- solution & residuals -------------------------------------------------------

@dataclass
class ConicSolution:
    status: str
    z: np.ndarray
    y: np.ndarray                 # equality duals
    z_ineq: np.ndarray            # duals of G z <= h (>= 0)
    z_lb: np.ndarray              # duals of lb <= z (>= 0)
    z_ub: np.ndarray              # duals of z <= ub (>= 0)
    z_cone: tuple[np.ndarray, ...]  # per cone, same index order as the cone tuple
    objective: float
    kkt_residuals: dict
    iterations: int = 0
    solve_time: float = 0.0
    certificate: dict | None = None
    trace: list = field(default_factory=list)
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def _soc_violation(u_tail: np.ndarray, u_head: float) -> float:
    return max(float(np.linalg.norm(u_tail)) - float(u_head), 0.0)


def check_kkt(prog: ConicProgram, sol: ConicSolution) -> dict:
    """Recompute primal, dual and complementarity residuals from the original data.

    ``primal``: worst violation of equalities, inequalities, bounds and cones.
    ``dual``: infinity norm of ``c + A'y + G'z - z_lb + z_ub - sum_cones E'z_cone``
    together with dual-cone / sign violations.
    ``gap``: absolute total complementarity.
    """
    z = sol.z
    ax = prog.A @ z - prog.b if prog.A.shape[0] else np.zeros(0)
    gx = prog.G @ z - prog.h if prog.G.shape[0] else np.zeros(0)
    viol = [np.abs(ax).max(initial=0.0), np.maximum(gx, 0).max(initial=0.0)]
    fin_lb = np.isfinite(prog.lb)
    fin_ub = np.isfinite(prog.ub)
    viol.append(np.maximum(prog.lb[fin_lb] - z[fin_lb], 0).max(initial=0.0))
    viol.append(np.maximum(z[fin_ub] - prog.ub[fin_ub], 0).max(initial=0.0))
    for cone in prog.cones:
        idx = np.array(cone)
        viol.append(_soc_violation(z[idx[:-1]], z[idx[-1]]))
    primal = float(max(viol))

    grad = prog.c.copy()
    if prog.A.shape[0]:
        grad += prog.A.T @ sol.y
    if prog.G.shape[0]:
        grad += prog.G.T @ sol.z_ineq
    grad -= sol.z_lb
    grad += sol.z_ub
    dviol = [0.0]
    for cone, zc in zip(prog.cones, sol.z_cone):
        idx = np.array(cone)
        grad[idx] -= zc
        dviol.append(_soc_violation(zc[:-1], zc[-1]))
    dviol += [max(-sol.z_ineq.min(initial=0.0), 0.0), max(-sol.z_lb.min(initial=0.0), 0.0),
              max(-sol.z_ub.min(initial=0.0), 0.0)]
    dual = float(max(np.abs(grad).max(initial=0.0), max(dviol)))

    gap = 0.0
    if prog.G.shape[0]:
        gap += float(sol.z_ineq @ (prog.h - prog.G @ z))
    lbz = np.where(fin_lb, z - np.where(fin_lb, prog.lb, 0.0), 0.0)
    ubz = np.where(fin_ub, np.where(fin_ub, prog.ub, 0.0) - z, 0.0)
    gap += float(sol.z_lb @ lbz + sol.z_ub @ ubz)
    for cone, zc in zip(prog.cones, sol.z_cone):
        gap += float(zc @ z[np.array(cone)])
    return {"primal": primal, "dual": dual, "gap": abs(gap)}


# -- cone algebra ----------------------------------------------------------------

class _Cones:
    """Product of a nonnegative orthant (first ``ml`` entries) and SOC blocks.

    SOC blocks of equal dimension are stored contiguously so every operation
    is vectorised per dimension group: ``groups = [(offset, count, dim)]``.
    Within a block the head (cone 'radius' component) comes first.
    """

    def __init__(self, ml: int, soc_dims: Sequence[int]):
        self.ml = ml
        self.groups: list[tuple[int, int, int]] = []
        off = ml
        dims = list(soc_dims)
        k = 0
        while k < len(dims):
            d = dims[k]
            j = k
            while j < len(dims) and dims[j] == d:
                j += 1
            self.groups.append((off, j - k, d))
            off += (j - k) * d
            k = j
        self.m = off
        self.degree = ml + len(dims)
        e = np.zeros(self.m)
        e[:ml] = 1.0
        for o, cnt, d in self.groups:
            e[o:o + cnt * d:d] = 1.0
        self.e = e

    def blocks(self, u: np.ndarray):
        for o, cnt, d in self.groups:
            yield u[o:o + cnt * d].reshape(cnt, d)

    def min_eig(self, u: np.ndarray) -> float:
        vals = [u[:self.ml].min(initial=np.inf)]
        for U in self.blocks(u):
            vals.append((U[:, 0] - np.linalg.norm(U[:, 1:], axis=1)).min())
        return float(min(vals))

    def prod(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(u)
        out[:self.ml] = u[:self.ml] * v[:self.ml]
        for (o, cnt, d), U, V in zip(self.groups, self.blocks(u), self.blocks(v)):
            R = out[o:o + cnt * d].reshape(cnt, d)
            R[:, 0] = np.einsum("ij,ij->i", U, V)
            R[:, 1:] = U[:, :1] * V[:, 1:] + V[:, :1] * U[:, 1:]
        return out

    def div(self, lam: np.ndarray, u: np.ndarray, dets: Sequence[np.ndarray] | None = None) -> np.ndarray:
        """Solve ``lam o w = u`` for ``w``; ``dets`` are known ``lam'J lam`` per group."""
        out = np.empty_like(u)
        out[:self.ml] = u[:self.ml] / lam[:self.ml]
        for g, ((o, cnt, d), L, U) in enumerate(zip(self.groups, self.blocks(lam), self.blocks(u))):
            R = out[o:o + cnt * d].reshape(cnt, d)
            if dets is None:
                det = L[:, 0] ** 2 - np.einsum("ij,ij->i", L[:, 1:], L[:, 1:])
            else:
                det = dets[g]
            w0 = (L[:, 0] * U[:, 0] - np.einsum("ij,ij->i", L[:, 1:], U[:, 1:])) / det
            R[:, 0] = w0
            R[:, 1:] = (U[:, 1:] - w0[:, None] * L[:, 1:]) / L[:, :1]
        return out

    def max_step(self, x: np.ndarray, dx: np.ndarray) -> float:
        """Largest ``a`` with ``x + a dx`` in the cone (``x`` interior)."""
        amax = np.inf
        xl, dl = x[:self.ml], dx[:self.ml]
        neg = dl < 0
        if neg.any():
            amax = min(amax, float(np.min(-xl[neg] / dl[neg])))
        for X, D in zip(self.blocks(x), self.blocks(dx)):
            nrm = np.sqrt(np.maximum(X[:, 0] ** 2 - np.einsum("ij,ij->i", X[:, 1:], X[:, 1:]), 1e-300))
            Xb = X / nrm[:, None]
            Db = D / nrm[:, None]
            rho0 = Xb[:, 0] * Db[:, 0] - np.einsum("ij,ij->i", Xb[:, 1:], Db[:, 1:])
            coef = (rho0 + Db[:, 0]) / (Xb[:, 0] + 1.0)
            rho1 = Db[:, 1:] - coef[:, None] * Xb[:, 1:]
            t = np.linalg.norm(rho1, axis=1) - rho0
            pos = t > 0
            if pos.any():
                amax = min(amax, float(np.min(1.0 / t[pos])))
        return amax


class _Scaling:
    """Nesterov-Todd scaling ``W`` with ``W z = W^{-T} s = lambda``."""

    def __init__(self, cones: _Cones, s: np.ndarray, z: np.ndarray):
        self.cones = cones
        ml = cones.ml
        self.dl = np.sqrt(s[:ml] / z[:ml])
        self.wbar: list[np.ndarray] = []
        self.eta: list[np.ndarray] = []
        self.lam_det: list[np.ndarray] = []
        lam_blocks = []
        for S, Z in zip(cones.blocks(s), cones.blocks(z)):
            sn = np.sqrt(S[:, 0] ** 2 - np.einsum("ij,ij->i", S[:, 1:], S[:, 1:]))
            zn = np.sqrt(Z[:, 0] ** 2 - np.einsum("ij,ij->i", Z[:, 1:], Z[:, 1:]))
            Sb = S / sn[:, None]
            Zb = Z / zn[:, None]
            gamma = np.sqrt((1.0 + np.einsum("ij,ij->i", Sb, Zb)) / 2.0)
            Jz = Zb.copy()
            Jz[:, 1:] *= -1.0
            W = (Sb + Jz) / (2.0 * gamma[:, None])
            self.wbar.append(W)
            self.eta.append(np.sqrt(sn / zn))
            # lambda = W z in closed form; avoids cancellation near the boundary
            L = np.empty_like(S)
            L[:, 0] = gamma
            L[:, 1:] = ((gamma + Zb[:, 0])[:, None] * Sb[:, 1:] + (gamma + Sb[:, 0])[:, None] * Zb[:, 1:]) \
                / (Sb[:, 0] + Zb[:, 0] + 2.0 * gamma)[:, None]
            root = np.sqrt(sn * zn)
            lam_blocks.append(L * root[:, None])
            self.lam_det.append(sn * zn)
        self.lam = np.empty_like(z)
        self.lam[:ml] = np.sqrt(s[:ml] * z[:ml])
        for (o, cnt, d), L in zip(cones.groups, lam_blocks):
            self.lam[o:o + cnt * d] = L.ravel()

    def apply(self, u: np.ndarray, inverse: bool = False) -> np.ndarray:
        ml = self.cones.ml
        out = np.empty_like(u)
        out[:ml] = u[:ml] / self.dl if inverse else u[:ml] * self.dl
        sign = -1.0 if inverse else 1.0
        for (o, cnt, d), U, Wb, eta in zip(self.cones.groups, self.cones.blocks(u), self.wbar, self.eta):
            R = out[o:o + cnt * d].reshape(cnt, d)
            w0 = Wb[:, 0]
            w1 = Wb[:, 1:]
            wu = np.einsum("ij,ij->i", w1, U[:, 1:])
            R[:, 0] = w0 * U[:, 0] + sign * wu
            R[:, 1:] = U[:, 1:] + ((wu / (1.0 + w0)) + sign * U[:, 0])[:, None] * w1
            R *= (1.0 / eta if inverse else eta)[:, None]
        return out

    def inv_blocks(self):
        """Dense blocks of ``W^{-1}``: (linear diagonal, [(count, d, d) per group])."""
        lin = 1.0 / self.dl
        blocks = []
        for Wb, eta in zip(self.wbar, self.eta):
            w0 = Wb[:, 0]
            w1 = Wb[:, 1:]
            cnt, d = Wb.shape
            B = np.zeros((cnt, d, d))
            B[:, 0, 0] = w0
            B[:, 0, 1:] = -w1
            B[:, 1:, 0] = -w1
            B[:, 1:, 1:] = np.eye(d - 1)[None] + w1[:, :, None] * w1[:, None, :] / (1.0 + w0)[:, None, None]
            B /= eta[:, None, None]
            blocks.append(B)
        return lin, blocks


# -- presolve & internal standard form ---------------------------------------------

@dataclass
class _Internal:
    keep: np.ndarray           # original indices of free (non-fixed) variables
    fixed: np.ndarray          # original indices of fixed variables
    x_fixed: np.ndarray
    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    eq_rows: np.ndarray        # original equality row per internal row
    G: sp.csr_matrix
    h: np.ndarray
    cones: _Cones
    # bookkeeping to map internal duals back
    lin_kind: np.ndarray       # 0 = G row, 1 = lower bound, 2 = upper bound
    lin_ref: np.ndarray        # original row / variable index
    cone_order: list[int]      # original cone index per internal SOC block
    obj_const: float


class _Infeasible(Exception):
    def __init__(self, message, kind, ref):
        super().__init__(message)
        self.kind = kind
        self.ref = ref


_FIX_TOL = 1e-12


def _presolve(prog: ConicProgram) -> _Internal:
    lb = prog.lb.copy()
    ub = prog.ub.copy()
    if prog.binary.size:
        lb[prog.binary] = np.maximum(lb[prog.binary], 0.0)
        ub[prog.binary] = np.minimum(ub[prog.binary], 1.0)
    if np.any(lb > ub + 1e-12):
        k = int(np.argmax(lb - ub))
        raise _Infeasible(f"variable {k}: lower bound above upper bound", "bound", k)
    fixed_mask = (ub - lb) <= _FIX_TOL
    fixed = np.flatnonzero(fixed_mask)
    keep = np.flatnonzero(~fixed_mask)
    x_fixed = 0.5 * (lb[fixed] + ub[fixed])
    pos = -np.ones(prog.n, dtype=int)
    pos[keep] = np.arange(keep.size)

    def xfull_fixed(idx):
        return x_fixed[np.searchsorted(fixed, list(idx))]

    A = prog.A.tocsc()
    b = prog.b - (A[:, fixed] @ x_fixed if fixed.size else 0.0)
    A = A[:, keep].tocsr()
    nnz_rows = np.diff(A.indptr) > 0
    for r in np.flatnonzero(~nnz_rows):
        if abs(b[r]) > 1e-9:
            raise _Infeasible(f"equality row {r} has no free variables but residual {b[r]:.3g}", "eq", r)
    eq_rows = np.flatnonzero(nnz_rows)
    A = A[eq_rows]
    b = b[eq_rows]

    Gc = prog.G.tocsc()
    h = prog.h - (Gc[:, fixed] @ x_fixed if fixed.size else 0.0)
    G = Gc[:, keep].tocsr()
    g_nnz = np.diff(G.indptr) > 0
    for r in np.flatnonzero(~g_nnz):
        if h[r] < -1e-9:
            raise _Infeasible(f"inequality row {r} has no free variables but is violated by {-h[r]:.3g}", "ineq", r)
    g_rows = np.flatnonzero(g_nnz)

    rows_G = [G[g_rows]]
    h_parts = [h[g_rows]]
    kind = [np.zeros(g_rows.size, dtype=int)]
    ref = [g_rows]
    nk = keep.size
    lbk, ubk = lb[keep], ub[keep]
    has_lb = np.flatnonzero(np.isfinite(lbk))
    has_ub = np.flatnonzero(np.isfinite(ubk))
    rows_G.append(sp.csr_matrix((-np.ones(has_lb.size), (np.arange(has_lb.size), has_lb)), shape=(has_lb.size, nk)))
    h_parts.append(-lbk[has_lb])
    kind.append(np.ones(has_lb.size, dtype=int))
    ref.append(keep[has_lb])
    rows_G.append(sp.csr_matrix((np.ones(has_ub.size), (np.arange(has_ub.size), has_ub)), shape=(has_ub.size, nk)))
    h_parts.append(ubk[has_ub])
    kind.append(np.full(has_ub.size, 2, dtype=int))
    ref.append(keep[has_ub])
    ml = sum(r.shape[0] for r in rows_G)

    order = []
    for k, cone in enumerate(prog.cones):
        if np.any(pos[list(cone)] >= 0):
            order.append(k)
            continue
        vals = xfull_fixed(cone)
        if vals[-1] < np.linalg.norm(vals[:-1]) - 1e-9:
            raise _Infeasible(f"cone {k} has all members fixed outside the cone", "cone", k)
    order.sort(key=lambda k: (len(prog.cones[k]), k))
    cr, cc, cv, ch = [], [], [], []
    row = 0
    for k in order:
        cone = prog.cones[k]
        members = (cone[-1],) + tuple(cone[:-1])
        for v in members:
            if pos[v] >= 0:
                cr.append(row)
                cc.append(pos[v])
                cv.append(-1.0)
                ch.append(0.0)
            else:
                ch.append(float(x_fixed[np.searchsorted(fixed, v)]))
            row += 1
    rows_G.append(sp.csr_matrix((cv, (cr, cc)), shape=(row, nk)))
    h_parts.append(np.array(ch))
    Gi = sp.vstack(rows_G, format="csr")
    hi = np.concatenate(h_parts)
    cones = _Cones(ml, [len(prog.cones[k]) for k in order])
    obj_const = float(prog.c[fixed] @ x_fixed) if fixed.size else 0.0
    return _Internal(
        keep=keep, fixed=fixed, x_fixed=x_fixed, c=prog.c[keep].copy(), A=A, b=b,
        eq_rows=eq_rows, G=Gi, h=hi, cones=cones, lin_kind=np.concatenate(kind),
        lin_ref=np.concatenate(ref), cone_order=order, obj_const=obj_const,
    )


# -- KKT solver ----------------------------------------------------------------------

class _KKT:
    """Factor ``[[G'W^-2G + dI, A'], [A, -dI]]`` and solve the 3x3 system by elimination.

    ``G'W^-2G`` is assembled through a fixed sparse map from the scaling
    data (linear weights and dense SOC blocks of ``W^-2``) to the nonzeros of
    the reduced matrix, so each iteration costs one sparse mat-vec plus the
    factorisation.
    """

    REG = 1e-10

    def __init__(self, ip: _Internal):
        self.ip = ip
        self.n = n = ip.c.size
        self.p = p = ip.b.size
        self.At = ip.A.T.tocsr()
        self.GT = ip.G.T.tocsr()
        cones = ip.cones
        G = ip.G.tocsr()
        ml = cones.ml
        # contributions: (scaling-data index, H row, H col, coefficient)
        src, hr, hc, coef = [], [], [], []
        Gl = G[:ml].tocoo()
        # pair every entry of a row with every entry of the same row
        by_row = np.argsort(Gl.row, kind="stable")
        rr, cc, vv = Gl.row[by_row], Gl.col[by_row], Gl.data[by_row]
        counts = np.bincount(rr, minlength=ml)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        rep = np.repeat(np.arange(rr.size), counts[rr])
        offs = np.arange(rep.size) - np.repeat(np.cumsum(counts[rr]) - counts[rr], counts[rr])
        partner = starts[rr[rep]] + offs
        src.append(rr[rep])
        hr.append(cc[rep])
        hc.append(cc[partner])
        coef.append(vv[rep] * vv[partner])
        data_off = ml
        for o, cnt, d in cones.groups:
            for k in range(cnt):
                rows = np.arange(o + k * d, o + (k + 1) * d)
                var = np.full(d, -1)
                sgn = np.zeros(d)
                for t, r in enumerate(rows):
                    lo, hi = G.indptr[r], G.indptr[r + 1]
                    if hi > lo:
                        var[t] = G.indices[lo]
                        sgn[t] = G.data[lo]
                ii, jj = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
                ii, jj = ii.ravel(), jj.ravel()
                ok = (var[ii] >= 0) & (var[jj] >= 0)
                src.append(data_off + (ii * d + jj)[ok])
                hr.append(var[ii[ok]])
                hc.append(var[jj[ok]])
                coef.append(sgn[ii[ok]] * sgn[jj[ok]])
                data_off += d * d
        self.n_data = data_off
        src = np.concatenate(src).astype(int)
        hr = np.concatenate(hr).astype(int)
        hc = np.concatenate(hc).astype(int)
        coef = np.concatenate(coef)
        # K pattern: H block (plus diagonal), A' and A blocks, -reg diagonal
        Akc = ip.A.tocoo()
        kr = np.concatenate([hr, np.arange(n), Akc.col, n + Akc.row, n + np.arange(p)])
        kc = np.concatenate([hc, np.arange(n), n + Akc.row, Akc.col, n + np.arange(p)])
        N = n + p
        pattern = sp.csr_matrix((np.ones(kr.size), (kr, kc)), shape=(N, N))
        # bandwidth-reducing symmetric order, applied to the pattern once
        self.perm = reverse_cuthill_mckee(pattern, symmetric_mode=True)
        inv = np.argsort(self.perm)
        kr, kc = inv[kr], inv[kc]
        K = sp.csc_matrix((np.ones(kr.size), (kr, kc)), shape=(N, N))
        K.sum_duplicates()
        # locate each COO entry in the CSC data array
        order = np.lexsort((kr, kc))
        keys = kc[order] * (n + p) + kr[order]
        uniq, first = np.unique(keys, return_index=True)
        slot_sorted = np.searchsorted(uniq, keys)
        slot = np.empty(kr.size, dtype=int)
        slot[order] = slot_sorted
        self.K = sp.csc_matrix((np.zeros(uniq.size), K.indices.copy(), K.indptr.copy()), shape=(n + p, n + p))
        nh = hr.size
        self.T = sp.csr_matrix((coef, (slot[:nh], src)), shape=(uniq.size, self.n_data))
        const = np.zeros(uniq.size)
        np.add.at(const, slot[nh:nh + n], self.REG)
        na = Akc.nnz
        np.add.at(const, slot[nh + n:nh + n + na], Akc.data)
        np.add.at(const, slot[nh + n + na:nh + n + 2 * na], Akc.data)
        np.add.at(const, slot[nh + n + 2 * na:], -self.REG)
        self.const = const
        self.lu = None
        self.scaling = None

    def factor(self, scaling: _Scaling | None):
        self.scaling = scaling
        if scaling is None:
            lin = np.ones(self.ip.cones.ml)
            blocks = [np.broadcast_to(np.eye(d), (cnt, d, d)) for _, cnt, d in self.ip.cones.groups]
        else:
            lin, inv = scaling.inv_blocks()
            lin = lin * lin
            blocks = [np.einsum("kij,kjl->kil", B, B) for B in inv]
        data = np.concatenate([lin] + [B.ravel() for B in blocks])
        self.K.data = self.const + self.T @ data
        try:
            self.lu = _Permuted(spla.splu(self.K, permc_spec="NATURAL", diag_pivot_thresh=0.1,
                                          options={"SymmetricMode": True}), self.perm)
        except RuntimeError as exc:
            pivot = self._pivot()
            raise SingularKKTError(f"reduced KKT matrix is singular ({exc}); smallest pivot at row {pivot}", pivot) from exc

    def _pivot(self) -> int:
        """Original row index of the smallest dense-LU pivot."""
        k = _dense_pivot(self.K.toarray())
        return int(self.perm[k]) if k >= 0 else k

    def _w(self, u, inverse):
        if self.scaling is None:
            return u
        return self.scaling.apply(u, inverse=inverse)

    def _reduced(self, r1, r2, r3):
        wr3 = self._w(r3, True)
        rhs = np.concatenate([r1 + self.GT @ self._w(wr3, True), r2])
        sol = self.lu.solve(rhs)
        dx = sol[:self.n]
        return dx, sol[self.n:], self._w(self.ip.G @ dx, True) - wr3

    def solve(self, r1, r2, r3, refine: int = 3):
        """Solve ``[[0, A', G'], [A, 0, 0], [G, 0, -W^2]] (x, y, z) = (r1, r2, r3)``.

        Returns ``(x, y, W z)``; the scaled ``W z`` avoids forming ``W^2 W^-2``.
        Iterative refinement runs against the unreduced system.
        """
        ip = self.ip
        dx, dy, wdz = self._reduced(r1, r2, r3)
        scale = 1.0 + max(np.abs(r1).max(initial=0.0), np.abs(r2).max(initial=0.0), np.abs(r3).max(initial=0.0))
        for _ in range(refine):
            e1 = r1 - self.At @ dy - self.GT @ self._w(wdz, True)
            e2 = r2 - ip.A @ dx
            e3 = r3 - ip.G @ dx + self._w(wdz, False)
            err = max(np.abs(e1).max(initial=0.0), np.abs(e2).max(initial=0.0), np.abs(e3).max(initial=0.0))
            if err <= 1e-12 * scale:
                break
            cx, cy, cz = self._reduced(e1, e2, e3)
            dx, dy, wdz = dx + cx, dy + cy, wdz + cz
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
            pivot = self._pivot()
            raise SingularKKTError(f"reduced KKT solve produced non-finite values; suspect pivot row {pivot}", pivot)
        return dx, dy, wdz


class _Permuted:
    """Solve with a factorisation of ``K[p][:, p]``."""

    def __init__(self, lu, p):
        self.lu = lu
        self.p = p
        self.inv = np.argsort(p)

    def solve(self, rhs):
        return self.lu.solve(rhs[self.p])[self.inv]


def _dense_pivot(K: np.ndarray) -> int:
    try:
        lu, piv = sla.lu_factor(K, check_finite=False)
        return int(np.argmin(np.abs(np.diag(lu))))
    except Exception:  # noqa: BLE001 - best effort diagnostics
        return -1


# -- solver --------------------------------------------------------------------------

def solve_socp(
    prog: ConicProgram,
    tol: float = 1e-8,
    *,
    max_iter: int = 200,
    trace: bool = False,
) -> ConicSolution:
    """Solve ``prog`` with binaries relaxed to [0, 1].

    ``tol`` bounds the absolute primal, dual and complementarity residuals
    (as recomputed by :func:`check_kkt`) at an ``optimal`` return.  An
    ``infeasible`` status carries a Farkas certificate ``{"y", "z"}`` with
    ``A'y + G'z = 0``, ``z`` in the dual cone and ``b'y + h'z < 0`` in the
    internal standard form; ``unbounded`` carries a primal ray ``x``.
    """
    t0 = time.perf_counter()
    try:
        ip = _presolve(prog)
    except _Infeasible as exc:
        return _trivial_infeasible(prog, exc, time.perf_counter() - t0)
    if ip.keep.size == 0:
        # presolve has already checked every row against the fixed point
        result = {"status": OPTIMAL, "x": np.zeros(0), "y": np.zeros(0), "z": np.zeros(ip.G.shape[0]),
                  "iterations": 0, "trace": []}
    else:
        result = _hsd(ip, tol=tol, max_iter=max_iter, keep_trace=trace)
    sol = _recover(prog, ip, result)
    sol.solve_time = time.perf_counter() - t0
    return sol


def _trivial_infeasible(prog: ConicProgram, exc: _Infeasible, elapsed: float) -> ConicSolution:
    n = prog.n
    return ConicSolution(
        status=INFEASIBLE, z=np.full(n, np.nan), y=np.zeros(prog.A.shape[0]),
        z_ineq=np.zeros(prog.G.shape[0]), z_lb=np.zeros(n), z_ub=np.zeros(n),
        z_cone=tuple(np.zeros(len(c)) for c in prog.cones), objective=np.inf,
        kkt_residuals={"primal": np.inf, "dual": np.inf, "gap": np.inf}, solve_time=elapsed,
        certificate={"presolve": str(exc), "kind": exc.kind, "ref": exc.ref}, message=str(exc),
    )


def _hsd(ip: _Internal, tol: float, max_iter: int, keep_trace: bool) -> dict:
    cones = ip.cones
    c, b, h = ip.c, ip.b, ip.h
    A, G = ip.A, ip.G
    At, GT = A.T.tocsr(), G.T.tocsr()
    kkt = _KKT(ip)
    nu = cones.degree
    e = cones.e

    kkt.factor(None)
    x, _, zz = kkt.solve(np.zeros_like(c), b, h)
    s = -zz
    _, y, z = kkt.solve(-c, np.zeros_like(b), np.zeros_like(h))
    for vec in (s, z):
        a = cones.min_eig(vec)
        if a <= 1e-8 * max(1.0, np.abs(vec).max(initial=0.0)):
            vec += (1.0 - a) * e
    tau = kappa = 1.0

    nc = max(1.0, np.abs(c).max(initial=0.0))
    trace_rows = []
    status = ITERATION_LIMIT
    best = None
    it = 0
    for it in range(max_iter + 1):
        rx = At @ y + GT @ z + c * tau
        ry = A @ x - b * tau
        rz = G @ x + s - h * tau
        cx, by, hz = c @ x, b @ y, h @ z
        rt = cx + by + hz + kappa
        gap_int = float(s @ z)
        mu = (gap_int + tau * kappa) / (nu + 1)

        pres = max(np.abs(ry).max(initial=0.0), np.abs(rz).max(initial=0.0)) / tau
        dres = np.abs(rx).max(initial=0.0) / tau
        gap = gap_int / tau**2
        pcost, dcost = cx / tau, -(by + hz) / tau
        if keep_trace:
            trace_rows.append({"iter": it, "pcost": pcost, "dcost": dcost, "gap": gap,
                               "pres": pres, "dres": dres, "tau": tau, "kappa": kappa})
        log.debug("it %d pcost %.10g dcost %.10g gap %.2e pres %.2e dres %.2e tau %.2e kappa %.2e",
                  it, pcost, dcost, gap, pres, dres, tau, kappa)
        score = max(pres, dres, gap)
        if best is None or score < best[0]:
            best = (score, x / tau, y / tau, z / tau, s / tau)
        if pres <= tol and dres <= tol and gap <= tol:
            status = OPTIMAL
            break
        # infeasibility certificates
        if -(by + hz) > 1e-12:
            pinf = np.abs(At @ y + GT @ z).max(initial=0.0) / (-(by + hz)) / nc
            if pinf <= tol and tau < 1e-6 * kappa:
                status = INFEASIBLE
                scale = -(by + hz)
                best = (0.0, x, y / scale, z / scale, s)
                break
        if -cx > 1e-12:
            dinf = max(np.abs(A @ x).max(initial=0.0), np.abs(G @ x + s).max(initial=0.0)) / (-cx)
            if dinf <= tol and tau < 1e-6 * kappa:
                status = UNBOUNDED
                best = (0.0, x / (-cx), y, z, s / (-cx))
                break
        if it == max_iter:
            break

        if not (cones.min_eig(s) > 0 and cones.min_eig(z) > 0):
            log.debug("iterate left the cone interior at iteration %d", it)
            break
        try:
            with np.errstate(invalid="raise", divide="raise"):
                scaling = _Scaling(cones, s, z)
            lam = scaling.lam
            kkt.factor(scaling)
        except (SingularKKTError, FloatingPointError) as exc:
            log.debug("stopping at iteration %d: %s", it, exc)
            break
        x1, y1, wz1 = kkt.solve(-c, b, h)
        z1 = scaling.apply(wz1, inverse=True)
        den = c @ x1 + b @ y1 + h @ z1 - kappa / tau

        def direction(eta, ds_rhs, dk_rhs):
            ld = cones.div(lam, ds_rhs, scaling.lam_det)
            x2, y2, wz2 = kkt.solve(-eta * rx, -eta * ry, -eta * rz - scaling.apply(ld))
            z2 = scaling.apply(wz2, inverse=True)
            dtau = (-eta * rt - dk_rhs / tau - (c @ x2 + b @ y2 + h @ z2)) / den
            dx = x2 + dtau * x1
            dy = y2 + dtau * y1
            wdz = wz2 + dtau * wz1
            dz = z2 + dtau * z1
            wds = ld - wdz
            ds = scaling.apply(wds)
            dkap = (dk_rhs - kappa * dtau) / tau
            return dx, dy, dz, ds, dtau, dkap, wds, wdz

        def step_len(dz, ds, dtau, dkap):
            a = min(cones.max_step(s, ds), cones.max_step(z, dz))
            if dtau < 0:
                a = min(a, -tau / dtau)
            if dkap < 0:
                a = min(a, -kappa / dkap)
            return a

        lamlam = cones.prod(lam, lam)
        dxa, dya, dza, dsa, dta, dka, wdsa, wdza = direction(1.0, -lamlam, -kappa * tau)
        a_aff = min(1.0, step_len(dza, dsa, dta, dka))
        sigma = (1.0 - a_aff) ** 3
        corr = cones.prod(wdsa, wdza)
        dx, dy, dz, ds, dt, dk, _, _ = direction(
            1.0 - sigma, -lamlam - corr + sigma * mu * e, -kappa * tau - dta * dka + sigma * mu
        )
        a = min(1.0, 0.99 * step_len(dz, ds, dt, dk))
        if not np.isfinite(a) or a <= 1e-14 or not all(
                np.all(np.isfinite(v)) for v in (dx, dy, dz, ds)):
            log.debug("IPM step collapsed at iteration %d", it)
            break
        x = x + a * dx
        y = y + a * dy
        z = z + a * dz
        s = s + a * ds
        tau = tau + a * dt
        kappa = kappa + a * dk

    _, xb, yb, zb, sb = best
    return {"status": status, "x": xb, "y": yb, "z": zb, "s": sb, "iterations": it,
            "trace": trace_rows}


def _internal_residuals(ip: _Internal, x, y, z) -> dict:
    """Residual report computed in the presolved internal form."""
    cones = ip.cones
    prim = [np.abs(ip.A @ x - ip.b).max(initial=0.0)] if ip.b.size else [0.0]
    slack = ip.h - ip.G @ x
    ml = cones.ml
    prim.append(max(-slack[:ml].min(initial=0.0), 0.0))
    for S in cones.blocks(slack):
        prim.append(float(np.maximum(np.linalg.norm(S[:, 1:], axis=1) - S[:, 0], 0).max(initial=0.0)))
    grad = ip.c + (ip.A.T @ y if ip.b.size else 0.0) + ip.G.T @ z
    dviol = [np.abs(grad).max(initial=0.0), max(-z[:ml].min(initial=0.0), 0.0)]
    for Z in cones.blocks(z):
        dviol.append(float(np.maximum(np.linalg.norm(Z[:, 1:], axis=1) - Z[:, 0], 0).max(initial=0.0)))
    return {"primal": float(max(prim)), "dual": float(max(dviol)), "gap": abs(float(z @ slack))}


def _recover(prog: ConicProgram, ip: _Internal, res: dict) -> ConicSolution:
    n = prog.n
    x_int, y_int, z_int = res["x"], res["y"], res["z"]
    xfull = np.zeros(n)
    xfull[ip.keep] = x_int
    xfull[ip.fixed] = ip.x_fixed
    y = np.zeros(prog.A.shape[0])
    y[ip.eq_rows] = y_int
    ml = ip.cones.ml
    zl = z_int[:ml]
    z_ineq = np.zeros(prog.G.shape[0])
    z_lb = np.zeros(n)
    z_ub = np.zeros(n)
    for kind, arr in ((0, z_ineq), (1, z_lb), (2, z_ub)):
        sel = ip.lin_kind == kind
        arr[ip.lin_ref[sel]] = zl[sel]
    z_cone: list[np.ndarray] = [np.zeros(len(cn)) for cn in prog.cones]
    off = ml
    for k in ip.cone_order:
        d = len(prog.cones[k])
        blk = z_int[off:off + d]
        z_cone[k] = np.r_[blk[1:], blk[0]]
        off += d
    status = res["status"]
    report = _internal_residuals(ip, x_int, y_int, z_int)
    if ip.fixed.size and status == OPTIMAL:
        grad = prog.c.copy()
        if prog.A.shape[0]:
            grad += prog.A.T @ y
        if prog.G.shape[0]:
            grad += prog.G.T @ z_ineq
        for cone, zc in zip(prog.cones, z_cone):
            grad[np.array(cone)] -= zc
        rf = grad[ip.fixed]
        z_lb[ip.fixed] += np.maximum(rf, 0.0)
        z_ub[ip.fixed] += np.maximum(-rf, 0.0)
    cert = None
    if status == INFEASIBLE:
        cert = {"y": y_int.copy(), "z": z_int.copy()}
        xfull[:] = np.nan
    elif status == UNBOUNDED:
        cert = {"x": xfull.copy()}
    obj = float(prog.c @ xfull + prog.c0) if status in (OPTIMAL, ITERATION_LIMIT) else (
        np.inf if status == INFEASIBLE else -np.inf)
    return ConicSolution(
        status=status, z=xfull, y=y, z_ineq=z_ineq, z_lb=z_lb, z_ub=z_ub, z_cone=tuple(z_cone),
        objective=obj, kkt_residuals=report, iterations=res["iterations"], certificate=cert,
        trace=res["trace"],
    )
