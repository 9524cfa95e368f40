import itertools
import math

import numpy as np
import pytest

from bilevel_vvc.bnb import BnbConfig, solve_misocp, write_node_log
from bilevel_vvc.conic import OPTIMAL, ProgramBuilder, solve_socp


def random_misocp(seed, nbin):
    """Binaries y gate continuous x (|x_i| <= y_i); a cone ties x to t; linear knapsack on y."""
    rng = np.random.default_rng(seed)
    B = ProgramBuilder()
    ys = [B.binary(f"y{i}") for i in range(nbin)]
    xs = [B.var(f"x{i}", -2.0, 2.0) for i in range(nbin)]
    t = B.var("t", 0.0, 3.0)
    for y, x in zip(ys, xs):
        B.le({x: 1.0, y: -2.0}, 0.0)
        B.le({x: -1.0, y: -2.0}, 0.0)
        B.cost(y, float(rng.uniform(0.1, 1.0)))
        B.cost(x, float(rng.normal()))
    B.cone(xs, t)
    B.cost(t, 0.2)
    B.le(dict(zip(ys, rng.uniform(0.5, 1.5, nbin))), float(0.5 * nbin))
    B.ge(dict(zip(ys, np.ones(nbin))), 1.0)
    return B.build()


def enumerate_best(prog):
    best = math.inf
    for bits in itertools.product((0.0, 1.0), repeat=len(prog.binary)):
        lb, ub = prog.lb.copy(), prog.ub.copy()
        lb[prog.binary] = ub[prog.binary] = bits
        sol = solve_socp(prog.with_bounds(lb, ub))
        if sol.status == OPTIMAL:
            best = min(best, sol.objective)
    return best


@pytest.mark.parametrize("seed, nbin", [(0, 3), (1, 5), (2, 6), (3, 8)])
def test_matches_enumeration(seed, nbin):
    prog = random_misocp(seed, nbin)
    res = solve_misocp(prog, BnbConfig(gap_tol=1e-9))
    assert res.status == "optimal"
    assert res.objective == pytest.approx(enumerate_best(prog), abs=1e-7)
    y = res.z[prog.binary]
    assert np.all(np.abs(y - np.round(y)) <= 1e-6)


def norm_penalty(seed, nbin):
    """min c'y + t  s.t. ||D y|| <= t, w'y <= cap, sum y >= 2: t = ||D y|| once y is fixed."""
    rng = np.random.default_rng(seed)
    c = rng.uniform(-1.0, 0.3, nbin)
    D = rng.normal(scale=0.4, size=(3, nbin))
    w = rng.uniform(0.5, 1.5, nbin)
    cap = 0.45 * w.sum()
    B = ProgramBuilder()
    ys = [B.binary(f"y{i}") for i in range(nbin)]
    rs = [B.var(f"r{j}") for j in range(3)]
    t = B.var("t", 0.0)
    for y, cy in zip(ys, c):
        B.cost(y, float(cy))
    B.cost(t, 1.0)
    for j, r in enumerate(rs):
        B.eq({r: 1.0, **{y: -float(D[j, i]) for i, y in enumerate(ys)}}, 0.0)
    B.cone(rs, t)
    B.le(dict(zip(ys, w)), float(cap))
    B.ge(dict(zip(ys, np.ones(nbin))), 2.0)
    Y = np.array(list(itertools.product((0.0, 1.0), repeat=nbin)))
    ok = (Y @ w <= cap + 1e-12) & (Y.sum(axis=1) >= 2)
    vals = Y @ c + np.linalg.norm(Y @ D.T, axis=1)
    return B.build(), float(vals[ok].min()), Y[ok][np.argmin(vals[ok])]


@pytest.mark.parametrize("seed, nbin", [(10, 9), (11, 10), (12, 11), (13, 12), (14, 12)])
def test_matches_enumeration_closed_form(seed, nbin):
    prog, best, y_best = norm_penalty(seed, nbin)
    res = solve_misocp(prog, BnbConfig(gap_tol=1e-9))
    assert res.status == "optimal"
    assert res.objective == pytest.approx(best, abs=1e-7)


def test_knapsack():
    values, weights = [10, 13, 7, 8, 4], [5, 6, 4, 3, 1]
    B = ProgramBuilder()
    ys = [B.binary(f"y{i}") for i in range(5)]
    for y, v in zip(ys, values):
        B.cost(y, -v)
    B.le(dict(zip(ys, weights)), 10)
    res = solve_misocp(B.build())
    assert res.objective == pytest.approx(-25.0, abs=1e-7)
    assert np.round(res.z[ys]).tolist() == [0, 1, 0, 1, 1]


def test_infeasible():
    B = ProgramBuilder()
    a, b = B.binary("a"), B.binary("b")
    B.ge({a: 1, b: 1}, 1.5)
    B.le({a: 1, b: 1}, 1.2)
    assert solve_misocp(B.build()).status == "infeasible"


def test_no_binaries_is_single_solve():
    B = ProgramBuilder()
    x = B.var("x", 1.0, 2.0)
    B.cost(x, 1.0)
    res = solve_misocp(B.build())
    assert res.status == "optimal" and res.objective == pytest.approx(1.0)


def test_node_limit_keeps_incumbent():
    prog = random_misocp(9, 10)
    res = solve_misocp(prog, BnbConfig(node_limit=3))
    assert res.status in ("node-limit", "optimal")
    assert res.nodes <= 3 or res.status == "optimal"


def test_config_validation():
    with pytest.raises(ValueError):
        BnbConfig(gap_tol=0)
    with pytest.raises(ValueError):
        BnbConfig(branching="random")


def test_node_log_written(tmp_path):
    res = solve_misocp(random_misocp(1, 4), BnbConfig(log_nodes=True))
    path = tmp_path / "nodes.csv"
    write_node_log(res, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("node,parent")
    assert len(lines) == len(res.node_log) + 1


def test_leaf_evaluator_overrides_relaxation():
    # branch only on y; the leaf scores each y-assignment with its own rule
    B = ProgramBuilder()
    ys = [B.binary(f"y{i}") for i in range(3)]
    z = B.binary("z", priority=1)
    for k, y in enumerate(ys):
        B.cost(y, 1.0 + k)
    B.cost(z, 0.5)
    B.ge(dict(zip(ys, [1, 1, 1])), 1.0)
    prog = B.build()
    table = {(1, 0, 0): 5.0, (0, 1, 0): 2.5, (0, 0, 1): 4.0}
    calls = []

    def leaf(lb, ub, sol):
        key = tuple(int(round(v)) for v in sol.z[ys])
        calls.append(key)
        determined = all(lb[ys[i]] == ub[ys[i]] for i in range(3))
        return table.get(key, 100.0 + sum(key)), key, determined

    res = solve_misocp(prog, branch_on=np.array(ys), leaf=leaf)
    assert res.status == "optimal"
    assert res.payload == (0, 1, 0)
    assert res.objective == pytest.approx(2.5)
    assert (0, 1, 0) in calls
