import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from bilevel_vvc.conic import (
    INFEASIBLE, OPTIMAL, UNBOUNDED, ProgramBuilder, check_kkt, dump_program, load_program, solve_socp,
)


def ball(c, radius=1.0):
    B = ProgramBuilder()
    xs = [B.var(f"x{i}") for i in range(len(c))]
    t = B.var("t", radius, radius)
    for k, ck in zip(xs, c):
        B.cost(k, ck)
    B.cone(xs, t)
    return B.build(), xs


@pytest.mark.parametrize("c", [[1.0, 0.0], [3.0, -4.0], [1.0, 2.0, 2.0], [0.3, -0.1, 0.7, 2.0]])
def test_euclidean_ball_exact(c):
    prog, xs = ball(c)
    sol = solve_socp(prog)
    c = np.array(c)
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.z[xs], -c / np.linalg.norm(c), atol=1e-8)
    assert sol.objective == pytest.approx(-np.linalg.norm(c), abs=1e-8)
    kkt = check_kkt(prog, sol)
    assert max(kkt.values()) <= 1e-8


def test_ball_with_offset_center():
    # min x + y  s.t. ||(x - 1, y - 2)|| <= 0.5
    B = ProgramBuilder()
    x, y, u, w = (B.var(n) for n in "xyuw")
    r = B.var("r", 0.5, 0.5)
    B.cost(x, 1.0)
    B.cost(y, 1.0)
    B.eq({u: 1.0, x: -1.0}, -1.0)
    B.eq({w: 1.0, y: -1.0}, -2.0)
    B.cone([u, w], r)
    sol = solve_socp(B.build())
    s = 0.5 / np.sqrt(2)
    np.testing.assert_allclose(sol.z[[x, y]], [1 - s, 2 - s], atol=1e-8)


def test_lp_with_bounds_and_inequalities():
    # max x + 2y  s.t. x + y <= 4, x - y >= -2, 0 <= x, y <= 3
    B = ProgramBuilder()
    x = B.var("x", 0, 3)
    y = B.var("y", 0, 3)
    B.cost(x, -1.0)
    B.cost(y, -2.0)
    B.le({x: 1, y: 1}, 4)
    B.ge({x: 1, y: -1}, -2)
    sol = solve_socp(B.build())
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.z, [1.0, 3.0], atol=1e-8)
    assert sol.objective == pytest.approx(-7.0, abs=1e-8)


def test_infeasible_has_certificate():
    B = ProgramBuilder()
    x = B.var("x")
    t = B.var("t", 0, 1)
    B.cone([x], t)
    B.ge({x: 1.0}, 2.0)
    sol = solve_socp(B.build())
    assert sol.status == INFEASIBLE
    assert sol.certificate is not None


def test_unbounded_detected():
    B = ProgramBuilder()
    x = B.var("x")
    t = B.var("t")
    B.cost(t, -1.0)
    B.cone([x], t)
    sol = solve_socp(B.build())
    assert sol.status == UNBOUNDED


def test_program_roundtrip(tmp_path):
    prog, _ = ball([1.0, 2.0])
    dump_program(prog, tmp_path / "p.json")
    back = load_program(tmp_path / "p.json")
    assert solve_socp(back).objective == pytest.approx(solve_socp(prog).objective, abs=1e-10)


def test_dimension_mismatch_rejected():
    prog, _ = ball([1.0])
    with pytest.raises(ValueError):
        prog.with_bounds(np.zeros(5), np.ones(5))


def test_duplicate_names_rejected():
    B = ProgramBuilder()
    B.var("a")
    with pytest.raises(KeyError):
        B.var("a")


def test_quadratic_via_rotated_cone():
    # min (x - 3)^2 with x <= 1 written as t >= (x-3)^2: ||(2(x-3), t-1)|| <= t+1
    B = ProgramBuilder()
    x = B.var("x", ub=1.0)
    t = B.var("t")
    a = B.var("a")
    b = B.var("b")
    h = B.var("h")
    B.cost(t, 1.0)
    B.eq({a: 1.0, x: -2.0}, -6.0)
    B.eq({b: 1.0, t: -1.0}, -1.0)
    B.eq({h: 1.0, t: -1.0}, 1.0)
    B.cone([a, b], h)
    sol = solve_socp(B.build())
    assert sol.z[x] == pytest.approx(1.0, abs=1e-7)
    assert sol.objective == pytest.approx(4.0, abs=1e-7)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_random_lps_match_linprog(seed):
    rng = np.random.default_rng(seed)
    n, m = 4, 3
    A = rng.normal(size=(m, n))
    x_feas = rng.uniform(0.1, 0.9, n)
    h = A @ x_feas + rng.uniform(0.0, 0.5, m)
    c = rng.normal(size=n)
    B = ProgramBuilder()
    xs = [B.var(f"x{i}", 0.0, 1.0) for i in range(n)]
    for k in xs:
        B.cost(k, c[k])
    for row, rhs in zip(A, h):
        B.le(dict(zip(xs, row)), rhs)
    sol = solve_socp(B.build())
    ref = linprog(c, A_ub=A, b_ub=h, bounds=[(0, 1)] * n, method="highs")
    assert sol.status == OPTIMAL
    assert sol.objective == pytest.approx(ref.fun, abs=1e-7)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6).filter(lambda v: np.linalg.norm(v) > 1e-2),
       st.floats(0.1, 10.0))
def test_ball_property(c, radius):
    prog, xs = ball(c, radius)
    sol = solve_socp(prog)
    assert sol.objective == pytest.approx(-radius * np.linalg.norm(c), abs=1e-7 * max(1.0, radius))


def test_all_variables_fixed():
    B = ProgramBuilder()
    x = B.var("x", 0.6, 0.6)
    y = B.var("y", 0.8, 0.8)
    t = B.var("t", 1.0, 1.0)
    B.cost(x, 2.0)
    B.cone([x, y], t)
    B.le({x: 1.0, y: 1.0}, 2.0)
    sol = solve_socp(B.build())
    assert sol.status == OPTIMAL and sol.objective == pytest.approx(1.2)
    B.le({x: 1.0}, 0.5)
    assert solve_socp(B.build()).status == INFEASIBLE
