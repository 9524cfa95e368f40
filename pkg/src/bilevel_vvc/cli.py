"""Command-line entry point.

Every subcommand writes ``<out>/<run-id>/<artifact>.json`` (plus CSVs for
``simulate``).  Output files depend only on the inputs and the seed; wall
clock timings go to a separate ``timings.json``.

Exit codes: 0 ok, 2 usage, 3 numerical failure, 4 infeasible.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .agents import AgentError, Plant, RoundConfig, instant_qbar, run_consensus_equal_ratio, run_distributed, \
    solve_lower_central
from .bnb import BnbConfig
from .conic import SingularKKTError
from .dispatcher import (DispatchConfig, DispatchError, LowerObjectiveSpec, OBJECTIVES, PeriodForecast, dispatch,
                         enumerate_bilevel, kkt_block_residual)
from .grid import NetworkError, bundled_path, load_network
from .harness import (RUN_MODES, HarnessConfig, HarnessError, RunMetrics, Scenario, compare_report, make_profiles,
                      run_closed_loop, write_period_csv, write_plot_csv)
from .powerflow import PfInput, PowerFlowError, solve_pf

log = logging.getLogger("bilevel_vvc")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_INFEASIBLE = 0, 2, 3, 4
TIMING_KEYS = ("solve_time", "wall_time", "dispatch_times", "avg_dispatch_time")


class UsageError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


class InfeasibleError(RuntimeError):
    pass


# -- helpers ------------------------------------------------------------------------------

def _net(args):
    path = Path(args.net)
    if not path.exists() and bundled_path_exists(args.net):
        path = bundled_path(args.net)
    return load_network(path, args.groups)


def bundled_path_exists(name: str) -> bool:
    try:
        return bundled_path(name).exists()
    except (FileNotFoundError, ValueError):
        return False


def _read_json(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc


def _split_timings(doc: dict) -> tuple[dict, dict]:
    keep = {k: v for k, v in doc.items() if k not in TIMING_KEYS}
    times = {k: v for k, v in doc.items() if k in TIMING_KEYS}
    return keep, times


class _Writer:
    def __init__(self, args):
        self.dir = Path(args.out) / (args.run_id or args.cmd)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.timings: dict = {}

    def json(self, name: str, doc: dict) -> Path:
        doc, times = _split_timings(doc)
        if times:
            self.timings[name] = times
        p = self.dir / f"{name}.json"
        p.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable))
        return p

    def close(self) -> None:
        if self.timings:
            (self.dir / "timings.json").write_text(json.dumps(self.timings, indent=2, default=_jsonable))


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    raise TypeError(f"not serializable: {type(x).__name__}")


def _spec(args) -> LowerObjectiveSpec:
    leader = args.leader
    if args.objective == "equal_ratio" and leader is None:
        raise UsageError("--objective equal_ratio needs --leader")
    weights = tuple(args.weights) if args.weights else (1.0, 1.0)
    return LowerObjectiveSpec(kind=args.objective, weights=weights, leader=leader)


def _forecast(args, net) -> PeriodForecast:
    if args.forecast:
        return PeriodForecast.from_dict(_read_json(args.forecast))
    if args.period is None:
        raise UsageError("give --forecast FILE or --period N (with --seed)")
    tl = make_profiles(net, args.seed)
    if not 0 <= args.period < tl.horizon:
        raise UsageError(f"--period must lie in 0..{tl.horizon - 1}")
    taps, cb = net.device_state()
    return tl.forecast(args.period, taps, cb)


def _dispatch_cfg(args) -> DispatchConfig:
    return DispatchConfig(bnb=BnbConfig(gap_tol=args.gap, time_limit=args.time_limit), bigM=args.bigM)


# -- subcommands --------------------------------------------------------------------------

def cmd_pf(args, out: _Writer) -> int:
    net = _net(args)
    inp = PfInput.from_dict(_read_json(args.inp)) if args.inp else PfInput()
    sol = solve_pf(net, inp, v_slack=args.v_slack)
    out.json("pf", sol.to_dict(net))
    if not sol.converged:
        raise NumericalError(f"power flow failed: {sol.message}; worst mismatch {sol.worst_mismatch:.3g}")
    print(f"converged in {sol.iterations} sweeps; loss {sol.total_loss * net.mva_base * 1000:.4f} kW")
    return EXIT_OK


def cmd_dispatch(args, out: _Writer) -> int:
    net = _net(args)
    fc = _forecast(args, net)
    spec = _spec(args)
    dec = dispatch(net, fc, args.mode, spec, _dispatch_cfg(args))
    doc = dec.to_dict(net)
    if args.mode == "bilevel" and net.pv_units:
        doc["kkt_residual"] = kkt_block_residual(net, fc, dec, spec)
    out.json("decision", doc)
    print(f"{args.mode}: taps {dec.taps} cb {dec.cb_units} loss {dec.objective * net.mva_base * 1000:.6f} kW "
          f"status {dec.status} eps {dec.eps:.3g}")
    return EXIT_OK


def cmd_oracle(args, out: _Writer) -> int:
    net = _net(args)
    fc = _forecast(args, net)
    dec = enumerate_bilevel(net, fc, _spec(args), cap=args.cap)
    out.json("oracle", dec.to_dict(net))
    print(f"oracle: taps {dec.taps} cb {dec.cb_units} loss {dec.objective * net.mva_base * 1000:.6f} kW "
          f"({dec.nodes} tuples)")
    return EXIT_OK


def cmd_lower(args, out: _Writer) -> int:
    net = _net(args)
    spec = _spec(args)
    if args.snapshot:
        inst = PfInput.from_dict(_read_json(args.snapshot))
    else:
        fc = _forecast(args, net)
        inst = fc.instant(*net.device_state())
    inst = inst.resolved(net)
    qbar = instant_qbar(net, inst.pv_p)
    low = solve_lower_central(net, inst, spec)
    doc = {"objective": spec.to_dict(), "q": low.q, "q_bar": qbar, "feasible": low.feasible,
           "kkt_residual": low.kkt_residual, "duals": {k: {str(b): v for b, v in d.items()}
                                                        for k, d in low.duals_by_bus(net).items()},
           "pv_buses": [u.bus for u in net.pv_units]}
    ratios = low.ratios(qbar)
    if args.distributed:
        rc = RoundConfig(max_rounds=args.max_rounds)
        plant = Plant(net, inst)
        if spec.kind == "equal_ratio":
            res = run_consensus_equal_ratio(net, plant, spec.leader, rc)
        else:
            res = run_distributed(net, plant, spec, rc)
        ratios = res.ratios()
        doc["distributed"] = {"q": res.q, "rounds": res.rounds, "converged": res.converged,
                              "max_error_vs_central": float(np.abs(res.q - low.q).max(initial=0.0))}
    unsat = (qbar > 0) & (np.abs(ratios) < 1.0 - 1e-9)
    spread = float(np.ptp(ratios[unsat])) if unsat.any() else 0.0
    doc["ratios"] = ratios
    doc["ratio_spread"] = spread
    out.json("lower", doc)
    print(f"lower ({spec.kind}): feasible={low.feasible} ratio spread {spread:.3g}")
    if not low.feasible:
        raise InfeasibleError("voltage band unreachable within the inverter boxes; least-violation point written")
    return EXIT_OK


def cmd_simulate(args, out: _Writer) -> int:
    if args.config:
        sc = Scenario.load(args.config)
        net = load_network(sc.network, sc.groups) if not args.net else _net(args)
    else:
        if not args.net:
            raise UsageError("simulate needs --net or --config")
        net = _net(args)
        sc = Scenario(network=str(args.net))
    modes = sc.modes
    if args.mode:
        modes = RUN_MODES if args.mode == "all" else (args.mode,)
    seed = args.seed if args.seed is not None else sc.seed
    spec = _spec(args) if args.objective_given else sc.lower_spec
    tl = make_profiles(net, seed, sc.shape, csv_path=args.csv or sc.csv_path, horizon=args.horizon or sc.horizon)
    cfg = HarnessConfig(rounds_per_step=args.rounds_per_step or sc.rounds_per_step,
                        full_rate=args.full_rate or sc.full_rate, rounds=sc.rounds)
    runs: list[RunMetrics] = []
    buses = [u.bus for u in net.pv_units]
    for mode in modes:
        m = run_closed_loop(net, tl, mode, spec, cfg)
        runs.append(m)
        out.json(f"metrics_{mode}", m.to_dict())
        write_period_csv(m, out.dir / f"periods_{mode}.csv")
        write_plot_csv(m, out.dir / f"plot_{mode}.csv", buses)
        print(f"{mode}: average loss {m.avg_loss_kw:.4f} kW, violation integral {m.violation_integral:.4g} p.u.*s, "
              f"max eps {m.max_eps:.3g}")
    if len(runs) >= 2:
        table = compare_report(runs)
        out.json("comparison", _table_without_times(table))
    return EXIT_OK


def _table_without_times(table: dict) -> dict:
    rows = {k: v for k, v in table["rows"].items() if "time" not in k}
    return {"columns": table["columns"], "rows": rows}


def cmd_compare(args, out: _Writer) -> int:
    runs = []
    for path in args.metrics:
        doc = _read_json(path)
        fields = {k: doc.get(k) for k in RunMetrics.__dataclass_fields__ if k in doc}
        fields.setdefault("dispatch_times", [])
        runs.append(RunMetrics(**fields))
    table = compare_report(runs)
    out.json("comparison", _table_without_times(table))
    for name, vals in table["rows"].items():
        print(f"{name:40s} " + "  ".join(f"{v:12.6g}" for v in vals))
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, net_required: bool = True) -> None:
    p.add_argument("--net", required=net_required, help="network JSON (or a bundled name such as ieee33.json)")
    p.add_argument("--groups", help="PV group partition file")
    p.add_argument("--out", default="runs", help="output root directory")
    p.add_argument("--run-id", help="output sub-directory (default: the subcommand name)")
    p.add_argument("-v", "--verbose", action="store_true")


def _objective(p: argparse.ArgumentParser) -> None:
    p.add_argument("--objective", choices=OBJECTIVES, default=None)
    p.add_argument("--weights", type=float, nargs=2, metavar=("COST", "LOSS"))
    p.add_argument("--leader", type=int, help="leader PV bus (equal_ratio)")


def _period(p: argparse.ArgumentParser) -> None:
    p.add_argument("--forecast", help="PeriodForecast JSON")
    p.add_argument("--period", type=int, help="hour of the seeded synthetic day to use as forecast")
    p.add_argument("--seed", type=int, default=7)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bilevel-vvc", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("pf", help="exact power flow of one snapshot")
    _common(p)
    p.add_argument("--in", dest="inp", help="PfInput JSON (loads, PV, devices); default nominal")
    p.add_argument("--v-slack", type=float)

    for name, helptext in (("dispatch", "single-period MISOCP dispatch"), ("oracle", "enumeration oracle")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _period(p)
        _objective(p)
        if name == "dispatch":
            p.add_argument("--mode", choices=("bilevel", "model1", "model2"), default="bilevel")
            p.add_argument("--bigM", type=float, default=100.0)
            p.add_argument("--gap", type=float, default=1e-6)
            p.add_argument("--time-limit", type=float)
        else:
            p.add_argument("--cap", type=int, default=10_000)

    p = sub.add_parser("lower", help="lower-level solve (central, optionally distributed)")
    _common(p)
    _period(p)
    _objective(p)
    p.add_argument("--snapshot", help="PfInput JSON for the instant")
    p.add_argument("--distributed", action="store_true", help="also run the inverter rounds")
    p.add_argument("--max-rounds", type=int, default=2000)

    p = sub.add_parser("simulate", help="24-h closed loop")
    _common(p, net_required=False)
    _objective(p)
    p.add_argument("--config", help="scenario JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=(*RUN_MODES, "all"))
    p.add_argument("--horizon", type=int)
    p.add_argument("--csv", help="profile CSV (load, pv columns)")
    p.add_argument("--rounds-per-step", type=int)
    p.add_argument("--full-rate", action="store_true")

    p = sub.add_parser("compare", help="comparison table from metrics files")
    p.add_argument("metrics", nargs="+", help="metrics JSON files written by simulate")
    p.add_argument("--out", default="runs")
    p.add_argument("--run-id")
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


COMMANDS = {"pf": cmd_pf, "dispatch": cmd_dispatch, "oracle": cmd_oracle, "lower": cmd_lower,
            "simulate": cmd_simulate, "compare": cmd_compare}


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    if hasattr(args, "objective"):
        args.objective_given = args.objective is not None
        args.objective = args.objective or "weighted"
    out = None
    try:
        out = _Writer(args)
        return COMMANDS[args.cmd](args, out)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, NetworkError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DispatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return {"usage": EXIT_USAGE, "numerical": EXIT_NUMERICAL}.get(exc.kind, EXIT_INFEASIBLE)
    except InfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (NumericalError, PowerFlowError, AgentError, HarnessError, SingularKKTError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    finally:
        if out is not None:
            out.close()


if __name__ == "__main__":
    sys.exit(main())
