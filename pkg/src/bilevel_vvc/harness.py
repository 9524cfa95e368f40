"""Two-timescale closed loop: hourly device dispatch, inverter rounds in between.

Every metric is computed from plant (exact power flow) solutions; the conic
model only contributes predictions and its relaxation gap.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .agents import RoundConfig, make_controller
from .dispatcher import (DispatchConfig, DispatchDecision, DispatchError, LowerObjectiveSpec, PeriodForecast,
                         dispatch)
from .grid import Network, load_network, q_limits
from .powerflow import PfInput, solve_pf

log = logging.getLogger(__name__)

RUN_MODES = ("bilevel", "model1", "model2", "no-control")
SHAPES = ("synthetic-solar-day", "csv")
PV_ERROR = 0.20
LOAD_ERROR = 0.10


# -- profiles -----------------------------------------------------------------------------

@dataclass
class ScenarioTimeline:
    """Minute-resolution truth plus hourly forecasts.

    ``load_p``/``load_q`` are (steps, n_bus), ``pv_p`` is (steps, n_pv);
    ``fc_*`` hold one row per period.
    """

    horizon: int
    steps_per_period: int
    load_p: np.ndarray
    load_q: np.ndarray
    pv_p: np.ndarray
    fc_load_p: np.ndarray
    fc_load_q: np.ndarray
    fc_pv_p: np.ndarray
    seed: int
    shape: str = "synthetic-solar-day"

    def __post_init__(self):
        n = self.horizon * self.steps_per_period
        if self.load_p.shape[0] != n or self.load_q.shape[0] != n or self.pv_p.shape[0] != n:
            raise ValueError(f"profiles must have {n} rows (horizon x steps per period)")
        if self.fc_load_p.shape[0] != self.horizon or self.fc_pv_p.shape[0] != self.horizon:
            raise ValueError(f"forecast tables must have {self.horizon} rows")

    @property
    def n_steps(self) -> int:
        return self.horizon * self.steps_per_period

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.load_p, self.load_q, self.pv_p, self.fc_load_p, self.fc_load_q, self.fc_pv_p):
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        h.update(f"{self.horizon}/{self.steps_per_period}".encode())
        return h.hexdigest()

    def forecast(self, t: int, prev_taps, prev_cb) -> PeriodForecast:
        return PeriodForecast(load_p=self.fc_load_p[t].copy(), load_q=self.fc_load_q[t].copy(),
                              pv_p=self.fc_pv_p[t].copy(), prev_taps=tuple(prev_taps),
                              prev_cb=tuple(prev_cb), period=t)

    def snapshot(self, period: int, minute: int = 0) -> PfInput:
        """Actual loads and PV at ``minute`` into ``period``."""
        k = period * self.steps_per_period + minute
        return PfInput(load_p=self.load_p[k].copy(), load_q=self.load_q[k].copy(), pv_p=self.pv_p[k].copy())

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ScenarioTimeline":
        arrays = ("load_p", "load_q", "pv_p", "fc_load_p", "fc_load_q", "fc_pv_p")
        return cls(**{k: (np.array(doc[k], float) if k in arrays else doc[k])
                      for k in cls.__dataclass_fields__ if k in doc})


def solar_shape(hours: np.ndarray) -> np.ndarray:
    """Clear-sky bell between 06:00 and 20:00, zero at night."""
    x = np.clip((hours - 6.0) / 14.0, 0.0, 1.0)
    out = np.sin(np.pi * x) ** 1.5
    out[(hours <= 6.0) | (hours >= 20.0)] = 0.0
    return out


def load_shape(hours: np.ndarray) -> np.ndarray:
    """Double-hump day curve with the larger hump in the evening (peak near 1)."""
    return 0.42 + 0.22 * np.exp(-((hours - 8.5) / 1.8) ** 2) + 0.58 * np.exp(-((hours - 19.5) / 2.0) ** 2)


def _read_shape_csv(path: str | Path, n: int) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != n:
        raise ValueError(f"{path}: expected {n} rows (horizon x steps per period), found {len(rows)}")
    try:
        load = np.array([float(r["load"]) for r in rows])
        pv = np.array([float(r["pv"]) for r in rows])
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: need numeric 'load' and 'pv' columns ({exc})") from exc
    return load, pv


def make_profiles(net: Network, seed: int = 7, shape: str = "synthetic-solar-day", *,
                  csv_path: str | Path | None = None, horizon: int = 24, steps_per_period: int = 60,
                  pv_peak: float = 1.0, load_peak: float = 1.0, pv_noise: float = 0.05,
                  load_noise: float = 0.02) -> ScenarioTimeline:
    """Minute profiles and hourly forecasts with bounded uniform percent errors.

    ``csv`` input needs ``load`` and ``pv`` columns of normalized factors with
    one row per inner step; noise is not added to CSV profiles.
    """
    if shape not in SHAPES:
        raise ValueError(f"unknown profile shape {shape!r}; choose from {SHAPES}")
    rng = np.random.default_rng(seed)
    n = horizon * steps_per_period
    npv = len(net.pv_units)
    hours = np.arange(n) * (24.0 / n)
    if shape == "csv":
        if csv_path is None:
            raise ValueError("shape 'csv' needs csv_path")
        lf, pf = _read_shape_csv(csv_path, n)
        lf = np.tile(lf[:, None], (1, net.n_bus))
        pf = np.tile(pf[:, None], (1, npv))
    else:
        lf = load_peak * load_shape(hours)[:, None] * (1.0 + load_noise * rng.standard_normal((n, net.n_bus)))
        pf = pv_peak * solar_shape(hours)[:, None] * (1.0 + pv_noise * rng.standard_normal((n, npv)))
        lf = np.clip(lf, 0.0, None)
        pf = np.clip(pf, 0.0, 1.0)
    load_p = lf * net.load_p
    load_q = lf * net.load_q
    rating = np.array([u.p_rating for u in net.pv_units])
    pv_p = pf * rating
    e_pv = rng.uniform(-PV_ERROR, PV_ERROR, size=(horizon, npv))
    e_load = rng.uniform(-LOAD_ERROR, LOAD_ERROR, size=(horizon, net.n_bus))
    per = lambda a: a.reshape(horizon, steps_per_period, -1).mean(axis=1)
    # an inverter cannot be forecast above its rating; clipping only moves toward the truth
    s_rating = np.array([u.s_rating for u in net.pv_units])
    return ScenarioTimeline(
        horizon=horizon, steps_per_period=steps_per_period, load_p=load_p, load_q=load_q, pv_p=pv_p,
        fc_load_p=per(load_p) * (1.0 + e_load), fc_load_q=per(load_q) * (1.0 + e_load),
        fc_pv_p=np.minimum(per(pv_p) * (1.0 + e_pv), s_rating), seed=seed, shape=shape)


# -- closed loop --------------------------------------------------------------------------

@dataclass(frozen=True)
class HarnessConfig:
    rounds_per_step: int = 2
    full_rate: bool = False          # 120 rounds of 0.5 s per 1-minute step
    rounds: RoundConfig = field(default_factory=RoundConfig)
    dispatch: DispatchConfig = field(default_factory=DispatchConfig)
    settle_rounds: int = 120
    violation_deadband: float = 1e-4  # p.u. magnitude ignored as measurement noise
    eps_flag: float = 1e-4

    def __post_init__(self):
        if self.rounds_per_step < 1 or self.settle_rounds < 1:
            raise ValueError("rounds_per_step and settle_rounds must be at least 1")

    @property
    def inner_rounds(self) -> int:
        return 120 if self.full_rate else self.rounds_per_step


@dataclass
class RunMetrics:
    mode: str
    timeline: str                    # fingerprint of the timeline used
    avg_loss_kw: float
    period_loss_kw: list[float]
    max_eps: float
    violation_count: int             # inner samples with any bus outside the band
    violation_integral: float        # p.u. * s beyond the band, all samples
    settled_violation_integral: float
    hourly_over: list[float]         # p.u. * s over-voltage per period
    hourly_under: list[float]
    settled_hourly: list[float]
    tap_moves: int
    cb_moves: int
    schedule: list[dict]
    dispatch_times: list[float]
    convergence: list[dict]
    warnings: list[str] = field(default_factory=list)
    wall_time: float = 0.0
    trace: list[dict] = field(default_factory=list, repr=False)

    @property
    def avg_dispatch_time(self) -> float:
        return float(np.mean(self.dispatch_times)) if self.dispatch_times else 0.0

    def to_dict(self, with_trace: bool = False) -> dict:
        doc = {k: v for k, v in self.__dict__.items() if k != "trace"}
        doc["avg_dispatch_time"] = self.avg_dispatch_time
        if with_trace:
            doc["trace"] = self.trace
        return doc


class HarnessError(RuntimeError):
    """Plant divergence inside the closed loop (carries the period/step stamp)."""


def _neutral(net: Network) -> tuple[tuple[int, ...], tuple[int, ...]]:
    return tuple(o.neutral for o in net.oltcs), tuple(0 for _ in net.capbanks)


def _qbar(net: Network, pv_p: np.ndarray) -> np.ndarray:
    return np.array([q_limits(u, min(max(p, 0.0), u.s_rating))[1] for u, p in zip(net.pv_units, pv_p)])


def run_closed_loop(net: Network, timeline: ScenarioTimeline, mode: str,
                    lower_spec: LowerObjectiveSpec | None = None,
                    cfg: HarnessConfig | None = None, *, keep_trace: bool = True) -> RunMetrics:
    """Simulate one day: dispatch each period from forecasts, then run inverter
    rounds against the plant at every inner step."""
    if mode not in RUN_MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {RUN_MODES}")
    cfg = cfg or HarnessConfig()
    spec = lower_spec or LowerObjectiveSpec()
    t_wall = time.perf_counter()
    npv = len(net.pv_units)
    taps, cb = net.device_state()
    if mode == "no-control":
        taps, cb = _neutral(net)
    inner = cfg.inner_rounds
    step_seconds = 3600.0 / timeline.steps_per_period      # one period is an hour
    dt = step_seconds / inner
    settled_after = min(cfg.settle_rounds, inner)
    ctl = None
    if mode != "no-control" and npv:
        ctl = make_controller(net, spec, cfg.rounds, _qbar(net, timeline.pv_p[0]))
    out = dict(loss=[], viol=0.0, settled=0.0, count=0)
    period_loss, hourly_over, hourly_under, settled_hourly = [], [], [], []
    schedule, times, conv, warnings, trace = [], [], [], [], []
    max_eps = 0.0
    tap_moves = cb_moves = 0
    v_init = None
    vmin, vmax = np.sqrt(net.v_min_sq), np.sqrt(net.v_max_sq)
    for t in range(timeline.horizon):
        entry = {"period": t, "relaxed": False, "eps": 0.0, "status": "fixed"}
        if mode != "no-control":
            fc = timeline.forecast(t, taps, cb)
            t0 = time.perf_counter()
            try:
                dec: DispatchDecision = dispatch(net, fc, mode, spec, cfg.dispatch)
            except DispatchError as exc:
                warnings.append(f"period {t}: dispatch failed ({exc}); devices held")
                log.warning(warnings[-1])
                dec = None
            times.append(time.perf_counter() - t0)
            if dec is not None:
                tap_moves += sum(abs(a - b) for a, b in zip(dec.taps, taps))
                cb_moves += sum(abs(a - b) for a, b in zip(dec.cb_units, cb))
                taps, cb = dec.taps, dec.cb_units
                max_eps = max(max_eps, dec.eps)
                entry.update(relaxed=dec.relaxed, eps=dec.eps, status=dec.status, objective=dec.objective)
                if dec.eps > cfg.eps_flag:
                    warnings.append(f"period {t}: relaxation gap {dec.eps:.3g} above {cfg.eps_flag:g}")
                warnings += [f"period {t}: {w}" for w in dec.warnings]
        entry.update(taps=list(taps), cb_units=list(cb))
        schedule.append(entry)
        p_loss, p_over, p_under, p_settled = [], 0.0, 0.0, 0.0
        quiet_rounds = 0
        for s in range(timeline.steps_per_period):
            k = t * timeline.steps_per_period + s
            inp = PfInput(load_p=timeline.load_p[k], load_q=timeline.load_q[k], pv_p=timeline.pv_p[k],
                          taps=taps, cb_units=cb)
            if ctl is not None:
                ctl.set_boxes(_qbar(net, timeline.pv_p[k]))

            def plant(q, _inp=inp):
                nonlocal v_init
                pf = solve_pf(net, replace(_inp, pv_q=np.asarray(q)), v_init=v_init)
                if not pf.converged:
                    raise HarnessError(f"plant failed at period {t}, step {s}: {pf.message}")
                v_init = pf.v_sq
                return pf

            for r in range(inner):
                if ctl is not None:
                    ctl.step(plant)
                q = ctl.q if ctl is not None else np.zeros(npv)
                pf = plant(q)
                loss_kw = pf.total_loss * net.mva_base * 1000.0
                v = np.sqrt(pf.v_sq)
                over = np.maximum(v - vmax - cfg.violation_deadband, 0.0).sum()
                under = np.maximum(vmin - v - cfg.violation_deadband, 0.0).sum()
                p_loss.append(loss_kw)
                p_over += over * dt
                p_under += under * dt
                out["count"] += int(over + under > 0)
                if r + 1 >= settled_after:
                    p_settled += (over + under) * dt
                if keep_trace and r == inner - 1:
                    trace.append({"step": k, "hour": k * 24.0 / timeline.n_steps, "v_min": float(v.min()),
                                  "v_max": float(v.max()), "loss_kw": loss_kw, "q": q.tolist(),
                                  "taps": list(taps), "cb_units": list(cb)})
            if ctl is not None:
                quiet_rounds = ctl.quiet
        period_loss.append(float(np.mean(p_loss)))
        out["loss"] += p_loss
        hourly_over.append(p_over)
        hourly_under.append(p_under)
        settled_hourly.append(p_settled)
        conv.append({"period": t, "quiet_rounds": int(quiet_rounds),
                     "converged": bool(ctl.converged) if ctl is not None else True})
    return RunMetrics(
        mode=mode, timeline=timeline.fingerprint(), avg_loss_kw=float(np.mean(out["loss"])),
        period_loss_kw=period_loss, max_eps=max_eps, violation_count=out["count"],
        violation_integral=float(sum(hourly_over) + sum(hourly_under)),
        settled_violation_integral=float(sum(settled_hourly)), hourly_over=hourly_over,
        hourly_under=hourly_under, settled_hourly=settled_hourly, tap_moves=tap_moves, cb_moves=cb_moves,
        schedule=schedule, dispatch_times=times, convergence=conv, warnings=warnings,
        wall_time=time.perf_counter() - t_wall, trace=trace)


# -- reporting ----------------------------------------------------------------------------

REPORT_ROWS = (
    ("Maximum relaxation gap", "max_eps"),
    ("Average solution time (s)", "avg_dispatch_time"),
    ("Average power loss (kW)", "avg_loss_kw"),
    ("Violation integral (p.u.*s)", "violation_integral"),
    ("Settled violation integral (p.u.*s)", "settled_violation_integral"),
    ("Tap moves", "tap_moves"),
    ("CB moves", "cb_moves"),
)


def compare_report(metrics: Sequence[RunMetrics], path: str | Path | None = None) -> dict:
    """Side-by-side table of runs on one timeline; writes ``<path>.csv`` and ``<path>.json``."""
    if len(metrics) < 2:
        raise ValueError("a comparison needs at least two runs")
    prints = {m.timeline for m in metrics}
    if len(prints) != 1:
        raise ValueError("runs were made on different timelines")
    labels = [m.mode for m in metrics]
    rows = {name: [getattr(m, attr) for m in metrics] for name, attr in REPORT_ROWS}
    table = {"columns": labels, "rows": rows}
    if path is not None:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", *labels])
            for name, vals in rows.items():
                w.writerow([name, *vals])
        p.with_suffix(".json").write_text(json.dumps(table, indent=2))
    return table


def write_period_csv(m: RunMetrics, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["period", "taps", "cb_units", "loss_kw", "over", "under", "settled", "eps", "relaxed",
                    "status", "dispatch_time"])
        for t, e in enumerate(m.schedule):
            w.writerow([t, " ".join(map(str, e["taps"])), " ".join(map(str, e["cb_units"])), m.period_loss_kw[t],
                        m.hourly_over[t], m.hourly_under[t], m.settled_hourly[t], e["eps"], e["relaxed"],
                        e["status"], m.dispatch_times[t] if t < len(m.dispatch_times) else ""])


def write_plot_csv(m: RunMetrics, path: str | Path, pv_buses: Sequence[int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "hour", "v_min", "v_max", "loss_kw", "taps", "cb_units", *[f"q[{b}]" for b in pv_buses]])
        for r in m.trace:
            w.writerow([r["step"], r["hour"], r["v_min"], r["v_max"], r["loss_kw"], " ".join(map(str, r["taps"])),
                        " ".join(map(str, r["cb_units"])), *r["q"]])


# -- scenario files -----------------------------------------------------------------------

@dataclass
class Scenario:
    network: str
    seed: int = 7
    horizon: int = 24
    modes: tuple[str, ...] = RUN_MODES
    lower_spec: LowerObjectiveSpec = field(default_factory=LowerObjectiveSpec)
    rounds: RoundConfig = field(default_factory=RoundConfig)
    rounds_per_step: int = 2
    full_rate: bool = False
    shape: str = "synthetic-solar-day"
    csv_path: str | None = None
    groups: str | None = None

    @classmethod
    def from_dict(cls, doc: Mapping, base: Path | None = None) -> "Scenario":
        def rel(p):
            if p is None or base is None or Path(p).is_absolute():
                return p
            return str((base / p).resolve()) if (base / p).exists() else p

        modes = doc.get("modes", list(RUN_MODES))
        if modes == "all" or modes == ["all"]:
            modes = list(RUN_MODES)
        bad = [m for m in modes if m not in RUN_MODES]
        if bad:
            raise ValueError(f"unknown modes {bad}; choose from {RUN_MODES}")
        return cls(network=rel(doc["network"]), seed=int(doc.get("seed", 7)), horizon=int(doc.get("horizon", 24)),
                   modes=tuple(modes), lower_spec=LowerObjectiveSpec.from_dict(doc.get("lower_spec", {})),
                   rounds=RoundConfig.from_dict(doc.get("agents", {})),
                   rounds_per_step=int(doc.get("rounds_per_step", 2)), full_rate=bool(doc.get("full_rate", False)),
                   shape=doc.get("shape", "synthetic-solar-day"), csv_path=rel(doc.get("csv")),
                   groups=rel(doc.get("groups")))

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        p = Path(path)
        return cls.from_dict(json.loads(p.read_text()), p.parent)


def run_scenario(sc: Scenario, outdir: str | Path, net: Network | None = None) -> dict[str, RunMetrics]:
    """Run every mode of ``sc`` on one timeline and write metrics, CSVs and the comparison."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    net = net or load_network(sc.network, sc.groups)
    tl = make_profiles(net, sc.seed, sc.shape, csv_path=sc.csv_path, horizon=sc.horizon)
    cfg = HarnessConfig(rounds_per_step=sc.rounds_per_step, full_rate=sc.full_rate, rounds=sc.rounds)
    runs = {}
    buses = [u.bus for u in net.pv_units]
    for mode in sc.modes:
        m = run_closed_loop(net, tl, mode, sc.lower_spec, cfg)
        runs[mode] = m
        (out / f"metrics_{mode}.json").write_text(json.dumps(m.to_dict(), indent=2))
        write_period_csv(m, out / f"periods_{mode}.csv")
        write_plot_csv(m, out / f"plot_{mode}.csv", buses)
    if len(runs) >= 2:
        compare_report(list(runs.values()), out / "comparison")
    return runs
