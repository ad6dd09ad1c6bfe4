"""Monte Carlo batches, error indices and report files."""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .baseline_sigver import SigverParams, build_library, detect, measurement_features, topology_trace
from .errors import SolverError, TopoestError, ValidationError
from .estimator_ppv import EstimatorConfig, estimate_ppv
from .estimator_riv import estimate_riv
from .grid import SwitchPlan
from .measurement import LoadConfig, NoiseConfig, build_scenario, make_rng

ESTIMATORS = {"ppv": estimate_ppv, "riv": estimate_riv}
MODES = ("single_switch", "five_switch", "fixed")
PLAN_STREAM = 2


@dataclass(frozen=True)
class McConfig:
    """One Monte Carlo batch.

    ``mode`` picks the switching pattern: ``single_switch`` toggles one
    switch of ``prior``, ``five_switch`` draws random initial and final
    statuses for every switch, ``fixed`` replays ``plan`` in every scenario.
    """

    n_scenarios: int = 100
    horizon_sec: float = 1000.0
    dt_sec: float = 10.0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    sd_change: float = 0.0222
    load_profile: str = "fluctuation"
    mode: str = "five_switch"
    estimators: tuple = ("ppv", "riv")
    sigver: tuple = ()
    master_seed: int = 0
    prior: tuple = (0, 0, 0, 0, 0)
    plan: SwitchPlan | None = None
    estimator_cfg: EstimatorConfig = field(default_factory=EstimatorConfig)
    jobs: int | None = 1

    @property
    def n_instants(self):
        return int(round(self.horizon_sec / self.dt_sec)) + 1

    def validate(self):
        steps = self.horizon_sec / self.dt_sec
        if self.dt_sec <= 0 or abs(steps - round(steps)) > 1e-9 or steps < 3:
            raise ValidationError("horizon_sec / dt_sec must be an integer of at least 3")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        if self.mode == "fixed" and self.plan is None:
            raise ValidationError("fixed mode needs a plan")
        bad = set(self.estimators) - set(ESTIMATORS)
        if bad:
            raise ValidationError(f"unknown estimators {sorted(bad)}")
        if self.n_scenarios < 1:
            raise ValidationError("need at least one scenario")

    def load_config(self):
        return LoadConfig(sd_change=self.sd_change, profile=self.load_profile,
                          n_instants=self.n_instants, dt=self.dt_sec)


def sigver_name(p):
    tag = "" if p.channels == "magnitude" else f",{p.channels}"
    return f"sigver({p.min_norm:g},{p.min_proj:g},{p.tau}{tag})"


@dataclass
class MetricsReport:
    """Batch results; ``traces`` keep every per-instant topology for audits."""

    config: McConfig
    names: list
    times: tuple
    truth: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)
    errors_vm: dict = field(default_factory=dict)
    errors_va: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    failed_scenarios: list = field(default_factory=list)

    @property
    def scenarios(self):
        return sorted(self.truth)

    def accuracy(self, name):
        """Fraction of instants whose full switch vector is right."""
        ok = n = 0
        for s in self.scenarios:
            for est, tru in zip(self.traces[name][s], self.truth[s]):
                ok += est == tru
                n += 1
        return ok / n if n else float("nan")

    def scenario_accuracy(self, name):
        """Fraction of scenarios whose whole topology trace is right."""
        sc = self.scenarios
        if not sc:
            return float("nan")
        return sum(list(self.traces[name][s]) == list(self.truth[s]) for s in sc) / len(sc)

    def indices(self, name, quantity="vm"):
        """Per-bus (rmse, mae, me) pooled over all instants and scenarios."""
        err = self.errors_vm if quantity == "vm" else self.errors_va
        stack = np.concatenate([err[name][s] for s in self.scenarios], axis=0)
        return compute_indices(stack, np.zeros_like(stack))

    def scenario_indices(self, name, quantity="vm"):
        """(rmse, mae, me) arrays shaped (scenario, bus)."""
        err = self.errors_vm if quantity == "vm" else self.errors_va
        out = [compute_indices(err[name][s], np.zeros_like(err[name][s])) for s in self.scenarios]
        return tuple(np.array([o[k] for o in out]) for k in range(3))

    def mean_time(self, name):
        return float(np.mean(self.timings[name])) if self.timings.get(name) else float("nan")

    def p95_time(self, name):
        return float(np.percentile(self.timings[name], 95)) if self.timings.get(name) else float("nan")


def compute_indices(estimates, truths):
    """Per-column RMSE, MAE and maximum absolute error over rows (instants)."""
    e = np.asarray(estimates, dtype=float) - np.asarray(truths, dtype=float)
    if e.ndim == 1:
        e = e[:, None]
    a = np.abs(e)
    return np.sqrt(np.mean(e * e, axis=0)), np.mean(a, axis=0), np.max(a, axis=0)


def scenario_plan(cfg, index, n_switch):
    """Switch plan of scenario ``index``; event on an interior instant."""
    if cfg.mode == "fixed":
        return cfg.plan
    rng = make_rng(cfg.master_seed, index, PLAN_STREAM)
    n = cfg.n_instants
    k = int(rng.integers(1, n - 1))
    t_change = k * cfg.dt_sec
    if cfg.mode == "single_switch":
        before = tuple(int(v) for v in cfg.prior)
        after = list(before)
        e = int(rng.integers(n_switch))
        after[e] = 1 - after[e]
        return SwitchPlan.step(before, tuple(after), t_change)
    before = tuple(int(v) for v in rng.integers(0, 2, n_switch))
    while True:
        after = tuple(int(v) for v in rng.integers(0, 2, n_switch))
        if after != before:
            return SwitchPlan.step(before, after, t_change)


def run_scenario(model, cfg, index):
    """All estimators on one scenario; returns a plain dict for reduction."""
    plan = scenario_plan(cfg, index, model.n_switch)
    scen = build_scenario(model, plan, cfg.load_config(), cfg.noise, cfg.master_seed, index)
    res = {"index": index, "truth": list(scen.truth_topology), "traces": {}, "vm": {}, "va": {},
           "timings": {}, "failures": {}, "times": scen.times}
    true_vm = np.array([s.vm for s in scen.truth_state])
    true_va = np.array([s.va for s in scen.truth_state])
    for name in cfg.estimators:
        fn = ESTIMATORS[name]
        topos, vm, va, wall, fails = [], [], [], [], 0
        for ms in scen.measurements:
            t0 = time.perf_counter()
            try:
                r = fn(model, ms, cfg.estimator_cfg)
            except SolverError:
                fails += 1
                topos.append(None)
                vm.append(np.full(model.n_bus, np.nan))
                va.append(np.full(model.n_bus, np.nan))
                wall.append(time.perf_counter() - t0)
                continue
            wall.append(time.perf_counter() - t0)
            fails += not r.converged
            topos.append(r.topology)
            vm.append(r.state.vm)
            va.append(r.state.va)
        res["traces"][name] = topos
        res["vm"][name] = np.array(vm) - true_vm
        res["va"][name] = np.array(va) - true_va
        res["timings"][name] = wall
        res["failures"][name] = fails
    if cfg.sigver:
        prior = scen.truth_topology[0]
        libs = {}
        for p in cfg.sigver:
            name = sigver_name(p)
            t0 = time.perf_counter()
            if p.channels not in libs:
                libs[p.channels] = (build_library(model, prior, channels=p.channels),
                                    measurement_features(scen.measurements, p.channels))
            lib, series = libs[p.channels]
            events = detect(series, lib, p, scen.times, model=model)
            wall = time.perf_counter() - t0
            res["traces"][name] = topology_trace(prior, scen.times, events)
            res["timings"][name] = [wall / len(scen.times)] * len(scen.times)
            res["failures"][name] = 0
    return res


def _worker(args):
    model, cfg, index = args
    try:
        return run_scenario(model, cfg, index)
    except TopoestError as exc:
        return {"index": index, "error": f"{type(exc).__name__}: {exc}"}


def run_montecarlo(model, cfg, progress=None):
    """Run every scenario and reduce the results in scenario-index order."""
    cfg.validate()
    if cfg.mode != "fixed" and len(cfg.prior) != model.n_switch:
        cfg = replace(cfg, prior=(0,) * model.n_switch)
    names = list(cfg.estimators) + [sigver_name(p) for p in cfg.sigver]
    jobs = cfg.jobs or os.cpu_count() or 1
    tasks = [(model, cfg, i) for i in range(cfg.n_scenarios)]
    if jobs == 1:
        results = []
        for tk in tasks:
            results.append(_worker(tk))
            if progress:
                progress(len(results), cfg.n_scenarios)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_worker, tasks))
    results.sort(key=lambda r: r["index"])
    times = tuple(k * cfg.dt_sec for k in range(cfg.n_instants))
    rep = MetricsReport(cfg, names, times)
    for name in names:
        rep.traces[name], rep.timings[name], rep.failures[name] = {}, [], 0
        rep.errors_vm[name], rep.errors_va[name] = {}, {}
    for r in results:
        if "error" in r:
            rep.failed_scenarios.append((r["index"], r["error"]))
            continue
        s = r["index"]
        rep.truth[s] = r["truth"]
        for name in names:
            rep.traces[name][s] = r["traces"][name]
            rep.timings[name].extend(r["timings"][name])
            rep.failures[name] += r["failures"][name]
            if name in r["vm"]:
                rep.errors_vm[name][s] = r["vm"][name]
                rep.errors_va[name][s] = r["va"][name]
    return rep


# ---------------------------------------------------------------------------
# report files


def run_id(cfg):
    return f"{cfg.mode}-seed{cfg.master_seed}-n{cfg.n_scenarios}"


def _w(path):
    fh = open(path, "w", newline="", encoding="utf-8")
    return fh, csv.writer(fh, lineterminator="\n")


def emit_report(report, out_dir, plots=True):
    """Write the CSV set (and gnuplot scripts) into ``out_dir``; returns paths."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    fh, w = _w(d / "accuracy.csv")
    w.writerow(["estimator", "instants", "accuracy", "scenarios", "scenario_accuracy", "failures",
                "failed_scenarios"])
    n_inst = sum(len(v) for v in report.truth.values())
    for name in report.names:
        w.writerow([name, n_inst, repr(report.accuracy(name)), len(report.truth),
                    repr(report.scenario_accuracy(name)), report.failures[name],
                    len(report.failed_scenarios)])
    fh.close()
    paths.append(d / "accuracy.csv")
    for q in ("vm", "va"):
        fh, w = _w(d / f"indices_{q}.csv")
        w.writerow(["estimator", "bus", "rmse", "mae", "me"])
        for name in report.names:
            if not report.errors_vm.get(name):
                continue
            rmse, mae, me = report.indices(name, q)
            for k in range(rmse.size):
                w.writerow([name, k + 1, repr(float(rmse[k])), repr(float(mae[k])), repr(float(me[k]))])
        fh.close()
        paths.append(d / f"indices_{q}.csv")
    fh, w = _w(d / "timings.csv")
    w.writerow(["estimator", "mean_sec", "p95_sec", "snapshots"])
    for name in report.names:
        w.writerow([name, repr(report.mean_time(name)), repr(report.p95_time(name)),
                    len(report.timings[name])])
    fh.close()
    paths.append(d / "timings.csv")
    fh, w = _w(d / "switch_trace.csv")
    n_sw = len(next(iter(report.truth.values()))[0]) if report.truth else 0
    w.writerow(["scenario", "t_sec", "source"] + [f"theta_{k}" for k in range(n_sw)])
    for s in report.scenarios:
        for name in ["truth"] + report.names:
            seq = report.truth[s] if name == "truth" else report.traces[name][s]
            for t, topo in zip(report.times, seq):
                vals = ["" for _ in range(n_sw)] if topo is None else [int(v) for v in topo]
                w.writerow([s, f"{t:g}", name] + vals)
    fh.close()
    paths.append(d / "switch_trace.csv")
    if plots:
        paths += write_plot_scripts(d, [n for n in report.names if report.errors_vm.get(n)], n_sw)
    return paths


def write_plot_scripts(out_dir, estimators, n_switch):
    """gnuplot scripts that read the CSVs in ``out_dir``."""
    d = Path(out_dir)
    out = []
    trace = [
        "set datafile separator ','",
        "set terminal pngcairo size 900,600",
        "set output 'switch_trace.png'",
        "set xlabel 't (s)'",
        "set ylabel 'switch status (offset per switch)'",
        "plot \\",
    ]
    lines = []
    for k in range(n_switch):
        lines.append(f"  'switch_trace.csv' using ((stringcolumn(1) eq '0' && stringcolumn(3) eq 'truth') "
                     f"? $2 : 1/0):(${4 + k} + {2 * k}) with steps title 'truth {k}'")
    trace.append(", \\\n".join(lines))
    (d / "switch_trace.gp").write_text("\n".join(trace) + "\n", encoding="utf-8")
    out.append(d / "switch_trace.gp")
    for q, unit in (("vm", "p.u."), ("va", "rad")):
        gp = [
            "set datafile separator ','",
            "set terminal pngcairo size 900,600",
            f"set output 'indices_{q}.png'",
            "set xlabel 'bus'",
            f"set ylabel 'error ({unit})'",
            "plot \\",
        ]
        lines = []
        for name in estimators:
            for col, idx in (("rmse", 3), ("mae", 4), ("me", 5)):
                lines.append(f"  'indices_{q}.csv' using (stringcolumn(1) eq '{name}' ? $2 : 1/0):{idx} "
                             f"with linespoints title '{name} {col}'")
        gp.append(", \\\n".join(lines))
        (d / f"indices_{q}.gp").write_text("\n".join(gp) + "\n", encoding="utf-8")
        out.append(d / f"indices_{q}.gp")
    return out


def default_sigver_grid(channels="magnitude"):
    """The parameter triples compared in the baseline study, keyed by case."""
    grid = {
        "sd2.22": (SigverParams(0.004, 0.8, 5), SigverParams(0.006, 0.9, 5), SigverParams(0.006, 0.8, 4)),
        "sd3": (SigverParams(0.004, 0.8, 5), SigverParams(0.006, 0.8, 5), SigverParams(0.008, 0.9, 5)),
        "sd4": (SigverParams(0.004, 0.8, 5), SigverParams(0.007, 0.8, 5), SigverParams(0.008, 0.9, 5)),
        "residential": (SigverParams(0.006, 0.8, 5), SigverParams(0.007, 0.8, 5), SigverParams(0.008, 0.9, 5)),
    }
    return {k: tuple(replace(p, channels=channels) for p in v) for k, v in grid.items()}


BASELINE_CASES = {
    "sd2.22": {"sd_change": 0.0222, "load_profile": "fluctuation"},
    "sd3": {"sd_change": 0.03, "load_profile": "fluctuation"},
    "sd4": {"sd_change": 0.04, "load_profile": "fluctuation"},
    "residential": {"sd_change": 0.0, "load_profile": "residential"},
}


def compare_baseline(model, n_scenarios=100, master_seed=0, cases=None, estimators=("ppv",),
                     jobs=1, progress=None, channels="magnitude"):
    """Single-switch batches per load case; one row per (case, method)."""
    grid = default_sigver_grid(channels)
    rows = []
    for case in cases or list(BASELINE_CASES):
        cfg = McConfig(n_scenarios=n_scenarios, noise=NoiseConfig.pmu_only(), mode="single_switch",
                       estimators=tuple(estimators), sigver=grid[case], master_seed=master_seed,
                       jobs=jobs, **BASELINE_CASES[case])
        rep = run_montecarlo(model, cfg, progress)
        for name in rep.names:
            rows.append({"case": case, "method": name, "scenario_accuracy": rep.scenario_accuracy(name),
                         "instant_accuracy": rep.accuracy(name)})
    return rows
