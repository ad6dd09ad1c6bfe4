"""Command-line entry point: ``topoest <subcommand>``.

Exit codes: 0 success, 2 invalid input, 3 solver failure, 4 an estimate
did not converge.
"""

from __future__ import annotations

import csv
import functools
import sys
from pathlib import Path

import click

from . import grid as gridmod
from .errors import SolverError, TopoestError, ValidationError
from .estimator_ppv import EstimatorConfig, estimate_header, estimate_row, estimate_ppv
from .estimator_riv import estimate_riv
from .harness import BASELINE_CASES, McConfig, compare_baseline, emit_report, run_id, run_montecarlo
from .harness import write_plot_scripts
from .measurement import (
    LoadConfig,
    NoiseConfig,
    build_scenario,
    read_measurements,
    write_measurements,
    write_topology,
    write_truth,
)

EXIT_VALIDATION, EXIT_SOLVER, EXIT_NONCONVERGED = 2, 3, 4
ESTIMATE_FUNCS = {"ppv": estimate_ppv, "riv": estimate_riv}


def _guard(fn):
    """Map library errors onto the documented exit codes."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SolverError as exc:
            click.echo(f"solver error: {exc}", err=True)
            sys.exit(EXIT_SOLVER)
        except (TopoestError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)
    return wrapper


def _load_grid(path):
    return gridmod.load_grid(path) if path else gridmod.ieee33()


def _load_plan(path, n_switch):
    return gridmod.load_plan(path, n_switch) if path else gridmod.fig3_plan()


def _noise(mode):
    return {"on": NoiseConfig(), "off": NoiseConfig.off(), "pmu-only": NoiseConfig.pmu_only()}[mode]


def _models(text):
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [n for n in names if n not in ESTIMATE_FUNCS]
    if not names or bad:
        raise click.BadParameter(f"choose from {sorted(ESTIMATE_FUNCS)}, comma separated")
    return names


seed_option = click.option("--seed", type=int, default=0, show_default=True, envvar="TOPOEST_SEED",
                           help="Master seed (falls back to $TOPOEST_SEED).")
grid_option = click.option("--grid", "grid_path", type=click.Path(exists=True, dir_okay=False),
                           help="Grid file; the bundled 33-bus feeder if omitted.")
noise_option = click.option("--noise", type=click.Choice(["on", "off", "pmu-only"]), default="on",
                            show_default=True, help="Measurement noise model.")
sd_option = click.option("--sd", type=float, default=0.0222, show_default=True,
                         help="SD of the relative load change between instants.")
profile_option = click.option("--profile", type=click.Choice(["fluctuation", "random_walk", "residential"]),
                              default="fluctuation", show_default=True, help="Load process.")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", count=True, help="Print progress to stderr.")
@click.pass_context
def main(ctx, verbose):
    """Joint switch-topology detection and state estimation for distribution feeders."""
    ctx.obj = {"verbose": verbose}


@main.command()
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="fixtures", show_default=True)
def fixture(out_dir):
    """Write the bundled 33-bus grid and the example switch plan."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / "ieee33.grid").write_text(gridmod.fixture_text("ieee33.grid"), encoding="utf-8")
    (d / "fig3.plan").write_text(gridmod.fixture_text("fig3.plan"), encoding="utf-8")
    click.echo(str(d))


@main.command()
@grid_option
@click.option("--plan", "plan_path", type=click.Path(exists=True, dir_okay=False),
              help="Switch plan; the bundled three-switch plan if omitted.")
@seed_option
@noise_option
@sd_option
@profile_option
@click.option("--instants", type=int, default=101, show_default=True)
@click.option("--dt", type=float, default=10.0, show_default=True, help="Seconds between instants.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Default: out/sim-seed<seed>.")
@_guard
def simulate(grid_path, plan_path, seed, noise, sd, profile, instants, dt, out_dir):
    """Simulate truth and measurements for a switch plan."""
    model = _load_grid(grid_path)
    plan = _load_plan(plan_path, model.n_switch)
    scen = build_scenario(model, plan, LoadConfig(sd_change=sd, profile=profile, n_instants=instants, dt=dt),
                          _noise(noise), seed)
    d = Path(out_dir or f"out/sim-seed{seed}")
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "measurements.csv", "w", newline="", encoding="utf-8") as fh:
        write_measurements(scen.measurements, fh)
    with open(d / "truth.csv", "w", newline="", encoding="utf-8") as fh:
        write_truth(scen, fh)
    with open(d / "topology.csv", "w", newline="", encoding="utf-8") as fh:
        write_topology(scen.times, scen.truth_topology, fh)
    click.echo(str(d))


@main.command()
@grid_option
@click.option("--in", "in_dir", type=click.Path(exists=True, file_okay=False), required=True,
              help="Directory holding measurements.csv.")
@click.option("--model", "models", default="ppv", show_default=True, help="ppv, riv or ppv,riv.")
@click.option("--big-m", type=float, default=10.0, show_default=True)
@click.option("--tol", type=float, default=1e-6, show_default=True)
@click.option("--max-iter", type=int, default=20, show_default=True)
@click.option("--strategy", type=click.Choice(["branch_and_bound", "enumerate"]), default="branch_and_bound",
              show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="Default: <in>/estimates.csv.")
@click.pass_context
@_guard
def estimate(ctx, grid_path, in_dir, models, big_m, tol, max_iter, strategy, out_path):
    """Estimate topology and state at every instant of a measurement file."""
    names = _models(models)
    model = _load_grid(grid_path)
    msets = read_measurements((Path(in_dir) / "measurements.csv").read_text(encoding="utf-8"))
    cfg = EstimatorConfig(tol=tol, max_iter=max_iter, big_m=big_m, strategy=strategy)
    out = Path(out_path) if out_path else Path(in_dir) / "estimates.csv"
    all_ok = True
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(estimate_header(model.n_switch, model.n_bus))
        for ms in msets:
            for name in names:
                res = ESTIMATE_FUNCS[name](model, ms, cfg)
                all_ok &= res.converged
                w.writerow(estimate_row(res))
                if ctx.obj["verbose"]:
                    click.echo(f"t={ms.t:g} {name} {res.topology} iters={res.iterations}", err=True)
    click.echo(str(out))
    if not all_ok:
        click.echo("some estimates did not converge", err=True)
        sys.exit(EXIT_NONCONVERGED)


def _parse_triples(values, channels):
    from .baseline_sigver import SigverParams
    out = []
    for v in values:
        try:
            a, b, c = v.split(",")
            out.append(SigverParams(float(a), float(b), int(c), channels))
        except ValueError:
            raise click.BadParameter(f"expected min_norm,min_proj,tau; got {v!r}") from None
    return tuple(out)


@main.command()
@grid_option
@click.option("--n", "n_scenarios", type=int, default=100, show_default=True)
@click.option("--mode", type=click.Choice(["five_switch", "single_switch", "fixed"]), default="five_switch",
              show_default=True)
@click.option("--plan", "plan_path", type=click.Path(exists=True, dir_okay=False),
              help="Plan replayed in fixed mode (bundled plan if omitted).")
@click.option("--estimators", default="ppv,riv", show_default=True)
@click.option("--sigver", "sigver", multiple=True, help="Baseline triple min_norm,min_proj,tau (repeatable).")
@click.option("--channels", type=click.Choice(["magnitude", "phasor"]), default="magnitude",
              show_default=True, help="PMU channels read by the baseline.")
@seed_option
@noise_option
@sd_option
@profile_option
@click.option("--horizon", type=float, default=1000.0, show_default=True, help="Seconds per scenario.")
@click.option("--dt", type=float, default=10.0, show_default=True)
@click.option("--jobs", type=int, default=0, show_default=True, help="Worker processes; 0 means all cores.")
@click.option("--out", "out_root", type=click.Path(file_okay=False), default="out", show_default=True)
@click.pass_context
@_guard
def montecarlo(ctx, grid_path, n_scenarios, mode, plan_path, estimators, sigver, channels, seed, noise, sd,
               profile, horizon, dt, jobs, out_root):
    """Run a Monte Carlo batch and write the report under <out>/<run-id>/."""
    model = _load_grid(grid_path)
    names = _models(estimators) if estimators else []
    plan = _load_plan(plan_path, model.n_switch) if mode == "fixed" else None
    cfg = McConfig(n_scenarios=n_scenarios, horizon_sec=horizon, dt_sec=dt, noise=_noise(noise),
                   sd_change=sd, load_profile=profile, mode=mode, estimators=tuple(names),
                   sigver=_parse_triples(sigver, channels), master_seed=seed, plan=plan,
                   prior=(0,) * model.n_switch, jobs=jobs or None)
    progress = None
    if ctx.obj["verbose"]:
        def progress(done, total):
            click.echo(f"scenario {done}/{total}", err=True)
    rep = run_montecarlo(model, cfg, progress)
    d = Path(out_root) / run_id(cfg)
    emit_report(rep, d)
    for name in rep.names:
        click.echo(f"{name}: instant accuracy {rep.accuracy(name):.4f}, "
                   f"scenario accuracy {rep.scenario_accuracy(name):.4f}, mean time {rep.mean_time(name):.4f} s")
    if rep.failed_scenarios:
        click.echo(f"{len(rep.failed_scenarios)} scenarios failed", err=True)
    click.echo(str(d))


@main.command("compare-baseline")
@grid_option
@click.option("--n", "n_scenarios", type=int, default=100, show_default=True)
@click.option("--cases", default=",".join(BASELINE_CASES), show_default=True)
@click.option("--estimators", default="ppv", show_default=True)
@click.option("--channels", type=click.Choice(["magnitude", "phasor"]), default="magnitude",
              show_default=True)
@seed_option
@click.option("--jobs", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="Default: out/baseline-seed<seed>.csv.")
@_guard
def compare_baseline_cmd(grid_path, n_scenarios, cases, estimators, channels, seed, jobs, out_path):
    """Single-switch accuracy of the estimators against baseline tunings."""
    model = _load_grid(grid_path)
    case_list = [c.strip() for c in cases.split(",") if c.strip()]
    bad = [c for c in case_list if c not in BASELINE_CASES]
    if bad:
        raise ValidationError(f"unknown cases {bad}; choose from {list(BASELINE_CASES)}")
    rows = compare_baseline(model, n_scenarios, seed, case_list, tuple(_models(estimators)),
                            jobs or None, channels=channels)
    out = Path(out_path or f"out/baseline-seed{seed}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case", "method", "scenario_accuracy", "instant_accuracy"])
        for r in rows:
            w.writerow([r["case"], r["method"], repr(r["scenario_accuracy"]), repr(r["instant_accuracy"])])
            click.echo(f"{r['case']:12s} {r['method']:28s} {r['scenario_accuracy']:.3f}")
    click.echo(str(out))


@main.command()
@click.option("--in", "in_dir", type=click.Path(exists=True, file_okay=False), required=True,
              help="A montecarlo report directory or a simulate/estimate directory.")
@click.option("--switches", type=int, default=5, show_default=True)
@_guard
def plot(in_dir, switches):
    """Write gnuplot scripts next to the CSVs in a run directory."""
    d = Path(in_dir)
    written = []
    if (d / "indices_vm.csv").exists():
        with open(d / "indices_vm.csv", encoding="utf-8") as fh:
            names = sorted({row[0] for row in csv.reader(fh)} - {"estimator"})
        written += write_plot_scripts(d, names, switches)
    if (d / "estimates.csv").exists():
        gp = [
            "set datafile separator ','",
            "set terminal pngcairo size 900,600",
            "set output 'estimate_trace.png'",
            "set xlabel 't (s)'",
            "set ylabel 'switch status (offset per switch)'",
            "plot \\",
        ]
        lines = [f"  'estimates.csv' every ::1 using 1:(${6 + k} + {2 * k}) with steps title 'switch {k}'"
                 for k in range(switches)]
        gp.append(", \\\n".join(lines))
        (d / "estimate_trace.gp").write_text("\n".join(gp) + "\n", encoding="utf-8")
        written.append(d / "estimate_trace.gp")
    if not written:
        raise ValidationError(f"no plottable CSVs in {d}")
    for p in written:
        click.echo(str(p))


if __name__ == "__main__":
    main()
