import csv

import numpy as np
import pytest
from click.testing import CliRunner

from topoest.cli import main
from topoest.grid import load_grid, load_plan, serialize_grid
from topoest.measurement import read_measurements


@pytest.fixture
def runner(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("TOPOEST_SEED", raising=False)
    return CliRunner()


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _sim(runner, *args):
    res = runner.invoke(main, ["simulate", *args])
    assert res.exit_code == 0, res.output
    return res.output.strip().splitlines()[-1]


def test_fixture(runner, feeder):
    res = runner.invoke(main, ["fixture", "--out", "fx"])
    assert res.exit_code == 0, res.output
    assert load_grid("fx/ieee33.grid") == feeder
    plan = load_plan("fx/fig3.plan", 5)
    assert plan.change_times() == [440.0]


def test_simulate_fig3(runner):
    runner.invoke(main, ["fixture", "--out", "fx"])
    d = _sim(runner, "--grid", "fx/ieee33.grid", "--plan", "fx/fig3.plan", "--seed", "7")
    assert d.endswith("sim-seed7")
    msets = read_measurements(open(f"{d}/measurements.csv", encoding="utf-8").read())
    assert len(msets) == 101
    topo = {}
    for r in _rows(f"{d}/topology.csv"):
        topo.setdefault(float(r["t_sec"]), []).append(int(r["status"]))
    assert topo[430.0] == [0, 0, 0, 0, 0] and topo[440.0] == [1, 1, 1, 0, 0]


def test_simulate_noise_off(runner):
    d = _sim(runner, "--noise", "off", "--instants", "5", "--out", "sim")
    truth = {(float(r["t_sec"]), int(r["bus"])): r for r in _rows(f"{d}/truth.csv")}
    for ms in read_measurements(open(f"{d}/measurements.csv", encoding="utf-8").read()):
        for m in ms.pmu:
            assert m.magnitude == float(truth[(ms.t, m.bus)]["vm"])
            assert m.angle == float(truth[(ms.t, m.bus)]["va"])
        for m in ms.meters:
            assert m.p == float(truth[(ms.t, m.bus)]["p_load"])


def test_simulate_sd(runner):
    d = _sim(runner, "--sd", "0.04", "--noise", "off", "--instants", "201", "--out", "sim")
    p = {}
    for r in _rows(f"{d}/truth.csv"):
        p.setdefault(int(r["bus"]), []).append(float(r["p_load"]))
    steps = np.concatenate([np.diff(v[1:]) / v[0] for b, v in p.items() if v[0] > 0])
    assert 0.035 <= np.std(steps) <= 0.045


def test_seed_env_fallback(runner, monkeypatch):
    a = _sim(runner, "--seed", "11", "--instants", "4", "--out", "a")
    monkeypatch.setenv("TOPOEST_SEED", "11")
    b = _sim(runner, "--instants", "4", "--out", "b")
    assert open(f"{a}/measurements.csv").read() == open(f"{b}/measurements.csv").read()
    c = _sim(runner, "--seed", "12", "--instants", "4", "--out", "c")
    assert open(f"{a}/measurements.csv").read() != open(f"{c}/measurements.csv").read()


def test_estimate_models(runner):
    d = _sim(runner, "--instants", "3", "--out", "sim")
    res = runner.invoke(main, ["estimate", "--in", d, "--model", "riv"])
    assert res.exit_code == 0, res.output
    rows = _rows(f"{d}/estimates.csv")
    assert [r["model"] for r in rows] == ["riv"] * 3
    res = runner.invoke(main, ["estimate", "--in", d, "--model", "ppv,riv", "--out", "both.csv"])
    assert res.exit_code == 0, res.output
    rows = _rows("both.csv")
    assert [r["model"] for r in rows] == ["ppv", "riv"] * 3
    assert [r["t_sec"] for r in rows] == ["0", "0", "10", "10", "20", "20"]


def test_estimate_reproduces_plan(runner):
    d = _sim(runner, "--noise", "off", "--out", "sim")
    res = runner.invoke(main, ["estimate", "--in", d, "--model", "ppv,riv"])
    assert res.exit_code == 0, res.output
    truth = {}
    for r in _rows(f"{d}/topology.csv"):
        truth.setdefault(r["t_sec"], []).append(int(r["status"]))
    for r in _rows(f"{d}/estimates.csv"):
        assert [int(r[f"theta_{k}"]) for k in range(5)] == truth[r["t_sec"]]
        assert r["converged"] == "1"


def test_exit_nonconverged(runner):
    d = _sim(runner, "--instants", "2", "--out", "sim")
    res = runner.invoke(main, ["estimate", "--in", d, "--max-iter", "1"])
    assert res.exit_code == 4


def test_exit_validation(runner, tmp_path):
    d = _sim(runner, "--instants", "2", "--out", "sim")
    assert runner.invoke(main, ["estimate", "--in", d, "--model", "wls"]).exit_code == 2
    (tmp_path / "bad.grid").write_text("[buses]\n1,substation,0\n")
    assert runner.invoke(main, ["simulate", "--grid", "bad.grid"]).exit_code == 2
    assert runner.invoke(main, ["compare-baseline", "--cases", "sd9"]).exit_code == 2


def test_exit_solver(runner, feeder, tmp_path):
    text = serialize_grid(feeder).replace("\n2,load,100.0,60.0\n", "\n2,load,900000.0,600000.0\n")
    assert "900000" in text
    (tmp_path / "heavy.grid").write_text(text)
    res = runner.invoke(main, ["simulate", "--grid", "heavy.grid", "--instants", "2"])
    assert res.exit_code == 3


def test_unknown_flag(runner):
    res = runner.invoke(main, ["simulate", "--bogus", "1"])
    assert res.exit_code == 2
    assert "No such option" in res.output


@pytest.mark.parametrize("cmd", ["fixture", "simulate", "estimate", "montecarlo", "compare-baseline", "plot"])
def test_help_lists_every_flag(cmd):
    res = CliRunner().invoke(main, [cmd, "--help"])
    assert res.exit_code == 0
    command = main.get_command(None, cmd)
    for p in command.params:
        for opt in p.opts:
            assert opt in res.output


def test_montecarlo_and_plot(runner):
    res = runner.invoke(main, ["montecarlo", "--n", "1", "--horizon", "30", "--estimators", "ppv",
                               "--sigver", "0.004,0.8,2", "--jobs", "1", "--seed", "3"])
    assert res.exit_code == 0, res.output
    out = res.output.strip().splitlines()[-1]
    assert "seed3" in out
    rows = _rows(f"{out}/accuracy.csv")
    assert [r["estimator"] for r in rows] == ["ppv", "sigver(0.004,0.8,2)"]
    res = runner.invoke(main, ["plot", "--in", out])
    assert res.exit_code == 0, res.output
    assert "switch_trace.gp" in res.output


def test_compare_baseline(runner):
    res = runner.invoke(main, ["compare-baseline", "--n", "2", "--cases", "sd2.22", "--jobs", "1",
                               "--out", "cmp.csv"])
    assert res.exit_code == 0, res.output
    rows = _rows("cmp.csv")
    assert [r["method"] for r in rows][0] == "ppv"
    assert len(rows) == 4 and {r["case"] for r in rows} == {"sd2.22"}
