import numpy as np
import pytest

from topoest.acpf import PolarState, eval_flow_riv
from topoest.estimator_ppv import EstimatorConfig, estimate_ppv
from topoest.estimator_riv import (
    RectangularState,
    build_riv_problem,
    estimate_riv,
    linearize_injection,
    pmu_to_rectangular,
    pmu_to_rectangular_arrays,
)
from topoest.measurement import NoiseConfig, PmuMeasurement, make_rng
from topoest.miqp import solve_miqp

from conftest import snapshot

RADIAL = (0, 0, 0, 0, 0)
MESHED = (1, 1, 1, 0, 0)


def _bilinear(er, ei, ir, ii):
    return er * ir + ei * ii, ei * ir - er * ii


def test_flat_start_reduction():
    pc, pk, qc, qk = linearize_injection(np.ones(4), np.zeros(4), np.zeros(4), np.zeros(4))
    # P = I^r and Q = -I^im at E = (1, 0), I = 0
    np.testing.assert_array_equal(pc.T, [[0, 0, 1, 0]] * 4)
    np.testing.assert_array_equal(qc.T, [[0, 0, 0, -1]] * 4)
    np.testing.assert_array_equal(pk, 0)
    np.testing.assert_array_equal(qk, 0)


def test_injection_anchor(rng):
    pt = rng.normal(size=(4, 1000))
    pc, pk, qc, qk = linearize_injection(*pt)
    p, q = _bilinear(*pt)
    assert np.max(np.abs((pc * pt).sum(axis=0) + pk - p)) <= 1e-12
    assert np.max(np.abs((qc * pt).sum(axis=0) + qk - q)) <= 1e-12


def test_injection_gradient(rng):
    pt = rng.normal(size=(4, 1000))
    pc, _, qc, _ = linearize_injection(*pt)
    h = 1e-6
    for k in range(4):
        up, dn = pt.copy(), pt.copy()
        up[k] += h
        dn[k] -= h
        pu, qu = _bilinear(*up)
        pd, qd = _bilinear(*dn)
        np.testing.assert_allclose(pc[k], (pu - pd) / (2 * h), rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(qc[k], (qu - qd) / (2 * h), rtol=1e-6, atol=1e-9)


def test_injection_remainder(rng):
    pt = rng.normal(size=(4, 200))
    d = rng.normal(size=(4, 200))
    pc, pk, _, _ = linearize_injection(*pt)
    err = []
    for delta in (1e-2, 1e-3):
        x = pt + delta * d
        err.append(np.abs((pc * x).sum(axis=0) + pk - _bilinear(*x)[0]))
    mask = err[1] > 1e-14
    ratio = err[0][mask] / err[1][mask]
    assert np.all((ratio > 100 / 3) & (ratio < 300))


@pytest.mark.parametrize("ang, expected", [(0.0, (1.0, 0.0)), (np.pi / 2, (0.0, 1.0))])
def test_pmu_to_rectangular(ang, expected):
    z, cov = pmu_to_rectangular(PmuMeasurement(1, 1.0, ang, 1e-4, 1e-4))
    np.testing.assert_allclose(z, expected, atol=1e-15)
    assert cov.shape == (2, 2)
    np.testing.assert_allclose(cov, cov.T)


def test_pmu_covariance_monte_carlo():
    rng = make_rng(21)
    mag, ang, s_mag, s_ang = 1.02, 0.7, 0.002, 0.003
    m = mag + s_mag * rng.normal(size=100_000)
    a = ang + s_ang * rng.normal(size=100_000)
    samples = np.stack([m * np.cos(a), m * np.sin(a)])
    emp = np.cov(samples)
    _, cov = pmu_to_rectangular_arrays(mag, ang, s_mag, s_ang)
    np.testing.assert_allclose(cov, emp, rtol=0.05)


def test_rectangular_state_round_trip(rng):
    vm, va = rng.uniform(0.9, 1.1, 5), rng.uniform(-0.3, 0.3, 5)
    rs = RectangularState.from_polar(PolarState(vm, va))
    back = rs.to_polar()
    np.testing.assert_allclose(back.vm, vm, atol=1e-15)
    np.testing.assert_allclose(back.va, va, atol=1e-15)
    flat = RectangularState.flat(4, slack=2, slack_vm=1.05)
    assert flat.er[2] == 1.05 and np.all(flat.ei == 0) and np.all(flat.ir == 0)


def test_dimension_audit(feeder):
    _, ms = snapshot(feeder, RADIAL)
    p, vmap = build_riv_problem(feeder, ms, RectangularState.flat(33))
    n_load, n_sw = len(feeder.load_buses), len(feeder.switch_lines)
    assert p.qp.n == vmap.n == 2 * 33 + 2 * n_sw + 2 * n_load + 2 + 5
    # slack pins (E^r, E^im) plus linearised P and Q at every bus
    assert p.qp.b_eq.size == 2 + 2 * 33
    # two-sided big-M pair for the Ohm-law gap and for the current, per component
    assert p.qp.b_in.size == 8 * n_sw
    idx = np.concatenate([vmap.er, vmap.ei, vmap.line_ir, vmap.line_ii, vmap.pd, vmap.qd,
                          [vmap.pg, vmap.qg], vmap.theta])
    assert sorted(idx) == list(range(vmap.n))


def test_zero_magnitude_point_rejected(feeder):
    _, ms = snapshot(feeder, RADIAL)
    with pytest.raises(ValueError):
        build_riv_problem(feeder, ms, RectangularState(np.zeros(33), np.zeros(33)))


@pytest.mark.parametrize("topo", [RADIAL, MESHED])
def test_noise_free_recovery(feeder, topo):
    st, ms = snapshot(feeder, topo)
    res = estimate_riv(feeder, ms)
    assert res.model == "riv" and res.converged and res.iterations <= 20
    assert res.topology == topo
    assert np.max(np.abs(res.state.vm - st.vm)) <= 1e-4
    assert np.max(np.abs(res.state.va - st.va)) <= 1e-4
    rect = res.extra["rectangular"]
    np.testing.assert_allclose(rect.to_polar().vm, res.state.vm)


def _final(feeder, ms, res):
    p, vmap = build_riv_problem(feeder, ms, res.extra["rectangular"])
    return solve_miqp(p, relaxation="decoupled").x, vmap


@pytest.mark.parametrize("topo", [RADIAL, MESHED, (0, 1, 0, 1, 1)])
def test_big_m_logic_and_current_balance(feeder, topo):
    _, ms = snapshot(feeder, topo, NoiseConfig(), seed=3)
    res = estimate_riv(feeder, ms)
    x, vmap = _final(feeder, ms, res)
    er, ei = x[vmap.er], x[vmap.ei]
    f, t = feeder.from_idx, feeder.to_idx
    sw = list(feeder.switch_lines)
    inj_r, inj_i = np.zeros(33), np.zeros(33)
    for ln in range(feeder.n_line):
        if ln in sw:
            k = sw.index(ln)
            cur = np.array([x[vmap.line_ir[k]], x[vmap.line_ii[k]]])
            ohm = np.array(eval_flow_riv(feeder.g[ln], feeder.b[ln], er[f[ln]], ei[f[ln]], er[t[ln]], ei[t[ln]]))
            if x[vmap.theta[feeder.lines[ln].switch_id]] == 0:
                assert np.max(np.abs(cur)) <= 1e-7
            else:
                assert np.max(np.abs(cur - ohm)) <= 1e-7
        else:
            cur = np.array(eval_flow_riv(feeder.g[ln], feeder.b[ln], er[f[ln]], ei[f[ln]], er[t[ln]], ei[t[ln]]))
        inj_r[f[ln]] += cur[0]
        inj_i[f[ln]] += cur[1]
        inj_r[t[ln]] -= cur[0]
        inj_i[t[ln]] -= cur[1]
    got_r, got_i = vmap.injections(x)
    assert np.max(np.abs(got_r - inj_r)) <= 1e-9
    assert np.max(np.abs(got_i - inj_i)) <= 1e-9


def test_open_switch_zero_current(feeder):
    _, ms = snapshot(feeder, MESHED)
    res = estimate_riv(feeder, ms)
    x, vmap = _final(feeder, ms, res)
    for k, ln in enumerate(feeder.switch_lines):
        sid = feeder.lines[ln].switch_id
        if MESHED[sid] == 0:
            assert x[vmap.theta[sid]] == 0
            assert abs(x[vmap.line_ir[k]]) <= 1e-12 and abs(x[vmap.line_ii[k]]) <= 1e-12


@pytest.mark.parametrize("topo", [RADIAL, MESHED, (1, 0, 1, 1, 0)])
def test_cross_formulation_noise_free(feeder, topo):
    _, ms = snapshot(feeder, topo)
    a = estimate_ppv(feeder, ms)
    b = estimate_riv(feeder, ms)
    assert a.topology == b.topology == topo
    assert np.max(np.abs(a.state.vm - b.state.vm)) <= 1e-4
    assert np.max(np.abs(a.state.va - b.state.va)) <= 1e-4


def test_cross_estimator_noisy(feeder):
    for seed in range(4):
        _, ms = snapshot(feeder, (0, 1, 1, 0, 1), NoiseConfig(), seed=seed)
        assert estimate_ppv(feeder, ms).topology == estimate_riv(feeder, ms).topology


def test_bnb_matches_enumeration(feeder):
    _, ms = snapshot(feeder, MESHED, NoiseConfig(), seed=6)
    seen = []

    def hook(problem, sol, it):
        ref = solve_miqp(problem, "enumerate", relaxation="decoupled")
        seen.append((sol.objective - ref.objective, sol.binaries == ref.binaries))

    estimate_riv(feeder, ms, EstimatorConfig(on_miqp=hook))
    assert seen and all(abs(d) <= 1e-6 and same for d, same in seen)


def test_unconverged_flag(feeder):
    _, ms = snapshot(feeder, MESHED)
    res = estimate_riv(feeder, ms, EstimatorConfig(max_iter=1))
    assert not res.converged and res.iterations == 1
