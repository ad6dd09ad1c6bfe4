import warnings

import numpy as np
import pytest

from topoest.acpf import eval_flow_ppv
from topoest.errors import BigMError, EstimationError, QPInfeasibleError
from topoest.estimator_ppv import (
    EstimatorConfig,
    build_ppv_problem,
    check_big_m,
    estimate_header,
    estimate_ppv,
    estimate_row,
    linearize_flow_ppv,
    linearize_network,
)
from topoest.measurement import NoiseConfig
from topoest.miqp import solve_miqp

from conftest import snapshot

RADIAL = (0, 0, 0, 0, 0)
MESHED = (1, 1, 1, 0, 0)


def _random_points(rng, n):
    return (rng.uniform(0, 5, n), rng.uniform(-5, 0, n), rng.uniform(0.85, 1.1, n),
            rng.uniform(0.85, 1.1, n), rng.uniform(-0.2, 0.2, n))


def test_flat_start_reduction(rng):
    g, b = rng.uniform(0, 5, 10), rng.uniform(-5, 0, 10)
    lin = linearize_flow_ppv(g, b, np.ones(10), np.ones(10), np.zeros(10))
    np.testing.assert_allclose(lin.p_ea, g, atol=1e-15)
    np.testing.assert_allclose(lin.p_ec, -g, atol=1e-15)
    np.testing.assert_allclose(lin.p_phi, -b, atol=1e-15)
    np.testing.assert_allclose(lin.q_ea, -b, atol=1e-15)
    np.testing.assert_allclose(lin.q_ec, b, atol=1e-15)
    np.testing.assert_allclose(lin.q_phi, -g, atol=1e-15)
    np.testing.assert_allclose(lin.p_k, 0.0, atol=1e-15)
    np.testing.assert_allclose(lin.q_k, 0.0, atol=1e-15)


def test_taylor_anchor(rng):
    g, b, ea, ec, phi = _random_points(rng, 1000)
    lin = linearize_flow_ppv(g, b, ea, ec, phi)
    p, q = lin.evaluate(ea, ec, phi)
    pe, qe = eval_flow_ppv(g, b, ea, ec, phi, 0.0)
    assert np.max(np.abs(p - pe)) <= 1e-12
    assert np.max(np.abs(q - qe)) <= 1e-12


def test_gradient_matches_finite_differences(rng):
    g, b, ea, ec, phi = _random_points(rng, 1000)
    lin = linearize_flow_ppv(g, b, ea, ec, phi)
    h = 1e-6
    args = [ea, ec, phi]
    for k, (cp, cq) in enumerate([(lin.p_ea, lin.q_ea), (lin.p_ec, lin.q_ec), (lin.p_phi, lin.q_phi)]):
        up = [a.copy() for a in args]
        dn = [a.copy() for a in args]
        up[k] += h
        dn[k] -= h
        pu, qu = eval_flow_ppv(g, b, up[0], up[1], up[2], 0.0)
        pd, qd = eval_flow_ppv(g, b, dn[0], dn[1], dn[2], 0.0)
        for analytic, fd in ((cp, (pu - pd) / (2 * h)), (cq, (qu - qd) / (2 * h))):
            np.testing.assert_allclose(analytic, fd, rtol=1e-6, atol=1e-6 * np.abs(analytic).max())


def test_second_order_remainder(rng):
    g, b, ea, ec, phi = _random_points(rng, 200)
    lin = linearize_flow_ppv(g, b, ea, ec, phi)
    d = rng.normal(size=(3, 200))
    d /= np.linalg.norm(d, axis=0)
    err = {}
    for delta in (1e-2, 1e-3):
        x = (ea + delta * d[0], ec + delta * d[1], phi + delta * d[2])
        p, _ = lin.evaluate(*x)
        pe, _ = eval_flow_ppv(g, b, x[0], x[1], x[2], 0.0)
        err[delta] = np.abs(p - pe)
    mask = err[1e-3] > 1e-14
    ratio = err[1e-2][mask] / err[1e-3][mask]
    assert np.all((ratio > 100 / 3) & (ratio < 100 * 3))
    # one fitted constant per step size
    c1, c2 = np.linalg.norm(err[1e-2]) / 1e-4, np.linalg.norm(err[1e-3]) / 1e-6
    assert c1 == pytest.approx(c2, rel=0.05)


def test_nonpositive_expansion_rejected():
    with pytest.raises(ValueError):
        linearize_flow_ppv(1.0, -1.0, 0.0, 1.0, 0.0)


def test_two_bus_no_binaries(two_bus):
    _, ms = snapshot(two_bus, ())
    lin = linearize_network(two_bus, np.ones(2), np.zeros(2))
    p, vmap = build_ppv_problem(two_bus, ms, lin)
    assert p.binary_idx == ()
    assert p.qp.b_in.size == 0
    assert p.qp.b_eq.size > 0
    res = estimate_ppv(two_bus, ms)
    assert res.converged and res.topology == ()


def test_variable_count(feeder):
    _, ms = snapshot(feeder, RADIAL)
    lin = linearize_network(feeder, np.ones(33), np.zeros(33))
    p, vmap = build_ppv_problem(feeder, ms, lin)
    n_load = len(feeder.load_buses)
    expected = 2 * 33 + 4 * feeder.n_switch + 2 * n_load + 2 + 5
    assert p.qp.n == vmap.n == expected == 157
    idx = np.concatenate([vmap.e, vmap.phi, *[list(vmap.sw_flow(k)) for k in range(5)],
                          vmap.pd, vmap.qd, [vmap.pg, vmap.qg], vmap.theta])
    assert sorted(idx) == list(range(expected))
    assert p.binary_idx == tuple(vmap.theta)


@pytest.mark.parametrize("topo", [RADIAL, MESHED])
def test_noise_free_recovery(feeder, topo):
    st, ms = snapshot(feeder, topo)
    res = estimate_ppv(feeder, ms)
    assert res.converged and res.iterations <= 20
    assert res.topology == topo
    assert np.max(np.abs(res.state.vm - st.vm)) <= 1e-4
    assert np.max(np.abs(res.state.va - st.va)) <= 1e-4
    assert res.trace[-1] <= res.trace[0]


def test_noisy_recovery(feeder):
    for seed in range(3):
        st, ms = snapshot(feeder, MESHED, NoiseConfig(), seed=seed)
        res = estimate_ppv(feeder, ms)
        assert res.topology == MESHED
        assert np.max(np.abs(res.state.vm - st.vm)) <= 1e-2


def _final_problem(feeder, ms, res):
    lin = linearize_network(feeder, res.state.vm, res.state.va)
    p, vmap = build_ppv_problem(feeder, ms, lin)
    return p, vmap, lin


@pytest.mark.parametrize("topo", [RADIAL, MESHED, (0, 1, 0, 1, 1)])
def test_big_m_logic(feeder, topo):
    _, ms = snapshot(feeder, topo, NoiseConfig(), seed=1)
    res = estimate_ppv(feeder, ms)
    p, vmap, (fwd, rev) = _final_problem(feeder, ms, res)
    x = solve_miqp(p, relaxation="decoupled").x
    e, ph = x[vmap.e], x[vmap.phi]
    f, t = feeder.from_idx, feeder.to_idx
    for k, ln in enumerate(feeder.switch_lines):
        th = x[vmap.theta[feeder.lines[ln].switch_id]]
        flows = x[list(vmap.sw_flow(k))]
        pf, qf = fwd.evaluate(e[f[ln]], e[t[ln]], ph[f[ln]] - ph[t[ln]])
        pr, qr = rev.evaluate(e[t[ln]], e[f[ln]], ph[t[ln]] - ph[f[ln]])
        chi = np.array([pf[ln], qf[ln], pr[ln], qr[ln]])
        if th == 0:
            assert np.max(np.abs(flows)) <= 1e-7
        else:
            assert np.max(np.abs(flows - chi)) <= 1e-7


def test_open_switch_zero_flow(feeder):
    _, ms = snapshot(feeder, MESHED)
    res = estimate_ppv(feeder, ms)
    p, vmap, _ = _final_problem(feeder, ms, res)
    x = solve_miqp(p).x
    for k, ln in enumerate(feeder.switch_lines):
        if MESHED[feeder.lines[ln].switch_id] == 0:
            assert x[vmap.theta[feeder.lines[ln].switch_id]] == 0
            assert np.max(np.abs(x[list(vmap.sw_flow(k))])) <= 1e-12


def test_bnb_matches_enumeration(feeder):
    _, ms = snapshot(feeder, MESHED, NoiseConfig(), seed=2)
    seen = []

    def hook(problem, sol, it):
        ref = solve_miqp(problem, "enumerate", relaxation="decoupled")
        seen.append((sol.objective, ref.objective, sol.binaries, ref.binaries))

    estimate_ppv(feeder, ms, EstimatorConfig(on_miqp=hook))
    assert seen
    for a, b, ba, bb in seen:
        assert a == pytest.approx(b, abs=1e-6)
        assert ba == bb


def test_estimate_with_enumeration(feeder):
    _, ms = snapshot(feeder, MESHED)
    res = estimate_ppv(feeder, ms, EstimatorConfig(strategy="enumerate"))
    assert res.topology == MESHED


def test_single_shot(feeder):
    _, ms1 = snapshot(feeder, RADIAL, NoiseConfig(), seed=4)
    _, ms2 = snapshot(feeder, MESHED, NoiseConfig(), seed=5)
    alone = estimate_ppv(feeder, ms2)
    estimate_ppv(feeder, ms1)
    after = estimate_ppv(feeder, ms2)
    assert alone.topology == after.topology
    np.testing.assert_array_equal(alone.state.vm, after.state.vm)


def test_unconverged_flag(feeder):
    _, ms = snapshot(feeder, MESHED)
    res = estimate_ppv(feeder, ms, EstimatorConfig(max_iter=1))
    assert not res.converged and res.iterations == 1 and len(res.trace) == 1


def test_small_big_m_warns_or_fails(feeder):
    _, ms = snapshot(feeder, MESHED)
    with pytest.warns(RuntimeWarning, match="big-M"):
        estimate_ppv(feeder, ms, EstimatorConfig(big_m=0.01))
    with pytest.raises(BigMError):
        estimate_ppv(feeder, ms, EstimatorConfig(big_m=0.01, fail_on_bigm=True))


def test_default_big_m_silent(feeder):
    _, ms = snapshot(feeder, MESHED, NoiseConfig(), seed=3)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        estimate_ppv(feeder, ms)


def test_check_big_m():
    assert not check_big_m([0.5], [0.1], [1], 10.0)
    assert check_big_m([10.0], [0.1], [1], 10.0)
    assert check_big_m([0.0], [-10.0], [0], 10.0)


def test_infeasible_carries_iteration(feeder, monkeypatch):
    _, ms = snapshot(feeder, RADIAL)

    def boom(*args, **kwargs):
        raise QPInfeasibleError("forced")

    monkeypatch.setattr("topoest.estimator_ppv.solve_miqp", boom)
    with pytest.raises(EstimationError) as exc:
        estimate_ppv(feeder, ms)
    assert exc.value.iteration == 1


def test_csv_row(feeder):
    _, ms = snapshot(feeder, MESHED)
    res = estimate_ppv(feeder, ms)
    header = estimate_header(5, 33)
    row = estimate_row(res)
    assert len(header) == len(row) == 5 + 5 + 66
    assert header[:5] == ["t_sec", "model", "converged", "iters", "objective"]
    assert row[1] == "ppv" and row[5:10] == list(MESHED)
