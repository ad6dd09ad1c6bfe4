import numpy as np
import pytest

from topoest.acpf import (
    LoadSnapshot,
    PolarState,
    bus_injections,
    eval_flow_ppv,
    eval_flow_riv,
    injection_residual,
    jacobian,
    line_flows,
    solve_acpf,
)
from topoest.errors import DivergenceError, InfeasibleIslandError, ValidationError
from topoest.grid import all_topologies, apply_topology, parse_grid

ISLAND = """
[buses]
id,kind,p_kw,q_kvar
1,substation,0,0
2,load,100,50
3,load,0,0
[lines]
id,from,to,r_ohm,x_ohm,switch
1,1,2,0.5,0.4,-
2,2,3,0.5,0.4,0
"""


def test_zero_load_is_flat(feeder):
    for topo in all_topologies(feeder)[::7]:
        st = solve_acpf(feeder, topo, LoadSnapshot.zeros(feeder))
        np.testing.assert_allclose(st.vm, 1.0, atol=1e-14)
        np.testing.assert_allclose(st.va, 0.0, atol=1e-14)
        for fl in line_flows(feeder, topo, st):
            np.testing.assert_allclose(fl, 0.0, atol=1e-14)


def test_two_bus_gauss_seidel(two_bus):
    z = complex(two_bus.r_pu[0], two_bus.x_pu[0])
    s = complex(0.1, 0.05)
    v = 1.0 + 0j
    for _ in range(200):
        v = 1.0 - z * np.conj(s / v)
    st = solve_acpf(two_bus, (), LoadSnapshot(np.array([0, 0.1]), np.array([0, 0.05])))
    assert st.complex[1] == pytest.approx(v, abs=1e-8)


def _sweep(model, p, q, tol=1e-12):
    """Backward/forward sweep on a radial graph rooted at the slack."""
    eg = apply_topology(model, (0,) * model.n_switch)
    n = model.n_bus
    adj = [[] for _ in range(n)]
    for ln in eg.lines:
        f, t = model.from_idx[ln], model.to_idx[ln]
        z = complex(model.r_pu[ln], model.x_pu[ln])
        adj[f].append((t, z))
        adj[t].append((f, z))
    order, parent, zpar = [model.slack], {model.slack: None}, {}
    for a in order:
        for c, z in adj[a]:
            if c not in parent:
                parent[c], zpar[c] = a, z
                order.append(c)
    v = np.ones(n, dtype=complex)
    s = p + 1j * q
    for _ in range(500):
        i = np.conj(s / v)
        for a in reversed(order[1:]):
            i[parent[a]] += i[a]
        new = v.copy()
        for a in order[1:]:
            new[a] = new[parent[a]] - zpar[a] * i[a]
        if np.max(np.abs(new - v)) < tol:
            return new
        v = new
    raise AssertionError("sweep oracle did not converge")


def test_radial_against_sweep(feeder):
    loads = LoadSnapshot.nominal(feeder)
    st = solve_acpf(feeder, (0,) * 5, loads)
    v = _sweep(feeder, loads.p, loads.q)
    assert np.argmin(st.vm) == np.argmin(np.abs(v))
    assert st.vm.min() == pytest.approx(np.abs(v).min(), abs=1e-6)
    np.testing.assert_allclose(st.complex, v, atol=1e-8)


def test_converged_mismatch(feeder):
    loads = LoadSnapshot.nominal(feeder)
    for topo in all_topologies(feeder):
        st = solve_acpf(feeder, topo, loads)
        dp, dq = injection_residual(feeder, topo, st, loads)
        assert max(np.abs(dp).max(), np.abs(dq).max()) <= 1e-10


def test_ppv_flow_examples():
    g, b = np.random.default_rng(1).normal(size=2)
    assert eval_flow_ppv(g, b, 1.03, 1.03, 0.2, 0.2) == pytest.approx((0.0, 0.0), abs=1e-15)
    assert eval_flow_ppv(1.0, 0.0, 1.0, 0.9, 0.0, 0.0) == pytest.approx((0.1, 0.0), abs=1e-15)


def test_riv_flow_examples():
    assert eval_flow_riv(0.7, -2.0, 1.0, 0.1, 1.0, 0.1) == pytest.approx((0.0, 0.0), abs=1e-15)
    assert eval_flow_riv(1.0, 0.0, 1.1, 0.0, 1.0, 0.0) == pytest.approx((0.1, 0.0), abs=1e-15)


def test_ppv_riv_equivalence(rng):
    n = 1000
    g, b = rng.uniform(0, 5, n), rng.uniform(-5, 0, n)
    ea, ec = rng.uniform(0.9, 1.1, n), rng.uniform(0.9, 1.1, n)
    pa, pc = rng.uniform(-0.3, 0.3, n), rng.uniform(-0.3, 0.3, n)
    p, q = eval_flow_ppv(g, b, ea, ec, pa, pc)
    va, vc = ea * np.exp(1j * pa), ec * np.exp(1j * pc)
    ir, ii = eval_flow_riv(g, b, va.real, va.imag, vc.real, vc.imag)
    s = va * np.conj(ir + 1j * ii)
    assert np.max(np.abs(s.real - p)) <= 1e-12
    assert np.max(np.abs(s.imag - q)) <= 1e-12


def test_power_conservation(feeder):
    loads = LoadSnapshot.nominal(feeder)
    for topo in [(0,) * 5, (1, 1, 1, 0, 0), (1,) * 5]:
        st = solve_acpf(feeder, topo, loads)
        pf, qf, pt, qt = line_flows(feeder, topo, st)
        p_loss = pf + pt
        on = feeder.line_in_service(topo)
        v = st.complex
        i = (v[feeder.from_idx] - v[feeder.to_idx]) / (feeder.r_pu + 1j * feeder.x_pu)
        np.testing.assert_allclose(p_loss[on], (feeder.r_pu * np.abs(i) ** 2)[on], atol=1e-12)
        p_inj, q_inj = bus_injections(feeder, topo, st)
        gen = p_inj[feeder.slack]
        assert abs(gen - loads.p.sum() - p_loss.sum()) <= 1e-9
        assert abs(q_inj[feeder.slack] - loads.q.sum() - (qf + qt).sum()) <= 1e-9


def test_open_switch_islands_balance():
    m = parse_grid(ISLAND)
    loads = LoadSnapshot.nominal(m)
    st = solve_acpf(m, (0,), loads)
    assert st.vm[2] == 0.0 and not st.energized[2]
    for fl in line_flows(m, (0,), st):
        assert fl[1] == 0.0
    dp, dq = injection_residual(m, (0,), st, loads)
    assert np.abs(dp).max() <= 1e-10 and np.abs(dq).max() <= 1e-10


def test_loaded_island_rejected():
    m = parse_grid(ISLAND.replace("3,load,0,0", "3,load,10,5"))
    with pytest.raises(InfeasibleIslandError):
        solve_acpf(m, (0,), LoadSnapshot.nominal(m))


def test_divergence(feeder):
    with pytest.raises(DivergenceError):
        solve_acpf(feeder, (0,) * 5, LoadSnapshot.nominal(feeder, 50.0))


def test_bad_load_length(feeder):
    with pytest.raises(ValidationError):
        solve_acpf(feeder, (0,) * 5, LoadSnapshot(np.zeros(3), np.zeros(3)))


def test_slack_fixed(feeder):
    st = solve_acpf(feeder, (0,) * 5, LoadSnapshot.nominal(feeder), slack_vm=1.02, slack_va=0.1)
    assert st.vm[feeder.slack] == 1.02 and st.va[feeder.slack] == 0.1


def test_jacobian_finite_differences(feeder):
    topo = (1, 1, 1, 0, 0)
    st = solve_acpf(feeder, topo, LoadSnapshot.nominal(feeder))
    jac = jacobian(feeder, topo, st)
    n = feeder.n_bus
    h = 1e-6
    fd = np.zeros_like(jac)
    for k in range(2 * n):
        cols = []
        for sgn in (1, -1):
            vm, va = st.vm.copy(), st.va.copy()
            if k < n:
                va[k] += sgn * h
            else:
                vm[k - n] += sgn * h
            p, q = bus_injections(feeder, topo, PolarState(vm, va))
            cols.append(np.concatenate([p, q]))
        fd[:, k] = (cols[0] - cols[1]) / (2 * h)
    np.testing.assert_allclose(jac, fd, atol=1e-6 * np.abs(jac).max())
