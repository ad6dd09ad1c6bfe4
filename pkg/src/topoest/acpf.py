"""Nonlinear AC power flow used as ground truth, plus exact flow evaluators.

Lines are series ``r + jx`` branches (no shunt charging). The substation is
the only source and acts as slack; every other bus is a PQ bus.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, InfeasibleIslandError, ValidationError
from .grid import apply_topology, check_topology


@dataclass(frozen=True, eq=False)
class LoadSnapshot:
    p: np.ndarray
    q: np.ndarray

    @classmethod
    def nominal(cls, model, scale=1.0):
        return cls(model.nominal_p * scale, model.nominal_q * scale)

    @classmethod
    def zeros(cls, model):
        return cls(np.zeros(model.n_bus), np.zeros(model.n_bus))


@dataclass(frozen=True, eq=False)
class PolarState:
    vm: np.ndarray
    va: np.ndarray
    energized: np.ndarray | None = None

    @property
    def complex(self):
        return self.vm * np.exp(1j * self.va)


def eval_flow_ppv(g, b, ea, ec, pa, pc):
    """Active/reactive flow from bus a to bus c in polar coordinates."""
    d = np.subtract(pa, pc)
    eaec = np.multiply(ea, ec)
    cos, sin = np.cos(d), np.sin(d)
    ea2 = np.multiply(ea, ea)
    p = ea2 * g - eaec * g * cos - eaec * b * sin
    q = -ea2 * b + eaec * b * cos - eaec * g * sin
    return p, q


def eval_flow_riv(g, b, era, eia, erc, eic):
    """Real/imaginary current from bus a to bus c; linear in the voltages."""
    dr = np.subtract(era, erc)
    di = np.subtract(eia, eic)
    return g * dr - b * di, b * dr + g * di


def _ybus(model, lines):
    n = model.n_bus
    y = np.zeros((n, n), dtype=complex)
    lines = np.asarray(lines, dtype=int)
    f, t = model.from_idx[lines], model.to_idx[lines]
    ys = model.g[lines] + 1j * model.b[lines]
    np.add.at(y, (f, f), ys)
    np.add.at(y, (t, t), ys)
    np.add.at(y, (f, t), -ys)
    np.add.at(y, (t, f), -ys)
    return y


def line_flows(model, topo, state):
    """(P_from, Q_from, P_to, Q_to) per line; open lines carry zero."""
    on = model.line_in_service(topo)
    f, t = model.from_idx, model.to_idx
    g, b = model.g, model.b
    pf, qf = eval_flow_ppv(g, b, state.vm[f], state.vm[t], state.va[f], state.va[t])
    pt, qt = eval_flow_ppv(g, b, state.vm[t], state.vm[f], state.va[t], state.va[f])
    return pf * on, qf * on, pt * on, qt * on


def bus_injections(model, topo, state):
    """Net injection (generation minus demand) implied by the line flows."""
    pf, qf, pt, qt = line_flows(model, topo, state)
    p = np.zeros(model.n_bus)
    q = np.zeros(model.n_bus)
    np.add.at(p, model.from_idx, pf)
    np.add.at(q, model.from_idx, qf)
    np.add.at(p, model.to_idx, pt)
    np.add.at(q, model.to_idx, qt)
    return p, q


def injection_residual(model, topo, state, loads):
    """Power-balance mismatch per bus; zero at the slack, whose output is free."""
    p, q = bus_injections(model, topo, state)
    dp = p + loads.p
    dq = q + loads.q
    dp[model.slack] = 0.0
    dq[model.slack] = 0.0
    if state.energized is not None:
        dp[~state.energized] = 0.0
        dq[~state.energized] = 0.0
    return dp, dq


def _dsbus(y, v):
    """Partial derivatives of complex injections w.r.t. angle and magnitude."""
    ibus = y @ v
    mag = np.abs(v)
    vn = np.divide(v, mag, out=np.zeros_like(v), where=mag > 0)
    ds_dva = 1j * v[:, None] * np.conj(np.diag(ibus) - y * v[None, :])
    ds_dvm = v[:, None] * np.conj(y * vn[None, :]) + np.diag(np.conj(ibus) * vn)
    return ds_dva, ds_dvm


@functools.lru_cache(maxsize=256)
def _topology_data(model, topo):
    """Energized-bus mask, PQ bus list and admittance matrix (cached, read-only)."""
    eg = apply_topology(model, topo)
    live = eg.labels == eg.labels[model.slack]
    y = _ybus(model, eg.lines)
    pq = np.array([k for k in np.flatnonzero(live) if k != model.slack], dtype=int)
    for a in (live, y, pq):
        a.setflags(write=False)
    return live, y, pq


def solve_acpf(model, topo, loads, tol=1e-10, max_iter=50, slack_vm=1.0, slack_va=0.0):
    """Newton-Raphson power flow from a flat start.

    Buses cut off from the substation are returned de-energized (zero
    voltage). Raises InfeasibleIslandError if such a bus has load and
    DivergenceError if the mismatch does not fall below ``tol``.
    """
    if len(loads.p) != model.n_bus or len(loads.q) != model.n_bus:
        raise ValidationError("load snapshot length does not match bus count")
    s = model.slack
    live, y, pq = _topology_data(model, check_topology(model, topo))
    dead = ~live
    if np.any((np.abs(loads.p[dead]) > 0) | (np.abs(loads.q[dead]) > 0)):
        bad = [int(k) + 1 for k in np.flatnonzero(dead & ((loads.p != 0) | (loads.q != 0)))]
        raise InfeasibleIslandError(f"load on de-energized buses {bad}")

    vm = np.where(live, 1.0, 0.0)
    va = np.zeros(model.n_bus)
    vm[s], va[s] = slack_vm, slack_va
    va[live] = slack_va
    s_spec = -(loads.p + 1j * loads.q)
    npq = len(pq)
    for it in range(max_iter + 1):
        v = vm * np.exp(1j * va)
        mis = v * np.conj(y @ v) - s_spec
        f = np.concatenate([mis.real[pq], mis.imag[pq]])
        if npq == 0 or np.max(np.abs(f)) <= tol:
            return PolarState(vm, va, live.copy())
        if it == max_iter:
            break
        ds_dva, ds_dvm = _dsbus(y, v)
        sub_a = ds_dva[np.ix_(pq, pq)]
        sub_m = ds_dvm[np.ix_(pq, pq)]
        jac = np.block([[sub_a.real, sub_m.real], [sub_a.imag, sub_m.imag]])
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as exc:
            raise DivergenceError(f"singular Jacobian at iteration {it}") from exc
        va[pq] += dx[:npq]
        vm[pq] += dx[npq:]
        if not np.all(np.isfinite(vm)) or np.any(vm[pq] <= 0):
            raise DivergenceError(f"voltage collapse at iteration {it}")
    raise DivergenceError(f"power flow did not converge in {max_iter} iterations")


def jacobian(model, topo, state):
    """Analytic power-flow Jacobian d(P,Q)/d(va,vm) over all buses (for testing)."""
    eg = apply_topology(model, topo)
    y = _ybus(model, eg.lines)
    ds_dva, ds_dvm = _dsbus(y, state.complex)
    return np.block([[ds_dva.real, ds_dvm.real], [ds_dva.imag, ds_dvm.imag]])
