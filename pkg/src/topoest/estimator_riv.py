"""Joint topology detection and state estimation in rectangular coordinates.

Line currents are linear in the rectangular voltages, so only the bus power
injections need linearising. Switchable lines carry explicit current
variables tied to the switch binaries by big-M blocks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .acpf import PolarState, eval_flow_riv
from .errors import ValidationError
from .estimator_ppv import (
    EstimateResult,
    EstimatorConfig,
    _bigm_event,
    _meter_objective,
    _solve,
    check_big_m,
)
from .miqp import MixedBinaryQP, QuadraticProgram

MIN_VM = 0.5


@dataclass(frozen=True, eq=False)
class RectangularState:
    """Bus voltages plus the net current each bus pushes into its lines."""

    er: np.ndarray
    ei: np.ndarray
    ir: np.ndarray = None
    ii: np.ndarray = None

    def __post_init__(self):
        n = len(self.er)
        if self.ir is None:
            object.__setattr__(self, "ir", np.zeros(n))
        if self.ii is None:
            object.__setattr__(self, "ii", np.zeros(n))

    @classmethod
    def flat(cls, n_bus, slack=0, slack_vm=1.0):
        er = np.ones(n_bus)
        er[slack] = slack_vm
        return cls(er, np.zeros(n_bus))

    @classmethod
    def from_polar(cls, state):
        v = state.vm * np.exp(1j * state.va)
        return cls(v.real.copy(), v.imag.copy())

    def to_polar(self):
        v = self.er + 1j * self.ei
        return PolarState(np.abs(v), np.angle(v))

    def power(self):
        """Complex power leaving each bus through its lines, E * conj(I)."""
        return (self.er + 1j * self.ei) * np.conj(self.ir + 1j * self.ii)


def pmu_to_rectangular_arrays(mag, ang, s_mag, s_ang):
    """Vectorised rectangular readings (k, 2) and covariances (k, 2, 2)."""
    mag, ang = np.asarray(mag, dtype=float), np.asarray(ang, dtype=float)
    cos, sin = np.cos(ang), np.sin(ang)
    z = np.stack([mag * cos, mag * sin], axis=-1)
    # first-order propagation through J = [[cos, -E sin], [sin, E cos]]
    vm, va = np.asarray(s_mag, dtype=float) ** 2, (mag * np.asarray(s_ang, dtype=float)) ** 2
    cov = np.empty(mag.shape + (2, 2))
    cov[..., 0, 0] = cos**2 * vm + sin**2 * va
    cov[..., 1, 1] = sin**2 * vm + cos**2 * va
    cov[..., 0, 1] = cov[..., 1, 0] = cos * sin * (vm - va)
    return z, cov


def pmu_to_rectangular(m):
    """Rectangular voltage reading and its 2x2 covariance from a polar PMU reading."""
    z, cov = pmu_to_rectangular_arrays(m.magnitude, m.angle, m.sigma_mag, m.sigma_ang)
    return z, cov

def linearize_injection(er0, ei0, ir0, ii0):
    """Coefficients of P and Q in (er, ei, ir, ii) plus constants, exact at the point.

    Returns ``(p_coef, p_k, q_coef, q_k)`` where each coef has shape (4, n)
    ordered as (er, ei, ir, ii).
    """
    er0, ei0, ir0, ii0 = (np.asarray(v, dtype=float) for v in (er0, ei0, ir0, ii0))
    p_coef = np.array([ir0, ii0, er0, ei0])
    q_coef = np.array([-ii0, ir0, ei0, -er0])
    p0 = er0 * ir0 + ei0 * ii0
    q0 = ei0 * ir0 - er0 * ii0
    # bilinear terms: constant is minus the point value
    return p_coef, -p0, q_coef, -q0


@dataclass(frozen=True, eq=False)
class RivVariableMap:
    """Variable layout of the RIV problem.

    Bus injection currents are affine in the voltages and switchable line
    currents, so they are substituted out of the QP; ``inj_r`` and ``inj_i``
    hold the maps ``I_inj = C @ x`` used to recover them.
    """

    n_bus: int
    n_sw: int
    n_load: int
    n_switch: int
    inj_r: np.ndarray = None
    inj_i: np.ndarray = None

    @property
    def er(self):
        return np.arange(self.n_bus)

    @property
    def ei(self):
        return self.n_bus + np.arange(self.n_bus)

    @property
    def line_ir(self):
        """Real current on each switchable line, from-bus to to-bus."""
        return 2 * self.n_bus + np.arange(self.n_sw)

    @property
    def line_ii(self):
        return 2 * self.n_bus + self.n_sw + np.arange(self.n_sw)

    @property
    def pd(self):
        return 2 * self.n_bus + 2 * self.n_sw + np.arange(self.n_load)

    @property
    def qd(self):
        return self.pd + self.n_load

    @property
    def pg(self):
        return 2 * self.n_bus + 2 * self.n_sw + 2 * self.n_load

    @property
    def qg(self):
        return self.pg + 1

    @property
    def theta(self):
        return self.pg + 2 + np.arange(self.n_switch)

    @property
    def n(self):
        return self.pg + 2 + self.n_switch

    def injections(self, x):
        return self.inj_r @ x, self.inj_i @ x


def injection_maps(model, n, er, ei, line_ir, line_ii):
    """Rows expressing each bus's net outgoing current as a linear map of x."""
    nb = model.n_bus
    f, t = model.from_idx, model.to_idx
    sw = np.asarray(model.switch_lines, dtype=int)
    is_sw = np.zeros(model.n_line, dtype=bool)
    is_sw[sw] = True
    ns = np.flatnonzero(~is_sw)
    gl, bl = model.g[ns], model.b[ns]
    cr = np.zeros((nb, n))
    ci = np.zeros((nb, n))
    # fixed lines: current a->c is g*dEr - b*dEi (real), b*dEr + g*dEi (imag)
    for a_bus, c_bus in ((f[ns], t[ns]), (t[ns], f[ns])):
        np.add.at(cr, (a_bus, er[a_bus]), gl)
        np.add.at(cr, (a_bus, er[c_bus]), -gl)
        np.add.at(cr, (a_bus, ei[a_bus]), -bl)
        np.add.at(cr, (a_bus, ei[c_bus]), bl)
        np.add.at(ci, (a_bus, er[a_bus]), bl)
        np.add.at(ci, (a_bus, er[c_bus]), -bl)
        np.add.at(ci, (a_bus, ei[a_bus]), gl)
        np.add.at(ci, (a_bus, ei[c_bus]), -gl)
    # switchable lines: forward current leaves f, enters t
    np.add.at(cr, (f[sw], line_ir), 1.0)
    np.add.at(ci, (f[sw], line_ii), 1.0)
    np.add.at(cr, (t[sw], line_ir), -1.0)
    np.add.at(ci, (t[sw], line_ii), -1.0)
    return cr, ci


def build_riv_problem(model, meas, point, big_m=10.0, slack_vm=1.0):
    """Mixed-binary WLS problem linearised at ``point``; returns (problem, map)."""
    er0, ei0 = np.asarray(point.er, dtype=float), np.asarray(point.ei, dtype=float)
    if np.any(np.hypot(er0, ei0) <= 0):
        raise ValidationError("expansion point needs nonzero voltage magnitudes")
    nb = model.n_bus
    loads = np.array(model.load_buses, dtype=int)
    sw_lines = np.asarray(model.switch_lines, dtype=int)
    nsw = sw_lines.size
    base = RivVariableMap(nb, nsw, loads.size, model.n_switch)
    n = base.n
    er, ei = base.er, base.ei
    cr, ci = injection_maps(model, n, er, ei, base.line_ir, base.line_ii)
    vmap = RivVariableMap(nb, nsw, loads.size, model.n_switch, cr, ci)
    s = model.slack
    f, t = model.from_idx, model.to_idx
    g, b = model.g, model.b

    # rows: 2 pins, then nb P and nb Q linearised injections
    A = np.zeros((2 + 2 * nb, n))
    rhs = np.zeros(2 + 2 * nb)
    A[0, er[s]] = 1.0
    rhs[0] = slack_vm
    A[1, ei[s]] = 1.0
    # PG - PD - P(E, I) = 0 per bus, P linearised around the point
    pc, pk, qc, qk = linearize_injection(er0, ei0, point.ir, point.ii)
    rp = 2 + np.arange(nb)
    rq = 2 + nb + np.arange(nb)
    for rows, coef, k in ((rp, pc, pk), (rq, qc, qk)):
        A[rows] = -(coef[2][:, None] * cr + coef[3][:, None] * ci)
        A[rows, er] -= coef[0]
        A[rows, ei] -= coef[1]
        rhs[rows] = k
    A[rp[loads], vmap.pd] = -1.0
    A[rq[loads], vmap.qd] = -1.0
    A[rp[s], vmap.pg] = 1.0
    A[rq[s], vmap.qg] = 1.0

    # big-M blocks: 4 rows per switchable line and current component
    G = np.zeros((8 * nsw, n))
    h = np.zeros(8 * nsw)
    th = vmap.theta[[model.lines[ln].switch_id for ln in sw_lines]]
    fs, ts, gs, bs = f[sw_lines], t[sw_lines], g[sw_lines], b[sw_lines]
    for comp, var, cr, ci in ((0, vmap.line_ir, gs, -bs), (1, vmap.line_ii, bs, gs)):
        base = 8 * np.arange(nsw) + 4 * comp
        for sign, r in ((1.0, base), (-1.0, base + 1)):
            G[r, er[fs]] = sign * cr
            G[r, er[ts]] = -sign * cr
            G[r, ei[fs]] = sign * ci
            G[r, ei[ts]] = -sign * ci
            G[r, var] = -sign
            G[r, th] = big_m
            h[r] = big_m
        G[base + 2, var] = 1.0
        G[base + 2, th] = -big_m
        G[base + 3, var] = -1.0
        G[base + 3, th] = -big_m

    Q = np.zeros((n, n))
    c = np.zeros(n)
    a = meas.arrays()
    z, cov = pmu_to_rectangular_arrays(a["vm"], a["va"], a["s_vm"], a["s_va"])
    w = np.linalg.inv(cov)
    wz = np.einsum("kij,kj->ki", w, z)
    pr, pi = er[a["pmu_idx"]], ei[a["pmu_idx"]]
    for i, ri_ in enumerate((pr, pi)):
        for j, rj_ in enumerate((pr, pi)):
            Q[ri_, rj_] += 2 * w[:, i, j]
        c[ri_] += -2 * wz[:, i]
    const = float(np.sum(z * wz))
    Qd = np.zeros(n)
    pos = {int(bus): j for j, bus in enumerate(loads)}
    li = np.array([pos[int(k)] for k in a["meter_idx"]], dtype=int)
    const = _meter_objective(Qd, c, const, vmap.pd[li], a["p"], 1 / a["s_p"] ** 2)
    const = _meter_objective(Qd, c, const, vmap.qd[li], a["q"], 1 / a["s_q"] ** 2)
    sub = meas.substation
    const = _meter_objective(Qd, c, const, np.array([vmap.pg]), np.array([sub.p]), np.array([sub.sigma_p ** -2]))
    const = _meter_objective(Qd, c, const, np.array([vmap.qg]), np.array([sub.q]), np.array([sub.sigma_q ** -2]))
    Q[np.diag_indices(n)] += Qd
    qp = QuadraticProgram(Q, c, const, A, rhs, G, h, validate=False)
    return MixedBinaryQP(qp, tuple(int(i) for i in vmap.theta)), vmap


def _riv_bigm_tight(model, vmap, x, big_m):
    f, t = model.from_idx, model.to_idx
    sw = np.asarray(model.switch_lines, dtype=int)
    er, ei = x[vmap.er], x[vmap.ei]
    cr, ci = eval_flow_riv(model.g[sw], model.b[sw], er[f[sw]], ei[f[sw]], er[t[sw]], ei[t[sw]])
    th = np.array([round(x[vmap.theta[model.lines[ln].switch_id]]) for ln in sw])
    vals = np.concatenate([x[vmap.line_ir], x[vmap.line_ii]])
    return check_big_m(vals, np.concatenate([cr, ci]), np.concatenate([th, th]), big_m)


def _clamp(er, ei):
    """Raise magnitudes below MIN_VM so the expansion point stays meaningful."""
    mag = np.hypot(er, ei)
    scale = np.where(mag < MIN_VM, MIN_VM / np.maximum(mag, 1e-300), 1.0)
    er, ei = er * scale, ei * scale
    er = np.where(mag == 0, MIN_VM, er)
    return er, ei


def estimate_riv(model, meas, cfg=None):
    """Iterate linearise / solve from a flat start until the voltages settle."""
    cfg = cfg or EstimatorConfig()
    t0 = time.perf_counter()
    meas.validate(model)
    point = RectangularState.flat(model.n_bus, model.slack, cfg.slack_vm)
    hint = None
    trace = []
    stats = []
    converged = False
    sol = None
    it = 0
    for it in range(1, cfg.max_iter + 1):
        er0, ei0 = _clamp(point.er, point.ei)
        problem, vmap = build_riv_problem(model, meas, RectangularState(er0, ei0, point.ir, point.ii),
                                          cfg.big_m, cfg.slack_vm)
        sol = _solve(problem, cfg, hint if cfg.reuse_binaries else None, it, meas.t)
        stats.append(sol.stats)
        _bigm_event(_riv_bigm_tight(model, vmap, sol.x, cfg.big_m), cfg, it)
        new = RectangularState(sol.x[vmap.er], sol.x[vmap.ei], *vmap.injections(sol.x))
        step = float(max(np.max(np.abs(new.er - point.er)), np.max(np.abs(new.ei - point.ei))))
        trace.append(step)
        point = new
        hint = sol.binaries
        if step <= cfg.tol:
            converged = True
            break
    return EstimateResult(
        topology=tuple(int(v) for v in sol.binaries),
        state=point.to_polar(),
        objective=float(sol.objective),
        iterations=it,
        converged=converged,
        trace=trace,
        model="riv",
        t=meas.t,
        wall_time=time.perf_counter() - t0,
        extra={"miqp_stats": stats, "rectangular": point},
    )
