"""Joint topology detection and state estimation in polar coordinates.

Each iteration linearises the polar line-flow equations around the previous
iterate, attaches switch binaries to switchable lines with big-M blocks, and
solves the resulting mixed-binary weighted least-squares problem.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .acpf import PolarState, eval_flow_ppv
from .errors import BigMError, EstimationError, QPInfeasibleError, ValidationError
from .miqp import MixedBinaryQP, QuadraticProgram, solve_miqp

MIN_VM = 0.5


@dataclass(frozen=True)
class EstimatorConfig:
    """Iteration and solver settings shared by both estimators.

    ``on_miqp`` is called as ``on_miqp(problem, solution, iteration)`` after
    every MIQP solve. ``reuse_binaries`` seeds branch and bound with the
    previous iteration's switch vector of the same snapshot.
    """

    tol: float = 1e-6
    max_iter: int = 20
    big_m: float = 10.0
    strategy: str = "branch_and_bound"
    relaxation: str = "decoupled"
    fail_on_bigm: bool = False
    reuse_binaries: bool = True
    slack_vm: float = 1.0
    on_miqp: object = field(default=None, compare=False)


@dataclass
class EstimateResult:
    topology: tuple
    state: PolarState
    objective: float
    iterations: int
    converged: bool
    trace: list
    model: str = "ppv"
    t: float = 0.0
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)


def estimate_header(n_switch, n_bus):
    return (["t_sec", "model", "converged", "iters", "objective"]
            + [f"theta_{k}" for k in range(n_switch)]
            + [f"vm_{k + 1}" for k in range(n_bus)]
            + [f"va_{k + 1}" for k in range(n_bus)])


def estimate_row(res):
    return ([f"{res.t:g}", res.model, int(res.converged), res.iterations, repr(float(res.objective))]
            + [int(v) for v in res.topology]
            + [repr(float(v)) for v in res.state.vm]
            + [repr(float(v)) for v in res.state.va])


# ---------------------------------------------------------------------------
# linearisation


@dataclass(frozen=True, eq=False)
class PpvLinearization:
    """Affine P and Q flow models ``c_ea*Ea + c_ec*Ec + c_phi*phi + k``."""

    p_ea: np.ndarray
    p_ec: np.ndarray
    p_phi: np.ndarray
    p_k: np.ndarray
    q_ea: np.ndarray
    q_ec: np.ndarray
    q_phi: np.ndarray
    q_k: np.ndarray

    def evaluate(self, ea, ec, phi):
        p = self.p_ea * ea + self.p_ec * ec + self.p_phi * phi + self.p_k
        q = self.q_ea * ea + self.q_ec * ec + self.q_phi * phi + self.q_k
        return p, q


def linearize_flow_ppv(g, b, ea0, ec0, phi0):
    """First-order expansion of the polar flow equations (vectorised)."""
    g, b, ea0, ec0, phi0 = (np.asarray(v, dtype=float) for v in (g, b, ea0, ec0, phi0))
    if np.any(ea0 <= 0) or np.any(ec0 <= 0):
        raise ValidationError("expansion point needs positive voltage magnitudes")
    cos, sin = np.cos(phi0), np.sin(phi0)
    gc_bs = g * cos + b * sin
    bc_gs = b * cos - g * sin
    p_ea = 2 * g * ea0 - ec0 * gc_bs
    p_ec = -ea0 * gc_bs
    p_phi = ea0 * ec0 * (g * sin - b * cos)
    q_ea = -2 * b * ea0 + ec0 * bc_gs
    q_ec = ea0 * bc_gs
    q_phi = -ea0 * ec0 * (b * sin + g * cos)
    p0, q0 = eval_flow_ppv(g, b, ea0, ec0, phi0, 0.0)
    p_k = p0 - p_ea * ea0 - p_ec * ec0 - p_phi * phi0
    q_k = q0 - q_ea * ea0 - q_ec * ec0 - q_phi * phi0
    return PpvLinearization(p_ea, p_ec, p_phi, p_k, q_ea, q_ec, q_phi, q_k)


def linearize_network(model, vm, va):
    """Linearisations for both directions of every line at ``(vm, va)``."""
    f, t = model.from_idx, model.to_idx
    vm = np.maximum(vm, MIN_VM)
    fwd = linearize_flow_ppv(model.g, model.b, vm[f], vm[t], va[f] - va[t])
    rev = linearize_flow_ppv(model.g, model.b, vm[t], vm[f], va[t] - va[f])
    return fwd, rev


# ---------------------------------------------------------------------------
# problem assembly


@dataclass(frozen=True)
class PpvVariableMap:
    n_bus: int
    n_sw: int
    n_load: int
    n_switch: int

    @property
    def e(self):
        return np.arange(self.n_bus)

    @property
    def phi(self):
        return self.n_bus + np.arange(self.n_bus)

    def sw_flow(self, k):
        """(P_ac, Q_ac, P_ca, Q_ca) indices of switchable line ``k``."""
        base = 2 * self.n_bus + 4 * k
        return base, base + 1, base + 2, base + 3

    @property
    def pd(self):
        return 2 * self.n_bus + 4 * self.n_sw + np.arange(self.n_load)

    @property
    def qd(self):
        return self.pd + self.n_load

    @property
    def pg(self):
        return 2 * self.n_bus + 4 * self.n_sw + 2 * self.n_load

    @property
    def qg(self):
        return self.pg + 1

    @property
    def theta(self):
        return self.pg + 2 + np.arange(self.n_switch)

    @property
    def n(self):
        return self.pg + 2 + self.n_switch


def _meter_objective(Qd, c, const, idx, z, w):
    Qd[idx] += 2 * w
    c[idx] += -2 * w * z
    return const + float(np.sum(w * z * z))


def build_ppv_problem(model, meas, lin, big_m=10.0, slack_vm=1.0):
    """Mixed-binary WLS problem for one linearisation; returns (problem, map)."""
    fwd, rev = lin
    nb = model.n_bus
    loads = np.array(model.load_buses, dtype=int)
    sw_lines = model.switch_lines
    vmap = PpvVariableMap(nb, len(sw_lines), loads.size, model.n_switch)
    n = vmap.n
    s = model.slack
    f, t = model.from_idx, model.to_idx
    is_sw = np.zeros(model.n_line, dtype=bool)
    is_sw[sw_lines] = True
    ns = np.flatnonzero(~is_sw)

    # balance rows: 0..nb-1 for P, nb..2nb-1 for Q; then the two pins
    A = np.zeros((2 * nb + 2, n))
    rhs = np.zeros(2 * nb + 2)
    e_, ph = vmap.e, vmap.phi
    for lz, a_bus, c_bus in ((fwd, f, t), (rev, t, f)):
        for off, ce, cc, cp, k in ((0, lz.p_ea, lz.p_ec, lz.p_phi, lz.p_k),
                                   (nb, lz.q_ea, lz.q_ec, lz.q_phi, lz.q_k)):
            r = off + a_bus[ns]
            np.add.at(A, (r, e_[a_bus[ns]]), -ce[ns])
            np.add.at(A, (r, e_[c_bus[ns]]), -cc[ns])
            np.add.at(A, (r, ph[a_bus[ns]]), -cp[ns])
            np.add.at(A, (r, ph[c_bus[ns]]), cp[ns])
            np.add.at(rhs, r, k[ns])
    for k, ln in enumerate(sw_lines):
        pac, qac, pca, qca = vmap.sw_flow(k)
        A[f[ln], pac] -= 1
        A[nb + f[ln], qac] -= 1
        A[t[ln], pca] -= 1
        A[nb + t[ln], qca] -= 1
    A[loads, vmap.pd] -= 1
    A[nb + loads, vmap.qd] -= 1
    A[s, vmap.pg] += 1
    A[nb + s, vmap.qg] += 1
    A[2 * nb, ph[s]] = 1.0
    A[2 * nb + 1, e_[s]] = 1.0
    rhs[2 * nb + 1] = slack_vm

    # big-M blocks: 4 rows per switchable line, direction and quantity
    G = np.zeros((16 * len(sw_lines), n))
    h = np.zeros(16 * len(sw_lines))
    row = 0
    for k, ln in enumerate(sw_lines):
        th = vmap.theta[model.lines[ln].switch_id]
        pac, qac, pca, qca = vmap.sw_flow(k)
        blocks = []
        for lz, a_bus, c_bus, pv, qv in ((fwd, f[ln], t[ln], pac, qac), (rev, t[ln], f[ln], pca, qca)):
            blocks.append((pv, lz.p_ea[ln], lz.p_ec[ln], lz.p_phi[ln], lz.p_k[ln], a_bus, c_bus))
            blocks.append((qv, lz.q_ea[ln], lz.q_ec[ln], lz.q_phi[ln], lz.q_k[ln], a_bus, c_bus))
        for var, ce, cc, cp, kk, a_bus, c_bus in blocks:
            chi = np.zeros(n)
            chi[e_[a_bus]] += ce
            chi[e_[c_bus]] += cc
            chi[ph[a_bus]] += cp
            chi[ph[c_bus]] -= cp
            G[row] = chi
            G[row, var] = -1.0
            G[row, th] = big_m
            h[row] = big_m - kk
            G[row + 1] = -chi
            G[row + 1, var] = 1.0
            G[row + 1, th] = big_m
            h[row + 1] = big_m + kk
            G[row + 2, var] = 1.0
            G[row + 2, th] = -big_m
            G[row + 3, var] = -1.0
            G[row + 3, th] = -big_m
            row += 4

    Qd = np.zeros(n)
    c = np.zeros(n)
    a = meas.arrays()
    const = _meter_objective(Qd, c, 0.0, e_[a["pmu_idx"]], a["vm"], 1 / a["s_vm"] ** 2)
    const = _meter_objective(Qd, c, const, ph[a["pmu_idx"]], a["va"], 1 / a["s_va"] ** 2)
    pos = {int(b): j for j, b in enumerate(loads)}
    li = np.array([pos[int(k)] for k in a["meter_idx"]], dtype=int)
    const = _meter_objective(Qd, c, const, vmap.pd[li], a["p"], 1 / a["s_p"] ** 2)
    const = _meter_objective(Qd, c, const, vmap.qd[li], a["q"], 1 / a["s_q"] ** 2)
    sub = meas.substation
    const = _meter_objective(Qd, c, const, np.array([vmap.pg]), np.array([sub.p]), np.array([sub.sigma_p ** -2]))
    const = _meter_objective(Qd, c, const, np.array([vmap.qg]), np.array([sub.q]), np.array([sub.sigma_q ** -2]))
    qp = QuadraticProgram(np.diag(Qd), c, const, A, rhs, G, h, validate=False)
    return MixedBinaryQP(qp, tuple(int(i) for i in vmap.theta)), vmap


def check_big_m(values, chi, theta, big_m, tol=1e-6):
    """True if any big-M bound is (nearly) binding, which hints M is too small."""
    values, chi, theta = np.asarray(values), np.asarray(chi), np.asarray(theta)
    lim = big_m * (1 - tol)
    return bool(np.any((theta == 1) & (np.abs(values) >= lim)) or np.any((theta == 0) & (np.abs(chi) >= lim)))


def _ppv_bigm_tight(model, vmap, x, lin, big_m):
    fwd, rev = lin
    f, t = model.from_idx, model.to_idx
    E, ph = x[vmap.e], x[vmap.phi]
    vals, chis, ths = [], [], []
    for k, ln in enumerate(model.switch_lines):
        th = x[vmap.theta[model.lines[ln].switch_id]]
        pac, qac, pca, qca = vmap.sw_flow(k)
        pf, qf = fwd.evaluate(E[f[ln]], E[t[ln]], ph[f[ln]] - ph[t[ln]])
        pr, qr = rev.evaluate(E[t[ln]], E[f[ln]], ph[t[ln]] - ph[f[ln]])
        vals += [x[pac], x[qac], x[pca], x[qca]]
        chis += [pf[ln], qf[ln], pr[ln], qr[ln]]
        ths += [round(th)] * 4
    return check_big_m(vals, chis, ths, big_m)


def _solve(problem, cfg, hint, it, t):
    try:
        sol = solve_miqp(problem, cfg.strategy, incumbent_hint=hint, relaxation=cfg.relaxation)
    except QPInfeasibleError as exc:
        raise EstimationError(f"t={t:g}: MIQP infeasible at iteration {it}: {exc}", iteration=it) from exc
    if cfg.on_miqp is not None:
        cfg.on_miqp(problem, sol, it)
    return sol


def _bigm_event(tight, cfg, it):
    if not tight:
        return
    msg = f"big-M bound binding at iteration {it}; M={cfg.big_m} may be too small"
    if cfg.fail_on_bigm:
        raise BigMError(msg)
    warnings.warn(msg, RuntimeWarning, stacklevel=3)


def estimate_ppv(model, meas, cfg=None):
    """Iterate linearise / solve from a flat start until the state settles."""
    cfg = cfg or EstimatorConfig()
    t0 = time.perf_counter()
    meas.validate(model)
    vm = np.ones(model.n_bus)
    va = np.zeros(model.n_bus)
    vm[model.slack] = cfg.slack_vm
    hint = None
    trace = []
    stats = []
    converged = False
    sol = None
    it = 0
    for it in range(1, cfg.max_iter + 1):
        lin = linearize_network(model, vm, va)
        problem, vmap = build_ppv_problem(model, meas, lin, cfg.big_m, cfg.slack_vm)
        sol = _solve(problem, cfg, hint if cfg.reuse_binaries else None, it, meas.t)
        stats.append(sol.stats)
        _bigm_event(_ppv_bigm_tight(model, vmap, sol.x, lin, cfg.big_m), cfg, it)
        new_vm, new_va = sol.x[vmap.e], sol.x[vmap.phi]
        step = float(max(np.max(np.abs(new_vm - vm)), np.max(np.abs(new_va - va))))
        trace.append(step)
        vm, va = new_vm, new_va
        hint = sol.binaries
        if step <= cfg.tol:
            converged = True
            break
    return EstimateResult(
        topology=tuple(int(v) for v in sol.binaries),
        state=PolarState(vm.copy(), va.copy()),
        objective=float(sol.objective),
        iterations=it,
        converged=converged,
        trace=trace,
        model="ppv",
        t=meas.t,
        wall_time=time.perf_counter() - t0,
        extra={"miqp_stats": stats},
    )
