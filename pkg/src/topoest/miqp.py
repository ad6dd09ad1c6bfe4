"""Convex QP and mixed-binary convex QP solver.

Problems are ``min 1/2 x'Qx + c'x + const`` subject to ``A_eq x = b_eq``,
``A_in x <= b_in`` and optional variable bounds. The continuous solver is a
primal active-set method working in the null space of the equality
constraints, with an elastic phase 1 when the start point is infeasible.
Mixed-binary problems are solved by branch and bound over that QP, or by
exhaustive enumeration (used as an oracle).

Ties between binary assignments whose objectives differ by at most
``tie_tol`` are broken towards the lexicographically smallest vector, for
both strategies.
"""

from __future__ import annotations

import heapq
import io
import itertools
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import NotPSDError, QPInfeasibleError, QPUnboundedError, SolverError, ValidationError

FEAS_TOL = 1e-9


def _dense(a, shape):
    if a is None:
        return np.zeros(shape)
    if sp.issparse(a):
        a = a.toarray()
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size != shape[0] * shape[1]:
        raise ValidationError(f"matrix of shape {a.shape} does not fit {shape}")
    return a.reshape(shape)


@dataclass(frozen=True, eq=False)
class QuadraticProgram:
    Q: np.ndarray
    c: np.ndarray
    const_term: float = 0.0
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).ravel()
        n = c.size
        put = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        put("c", c)
        put("Q", _dense(self.Q, (n, n)))
        m_eq = 0 if self.b_eq is None else np.asarray(self.b_eq).size
        m_in = 0 if self.b_in is None else np.asarray(self.b_in).size
        put("A_eq", _dense(self.A_eq, (m_eq, n)))
        put("b_eq", np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, dtype=float).ravel())
        put("A_in", _dense(self.A_in, (m_in, n)))
        put("b_in", np.zeros(0) if self.b_in is None else np.asarray(self.b_in, dtype=float).ravel())
        put("lb", np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).ravel().copy())
        put("ub", np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).ravel().copy())
        if self.lb.size != n or self.ub.size != n:
            raise ValidationError("bound vectors must have one entry per variable")
        if np.any(self.lb > self.ub):
            raise ValidationError("lower bound above upper bound")
        if self.validate:
            check_psd(self.Q)
        put("_split", _centred_form(self.Q, self.c, self.const_term))

    @property
    def n(self):
        return self.c.size

    def objective(self, x):
        x = np.asarray(x, dtype=float)
        split = self._split
        if split is None:
            return float(0.5 * x @ self.Q @ x + self.c @ x + self.const_term)
        sq, rest, q_sq, centre, c_rest, shift = split
        r = x[sq] - centre
        qr = q_sq * r if q_sq.ndim == 1 else q_sq @ r
        return float(0.5 * r @ qr + c_rest @ x[rest] + shift)

    def violation(self, x):
        """Largest constraint violation of ``x`` (0 when feasible)."""
        v = [0.0]
        if self.b_eq.size:
            v.append(np.max(np.abs(self.A_eq @ x - self.b_eq)))
        if self.b_in.size:
            v.append(np.max(self.A_in @ x - self.b_in))
        v.append(np.max(self.lb - x))
        v.append(np.max(x - self.ub))
        return float(max(v))


def _centred_form(q, c, const):
    """Rewrite the objective as 0.5 r'Q r + c'x + shift with r = x - centre.

    Evaluating residuals directly avoids the cancellation of large weighted
    sums in least-squares objectives. Returns None when the curved block is
    not positive definite.
    """
    sq = np.flatnonzero(np.any(q != 0, axis=1))
    rest = np.flatnonzero(~np.any(q != 0, axis=1))
    if not sq.size:
        return None
    q_sq = q[np.ix_(sq, sq)]
    try:
        cf = sla.cho_factor(q_sq, check_finite=False)
    except np.linalg.LinAlgError:
        return None
    d = np.abs(np.diag(cf[0]))
    if d.min() ** 2 <= 1e-12 * d.max() ** 2:
        return None
    centre = -sla.cho_solve(cf, c[sq], check_finite=False)
    sqv = 0.5 * float(centre @ q_sq @ centre)
    shift = const - sqv
    if abs(shift) <= 1e-11 * (abs(const) + sqv):
        shift = 0.0  # rounding residue of a pure least-squares constant
    if np.count_nonzero(q_sq) == sq.size:
        q_sq = np.diag(q_sq).copy()
    elif sq.size > 512:
        # small dense products beat the per-call overhead of sparse ones
        q_sq = sp.csr_matrix(q_sq)
    return sq, rest, q_sq, centre, c[rest], shift


def check_psd(q):
    if not np.allclose(q, q.T, rtol=0, atol=1e-12 * max(1.0, np.max(np.abs(q), initial=0.0))):
        raise NotPSDError("Q is not symmetric")
    if q.size == 0:
        return
    d = np.diag(q)
    if np.count_nonzero(q - np.diag(d)) == 0:
        if np.any(d < 0):
            raise NotPSDError("Q has a negative diagonal entry")
        return
    shift = 1e-11 * max(1.0, np.max(np.abs(q)))
    try:
        np.linalg.cholesky(q + shift * np.eye(len(q)))
    except np.linalg.LinAlgError:
        raise NotPSDError("Q is not positive semidefinite") from None


@dataclass(frozen=True, eq=False)
class MixedBinaryQP:
    qp: QuadraticProgram
    binary_idx: tuple

    def __post_init__(self):
        idx = tuple(int(i) for i in self.binary_idx)
        if any(i < 0 or i >= self.qp.n for i in idx) or len(set(idx)) != len(idx):
            raise ValidationError("binary indices must be distinct and within [0, n)")
        object.__setattr__(self, "binary_idx", idx)


@dataclass
class QPResult:
    x: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    active: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.x, self.objective))


@dataclass
class MiqpSolution:
    x: np.ndarray
    objective: float
    binaries: tuple
    stats: dict


# ---------------------------------------------------------------------------
# equality-reduced problem


class _Reduced:
    """A QP rewritten as x = x0 + Z u over the null space of A_eq.

    Inequality rows (general rows first, then upper then lower bound rows)
    are stored once; nodes switch rows off when bounds fix variables.
    """

    def __init__(self, qp, extra_lb=None, extra_ub=None):
        self.qp = qp
        n = qp.n
        a_eq, b_eq = qp.A_eq, qp.b_eq
        self.scale_x = 1.0
        if a_eq.shape[0]:
            qmat, r, piv = sla.qr(a_eq.T, pivoting=True, check_finite=False)
            diag = np.abs(np.diag(r))
            tol = 1e-10 * (diag[0] if diag.size else 1.0)
            rank = int(np.sum(diag > tol))
            # a_eq[piv[:rank]] = R1' Q1', so x0 = Q1 R1'^-1 b is a particular solution
            y = sla.solve_triangular(r[:rank, :rank], b_eq[piv[:rank]], trans="T", check_finite=False)
            x0 = qmat[:, :rank] @ y
            res = b_eq - a_eq @ x0
            x0 = x0 + qmat[:, :rank] @ sla.solve_triangular(
                r[:rank, :rank], res[piv[:rank]], trans="T", check_finite=False)
            res = b_eq - a_eq @ x0
            if np.max(np.abs(res)) > 1e-9 * max(1.0, np.max(np.abs(b_eq))):
                raise QPInfeasibleError("equality constraints are inconsistent",
                                        certificate={"eq": -res, "in": np.zeros(qp.b_in.size)})
            self.Z = qmat[:, rank:]
        else:
            x0 = np.zeros(n)
            self.Z = np.eye(n)
        self.x0 = x0
        self.m = self.Z.shape[1]
        z = self.Z
        qz = qp.Q @ z
        h = z.T @ qz
        self.H_raw = 0.5 * (h + h.T)
        self.c_raw = z.T @ (qp.Q @ x0 + qp.c)
        s = max(1.0, np.max(np.abs(self.H_raw), initial=0.0), np.max(np.abs(self.c_raw), initial=0.0))
        self.obj_scale = s
        self.H = self.H_raw / s
        self.c = self.c_raw / s

        lb = qp.lb.copy() if extra_lb is None else np.maximum(qp.lb, extra_lb)
        ub = qp.ub.copy() if extra_ub is None else np.minimum(qp.ub, extra_ub)
        self.lb0, self.ub0 = lb, ub
        self.bounded_u = np.flatnonzero(np.isfinite(ub))
        self.bounded_l = np.flatnonzero(np.isfinite(lb))
        self.k_gen = qp.b_in.size
        rows = [qp.A_in @ z, z[self.bounded_u], -z[self.bounded_l]]
        self.G = np.vstack(rows) if self.m else np.zeros((sum(r.shape[0] for r in rows), 0))
        # rhs of bound rows depends on the node bounds; general rows are fixed
        self.h_gen = qp.b_in - qp.A_in @ x0
        self.touch = None
        self._find_implied_pairs()

    def _find_implied_pairs(self):
        """Pairs of general rows that differ only in columns that can be fixed.

        Once those columns are fixed, such a pair ``a'x <= b``, ``-a'x <= b'``
        may pin ``a'x`` to a single value; nodes then treat it as an equality.
        """
        qp = self.qp
        pairs = []
        if self.k_gen:
            fixable = np.flatnonzero(np.isfinite(self.lb0) & np.isfinite(self.ub0))
            a = qp.A_in.copy()
            a[:, fixable] = 0.0
            a = a + 0.0
            seen = {}
            for i in range(self.k_gen):
                if not np.any(a[i]):
                    continue
                neg = (-a[i] + 0.0).tobytes()
                j = seen.pop(neg, None)
                if j is not None:
                    pairs.append((j, i))
                else:
                    seen[a[i].tobytes()] = i
        self.pair_i = np.array([i for i, _ in pairs], dtype=int)
        self.pair_j = np.array([j for _, j in pairs], dtype=int)
        coef = qp.A_in[self.pair_i] + qp.A_in[self.pair_j]
        self.pair_coef = coef
        self.pair_supp = coef != 0
        self.pair_b = qp.b_in[self.pair_i] + qp.b_in[self.pair_j]
        self.pair_tol = 1e-12 * (1.0 + np.abs(qp.b_in[self.pair_i]) + np.abs(qp.b_in[self.pair_j]))

    def decouple(self, binary_idx):
        """Relax nodes by dropping general rows that touch an unfixed binary.

        Removing rows can only lower a node's bound, so branch and bound stays
        exact; leaves, where every binary is fixed, keep all their rows.
        """
        self.binary_idx = np.asarray(binary_idx, dtype=int)
        self.touch = self.qp.A_in[:, self.binary_idx] != 0

    def node(self, lb, ub, independent=True):
        """Constraint data (E, e, G, h, rows) for bounds ``lb <= x <= ub``."""
        z, x0 = self.Z, self.x0
        fixed_mask = lb == ub
        fixed = np.flatnonzero(fixed_mask)
        off = np.zeros(self.G.shape[0], dtype=bool)
        if self.touch is not None:
            free = ~fixed_mask[self.binary_idx]
            if free.any():
                off[:self.k_gen] = self.touch[:, free].any(axis=1)
        e_rows = [z[fixed]]
        e_rhs = [lb[fixed] - x0[fixed]]
        if self.pair_i.size:
            ok = ~(self.pair_supp & ~fixed_mask).any(axis=1)
            gap = self.pair_b - self.pair_coef @ np.where(fixed_mask, lb, 0.0)
            imp = ok & (np.abs(gap) <= self.pair_tol)
            ii = self.pair_i[imp]
            off[ii] = True
            off[self.pair_j[imp]] = True
            e_rows.append(self.G[ii])
            e_rhs.append(self.h_gen[ii])
        nu, nl = self.bounded_u.size, self.bounded_l.size
        h = np.concatenate([self.h_gen, ub[self.bounded_u] - x0[self.bounded_u],
                            -(lb[self.bounded_l] - x0[self.bounded_l])])
        # fixed variables are equality rows, not a pair of opposite bounds
        off[self.k_gen:self.k_gen + nu] |= fixed_mask[self.bounded_u]
        off[self.k_gen + nu:self.k_gen + nu + nl] |= fixed_mask[self.bounded_l]
        rows = np.flatnonzero(~off)
        E = np.vstack(e_rows)
        e = np.concatenate(e_rhs)
        if independent:
            E, e = _independent_eq(E, e)
        return E, e, self.G[rows], h[rows], rows

    def prepare_fast(self, binary_idx):
        """Factor H + rho*Zb'Zb once so nodes with pinned binaries are one solve.

        The added term vanishes whenever every binary is pinned by an equality
        row, so it changes no node solution. Not available if the factor is
        not positive definite.
        """
        bidx = np.asarray(binary_idx, dtype=int)
        self.fast_b = bidx
        self.fast = None
        if not bidx.size or not self.m:
            return
        qp = self.qp
        sep = ~(qp.Q[:, bidx] != 0).any(axis=0) & (qp.c[bidx] == 0) & ~(qp.A_eq[:, bidx] != 0).any(axis=0)
        self.separable_b = sep
        zb = self.Z[bidx]
        rho = 1.0
        hr = self.H + rho * zb.T @ zb
        try:
            cf = sla.cho_factor(hr, check_finite=False)
        except np.linalg.LinAlgError:
            return
        d = np.abs(np.diag(cf[0]))
        if d.min() ** 2 <= 1e-12 * d.max() ** 2:
            return
        self.fast = (sla.cho_solve(cf, np.eye(self.m), check_finite=False), rho, zb)

    def to_x(self, u):
        return self.x0 + self.Z @ u

    def to_u(self, x):
        return self.Z.T @ (np.asarray(x, dtype=float) - self.x0)


def _independent_eq(E, e):
    if E.shape[0] <= 1:
        return E, e
    _, r, piv = sla.qr(E.T, pivoting=True, mode="economic")
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > 1e-10 * max(diag[0], 1e-300)))
    if rank == E.shape[0]:
        return E, e
    keep = np.sort(piv[:rank])
    drop = np.setdiff1d(np.arange(E.shape[0]), keep)
    coef, *_ = np.linalg.lstsq(E[keep].T, E[drop].T, rcond=None)
    if np.max(np.abs(coef.T @ e[keep] - e[drop])) > 1e-9 * (1.0 + np.max(np.abs(e))):
        raise QPInfeasibleError("fixed variables contradict implied equalities")
    return E[keep], e[keep]


# ---------------------------------------------------------------------------
# active-set core


class _Core:
    """Primal active-set iterations on min 1/2 u'Hu + c'u, Eu = e, Gu <= h.

    Steps are computed in the null space of the working set; a reduced
    Hessian without full rank is handled by following a zero-curvature
    descent direction until a constraint blocks it.
    """

    def __init__(self, H, c, E, e, G, h, tol, max_iter):
        self.H, self.c, self.E, self.e, self.G, self.h = H, c, E, e, G, h
        self.tol = tol
        self.max_iter = max_iter
        self.iterations = 0
        self.row_norm = np.linalg.norm(G, axis=1) if G.size else np.zeros(G.shape[0])

    def step(self, A, b, u):
        """Newton step split into a correction back onto the working set and a
        null-space move; ``ray`` flags a zero-curvature descent direction."""
        H = self.H
        m = H.shape[0]
        k = A.shape[0]
        g = H @ u + self.c
        Y = Rk = None
        if k:
            qf, rf = sla.qr(A.T, check_finite=False)
            Rk = rf[:k]
            diag = np.abs(np.diag(Rk))
            if diag.min() <= 1e-11 * max(diag.max(), 1.0):
                raise SolverError("working set became linearly dependent")
            Y, N = qf[:, :k], qf[:, k:]
            py = Y @ sla.solve_triangular(Rk, b - A @ u, trans="T", check_finite=False)
        else:
            N = None
            py = np.zeros(m)
        g2 = g + H @ py
        if k == m:
            return py, np.zeros(m), False, Y, Rk, g2
        if N is None:
            R, r = H, g2
        else:
            hn = H @ N
            R, r = N.T @ hn, N.T @ g2
        delta = 1e-12 * max(1.0, np.max(np.diag(R), initial=0.0))
        Rd = R + delta * np.eye(R.shape[0])
        try:
            cf = sla.cho_factor(Rd, check_finite=False)
        except np.linalg.LinAlgError as exc:  # pragma: no cover
            raise SolverError("reduced Hessian factorisation failed") from exc
        d = -sla.cho_solve(cf, r, check_finite=False)
        for _ in range(2):
            d = d + sla.cho_solve(cf, -r - R @ d, check_finite=False)
        ray = np.max(np.abs(d), initial=0.0) > 1e7 * (1.0 + np.max(np.abs(u), initial=0.0))
        if ray:
            d = d / np.linalg.norm(d)
        return py, (d if N is None else N @ d), ray, Y, Rk, g2

    def run(self, u, W, stop=None):
        """Iterate from feasible ``u``; returns (u, W, lam_E, lam_W)."""
        E, e, G, h = self.E, self.e, self.G, self.h
        nE = E.shape[0]
        W = list(W)
        in_w = np.zeros(G.shape[0], dtype=bool)
        in_w[W] = True
        step_tol = 1e-11
        stalled = False
        for _ in range(self.max_iter):
            self.iterations += 1
            A = np.vstack([E, G[W]]) if W else E
            b = np.concatenate([e, h[W]]) if W else e
            py, p, ray, Y, Rk, g = self.step(A, b, u)
            u = u + py
            if not ray and np.max(np.abs(p), initial=0.0) <= step_tol * (1.0 + np.max(np.abs(u), initial=0.0)):
                if A.shape[0] == 0:
                    return u, W, np.zeros(0), np.zeros(0)
                lam = sla.solve_triangular(Rk, -(Y.T @ g), check_finite=False)
                lam_w = lam[nE:]
                if lam_w.size == 0 or np.min(lam_w) >= -self.tol:
                    return u, W, lam[:nE], lam_w
                if stalled:
                    # smallest-index rule breaks cycles on degenerate vertices
                    neg = [j for j in range(len(W)) if lam_w[j] < -self.tol]
                    drop = min(neg, key=lambda j: W[j])
                else:
                    drop = int(np.argmin(lam_w))
                in_w[W[drop]] = False
                del W[drop]
                continue
            gp = G @ p
            slack = h - G @ u
            cand = (gp > 1e-9 * self.row_norm * np.linalg.norm(p)) & ~in_w
            alpha, block = (np.inf if ray else 1.0), -1
            if np.any(cand):
                ratios = np.maximum(slack[cand], 0.0) / gp[cand]
                rmin = ratios.min()
                if rmin < alpha:
                    alpha = float(rmin)
                    # ties go to the smallest row index
                    block = int(np.flatnonzero(cand)[np.flatnonzero(ratios <= rmin * (1 + 1e-12))[0]])
            stalled = alpha == 0.0
            if block < 0 and ray:
                raise QPUnboundedError("objective is unbounded below")
            u = u + alpha * p
            if block >= 0:
                W.append(block)
                in_w[block] = True
            if stop is not None and stop(u):
                return u, W, None, None
        raise SolverError("active-set iteration limit reached")


def _independent_rows(E, G, cand):
    """Greedy subset of ``cand`` rows of G independent of each other and of E."""
    m = G.shape[1]
    basis = np.zeros((m, 0))
    if E.shape[0]:
        basis, _ = np.linalg.qr(E.T)
    keep = []
    for i in cand:
        g = G[i]
        r = g - basis @ (basis.T @ g)
        nr = np.linalg.norm(r)
        if nr > 1e-9 * max(np.linalg.norm(g), 1e-300) and basis.shape[1] < m:
            basis = np.column_stack([basis, r / nr])
            keep.append(int(i))
    return keep


def _eq_start(H, c, E, e, tol):
    """Minimiser of the equality-constrained QP, or a least-norm feasible point."""
    m = H.shape[0]
    core = _Core(H, c, E, e, np.zeros((0, m)), np.zeros(0), tol, 1)
    u_ln = np.linalg.lstsq(E, e, rcond=None)[0] if E.shape[0] else np.zeros(m)
    py, p, ray, *_ = core.step(E, e, u_ln)
    if ray or not np.all(np.isfinite(p)):
        return u_ln + py, False
    return u_ln + py + p, True


def _solve_node(red, lb, ub, tol, warm=None, max_iter=None):
    """Solve the reduced QP at given variable bounds.

    ``warm`` is ``(u, global_rows)`` from a related solve. Returns
    ``(x, objective, u, active_global_rows, iterations, kkt_residual)``.
    """
    if red.m == 0:
        # equalities pin x completely: only feasibility is left to check
        E, e, G, h, _ = red.node(lb, ub, independent=False)
        if np.any(np.abs(e) > FEAS_TOL * (1.0 + np.abs(e))) or np.any(-h > FEAS_TOL * (1.0 + np.abs(h))):
            raise QPInfeasibleError("the equality-determined point violates the constraints")
        x = red.to_x(np.zeros(0))
        return x, red.qp.objective(x), np.zeros(0), [], 0, 0.0
    if getattr(red, "fast", None) is not None:
        out = _fast_node(red, lb, ub)
        if out is not None:
            return out
    E, e, G, h, rows = red.node(lb, ub)
    H, c = red.H, red.c
    m = red.m
    if max_iter is None:
        max_iter = 50 * (m + G.shape[0] + 10)
    iters = 0
    at_min = False
    if warm is not None:
        u = warm[0].copy()
        pos = {int(r): k for k, r in enumerate(rows)}
        W0 = [pos[r] for r in warm[1] if r in pos]
    else:
        u, at_min = _eq_start(H, c, E, e, tol)
        iters += 1
        W0 = []
    ftol = FEAS_TOL * (1.0 + np.abs(h))
    viol_g = G @ u - h
    viol_e = E @ u - e
    feasible = np.all(viol_g <= ftol) and np.all(np.abs(viol_e) <= FEAS_TOL * (1.0 + np.abs(e)))
    if feasible and at_min:
        x = red.to_x(u)
        return x, red.qp.objective(x), u, [], iters, 0.0
    if not feasible:
        u, W0, it1 = _phase1(red, H, E, e, G, h, u, W0, tol, max_iter)
        iters += it1
    else:
        act = [i for i in W0 if abs(G[i] @ u - h[i]) <= 1e-8 * (1.0 + abs(h[i]))]
        W0 = act
    W0 = _independent_rows(E, G, W0)
    core = _Core(H, c, E, e, G, h, tol, max_iter)
    u, W, lam_e, lam_w = core.run(u, W0)
    iters += core.iterations
    grad = H @ u + c + E.T @ lam_e + (G[W].T @ lam_w if W else 0.0)
    kkt = float(np.max(np.abs(grad), initial=0.0))
    x = red.to_x(u)
    return x, red.qp.objective(x), u, [int(rows[i]) for i in W], iters, kkt


def _fast_node(red, lb, ub):
    """Single Schur-complement solve for a node whose binaries can all be pinned.

    Returns None when the shortcut does not apply or its answer violates an
    inequality; the caller then runs the general active-set path.
    """
    hinv, rho, zb = red.fast
    bidx = red.fast_b
    fixed = lb[bidx] == ub[bidx]
    free = ~fixed
    if free.any() and (red.touch is None or not red.separable_b[free].all()):
        return None
    E, e, G, h, rows = red.node(lb, ub, independent=False)
    v = lb[bidx]
    x0b = red.x0[bidx]
    if free.any():
        # separable free binaries touch nothing left in the node: pin them
        E = np.vstack([E, zb[free]])
        e = np.concatenate([e, v[free] - x0b[free]])
    c = red.c + rho * zb.T @ (x0b - v)
    he = hinv @ E.T
    S = E @ he
    hc = hinv @ c
    try:
        cf = sla.cho_factor(S, check_finite=False)
    except np.linalg.LinAlgError:
        return None
    d = np.abs(np.diag(cf[0]))
    if d.size and d.min() ** 2 <= 1e-13 * max(d.max() ** 2, 1e-300):
        return None
    lam = sla.cho_solve(cf, -e - E @ hc, check_finite=False)
    u = -hc - he @ lam
    if G.shape[0] and np.any(G @ u - h > FEAS_TOL * (1.0 + np.abs(h))):
        return None
    x = red.to_x(u)
    return x, red.qp.objective(x), u, [], 1, 0.0


def _phase1(red, H, E, e, G, h, u, W0, tol, max_iter):
    """Project ``u`` onto {Eu = e, Gu <= h} with a dual (Goldfarb-Idnani) method.

    The projection has an identity Hessian, so the dual method needs no
    feasible start; an empty feasible set shows up as a violated row that is
    a nonnegative combination of the active ones, which yields a Farkas
    certificate. Returns the feasible point and its active rows.
    """
    m = u.size
    nE = E.shape[0]
    x = u.copy()
    if nE:
        x = x - np.linalg.lstsq(E, E @ x - e, rcond=None)[0]
    act, lam = [], []
    iters = 0
    norms = np.linalg.norm(G, axis=1) if G.size else np.zeros(0)
    while True:
        viol = G @ x - h
        bad = viol > FEAS_TOL * (1.0 + np.abs(h))
        if not np.any(bad):
            return x, act, iters
        score = np.where(bad, viol / np.maximum(norms, 1e-300), -np.inf)
        p = int(np.argmax(score))
        lam_p = 0.0
        n_p = G[p]
        while True:
            iters += 1
            if iters > max_iter:
                raise SolverError("feasibility projection did not terminate")
            A = np.vstack([E, G[act]]) if act else E
            if A.shape[0]:
                Y, R = np.linalg.qr(A.T)
                yn = Y.T @ n_p
                z = -(n_p - Y @ yn)
                r_all = -sla.solve_triangular(R, yn, check_finite=False)
            else:
                z = -n_p.copy()
                r_all = np.zeros(0)
            r = r_all[nE:]
            t1, jb = np.inf, -1
            for j in np.flatnonzero(r < 0):
                tj = -lam[j] / r[j]
                if tj < t1:
                    t1, jb = tj, int(j)
            zn = float(n_p @ z)
            if -zn > 1e-12 * max(norms[p], 1e-300) ** 2:
                t2 = (n_p @ x - h[p]) / -zn
            else:
                t2 = np.inf
            if not np.isfinite(t1) and not np.isfinite(t2):
                y = np.zeros(G.shape[0])
                y[p] = 1.0
                y[act] = r
                mu = r_all[:nE]
                cert = {"y_in": y, "y_eq": mu, "value": float(h @ y + e @ mu),
                        "residual": float(np.max(np.abs(G.T @ y + E.T @ mu), initial=0.0))}
                raise QPInfeasibleError("no point satisfies the constraints", certificate=cert)
            t = min(t1, t2)
            if np.isfinite(t):
                x = x + t * z
                lam = [lv + t * rv for lv, rv in zip(lam, r)]
                lam_p += t
            if t2 <= t1:
                act.append(p)
                lam.append(lam_p)
                break
            del act[jb]
            del lam[jb]


def solve_qp(qp, tol=1e-8, x0=None):
    """Solve a convex QP; returns a :class:`QPResult` (unpacks as ``x, objective``)."""
    red = _Reduced(qp)
    warm = None
    if x0 is not None:
        warm = (red.to_u(x0), [])
    x, obj, u, active, iters, kkt = _solve_node(red, red.lb0, red.ub0, tol / red.obj_scale, warm)
    return QPResult(x, obj, kkt * red.obj_scale, iters, active)


def kkt_residual(qp, x, active_in=None):
    """Stationarity residual of ``x`` using least-squares multipliers.

    Multipliers are fitted on the equality rows plus the inequality and
    bound rows that are tight at ``x``.
    """
    rows = [qp.A_eq]
    tight = np.flatnonzero(np.abs(qp.A_in @ x - qp.b_in) <= 1e-7 * (1 + np.abs(qp.b_in))) if qp.b_in.size else []
    if len(tight):
        rows.append(qp.A_in[tight])
    at_ub = np.flatnonzero(np.isfinite(qp.ub) & (np.abs(x - qp.ub) <= 1e-9))
    at_lb = np.flatnonzero(np.isfinite(qp.lb) & (np.abs(x - qp.lb) <= 1e-9))
    eye = np.eye(qp.n)
    if at_ub.size:
        rows.append(eye[at_ub])
    if at_lb.size:
        rows.append(-eye[at_lb])
    A = np.vstack(rows)
    g = qp.Q @ x + qp.c
    if A.shape[0] == 0:
        return float(np.max(np.abs(g), initial=0.0))
    n_eq = qp.A_eq.shape[0]
    lam = _nnls_multipliers(A, -g, n_eq)
    return float(np.max(np.abs(g + A.T @ lam)))


def _nnls_multipliers(A, rhs, n_free):
    from scipy.optimize import lsq_linear

    lo = np.full(A.shape[0], 0.0)
    lo[:n_free] = -np.inf
    res = lsq_linear(A.T, rhs, bounds=(lo, np.full(A.shape[0], np.inf)), method="bvls", tol=1e-14)
    return res.x


# ---------------------------------------------------------------------------
# mixed-binary layer


def _leaf_bounds(red, bidx, bits):
    lb = red.lb0.copy()
    ub = red.ub0.copy()
    lb[list(bidx)] = bits
    ub[list(bidx)] = bits
    return lb, ub


def _pick_winner(cands, tie_tol):
    best = min(o for o, _, _ in cands)
    near = [c for c in cands if c[0] <= best + tie_tol]
    return min(near, key=lambda c: c[1])


def solve_miqp(p, strategy="branch_and_bound", tol=1e-8, tie_tol=1e-6, incumbent_hint=None,
               relaxation="continuous"):
    """Global optimum of a mixed-binary convex QP.

    ``incumbent_hint`` is an optional binary vector evaluated first; it only
    speeds up pruning and never changes the answer. ``relaxation`` picks the
    node bound: ``continuous`` relaxes binaries to [0, 1]; ``decoupled`` also
    drops the rows that couple unfixed binaries to the rest, which is weaker
    but turns big-M nodes into single equality-constrained solves.
    """
    if relaxation not in ("continuous", "decoupled"):
        raise ValidationError(f"unknown relaxation {relaxation!r}")
    t0 = time.perf_counter()
    bidx = p.binary_idx
    nb = len(bidx)
    lb_b = np.full(p.qp.n, -np.inf)
    ub_b = np.full(p.qp.n, np.inf)
    lb_b[list(bidx)] = 0.0
    ub_b[list(bidx)] = 1.0
    red = _Reduced(p.qp, lb_b, ub_b)
    if relaxation == "decoupled":
        red.decouple(bidx)
    red.prepare_fast(bidx)
    if np.any(red.lb0[list(bidx)] > 0) or np.any(red.ub0[list(bidx)] < 1):
        raise ValidationError("binary variables need bounds containing [0, 1]")
    rtol = tol / red.obj_scale
    stats = {"strategy": strategy, "relaxation": relaxation, "nodes": 0, "qp_solves": 0, "qp_iterations": 0}
    if nb == 0:
        x, obj, _, _, iters, _ = _solve_node(red, red.lb0, red.ub0, rtol)
        stats.update(nodes=1, qp_solves=1, qp_iterations=iters, wall_time=time.perf_counter() - t0)
        return MiqpSolution(x, obj, (), stats)
    if strategy == "enumerate":
        if nb > 30:
            raise ValidationError("enumeration is limited to 30 binaries")
        cands = []
        for bits in itertools.product((0, 1), repeat=nb):
            lb, ub = _leaf_bounds(red, bidx, bits)
            stats["nodes"] += 1
            stats["qp_solves"] += 1
            try:
                x, obj, _, _, iters, _ = _solve_node(red, lb, ub, rtol)
            except QPInfeasibleError:
                continue
            stats["qp_iterations"] += iters
            cands.append((obj, bits, x))
        stats["leaf_objectives"] = {c[1]: c[0] for c in cands}
    elif strategy in ("branch_and_bound", "bnb"):
        cands = _branch_and_bound(red, bidx, rtol, tie_tol, incumbent_hint, stats)
    else:
        raise ValidationError(f"unknown strategy {strategy!r}")
    if not cands:
        raise QPInfeasibleError("every binary assignment is infeasible")
    obj, bits, x = _pick_winner(cands, tie_tol)
    x = x.copy()
    x[list(bidx)] = bits
    stats["wall_time"] = time.perf_counter() - t0
    return MiqpSolution(x, obj, tuple(int(b) for b in bits), stats)


def _branch_and_bound(red, bidx, rtol, tie_tol, hint, stats):
    bidx = list(bidx)
    nb = len(bidx)
    cands = []
    best = [np.inf]

    def add_leaf(bits, warm=None):
        lb, ub = _leaf_bounds(red, bidx, bits)
        stats["qp_solves"] += 1
        try:
            x, obj, u, act, iters, _ = _solve_node(red, lb, ub, rtol, warm)
        except QPInfeasibleError:
            return
        stats["qp_iterations"] += iters
        if all(c[1] != bits for c in cands):
            cands.append((obj, bits, x))
        best[0] = min(best[0], obj)

    if hint is not None:
        add_leaf(tuple(int(v) for v in hint))

    counter = itertools.count()
    # node: (lb, ub, warm, parent_bound)
    stack = [(red.lb0.copy(), red.ub0.copy(), None, -np.inf)]
    heap = []
    seen_leaves = set(c[1] for c in cands)
    while stack or heap:
        if stack and not np.isfinite(best[0]):
            lb, ub, warm, pbound = stack.pop()
        else:
            if stack:
                for item in stack:
                    heapq.heappush(heap, (item[3], next(counter), item))
                stack = []
            _, _, (lb, ub, warm, pbound) = heapq.heappop(heap)
        if pbound > best[0] + tie_tol:
            continue
        stats["nodes"] += 1
        free = [j for j in range(nb) if lb[bidx[j]] != ub[bidx[j]]]
        if not free:
            bits = tuple(int(lb[bidx[j]]) for j in range(nb))
            if bits not in seen_leaves:
                seen_leaves.add(bits)
                add_leaf(bits, warm)
            continue
        stats["qp_solves"] += 1
        try:
            x, obj, u, act, iters, _ = _solve_node(red, lb, ub, rtol, warm)
        except QPInfeasibleError:
            continue
        stats["qp_iterations"] += iters
        if stats["nodes"] == 1:
            stats["root_bound"] = obj
        if obj > best[0] + tie_tol:
            continue
        vals = np.array([x[bidx[j]] for j in free])
        frac = np.abs(vals - np.round(vals))
        if np.all(frac <= 1e-9):
            bits = [int(lb[bidx[j]]) for j in range(nb)]
            for j, v in zip(free, vals):
                bits[j] = int(round(v))
            bits = tuple(bits)
            if bits not in seen_leaves:
                seen_leaves.add(bits)
                add_leaf(bits, (u, act))
            k = 0  # keep branching: a tie may hide below an integral node
        else:
            k = int(np.argmax(frac))
        j = free[k]
        v = vals[k]
        first = int(round(v)) if frac[k] > 1e-9 else int(round(v))
        children = []
        for side in (first, 1 - first):
            clb, cub = lb.copy(), ub.copy()
            clb[bidx[j]] = cub[bidx[j]] = side
            children.append((clb, cub, (u, act), obj))
        # DFS pops the last pushed: push the preferred child last
        for ch in reversed(children):
            if np.isfinite(best[0]):
                heapq.heappush(heap, (ch[3], next(counter), ch))
            else:
                stack.append(ch)
    return cands


# ---------------------------------------------------------------------------
# plain-text dump


def dump_problem(p, fh=None):
    """Write a mixed-binary QP as whitespace-separated triplets.

    Layout: ``n``/``binary``/``const`` header lines, then ``Q i j v``
    (upper triangle), ``c i v``, ``Aeq r j v``, ``beq r v``, ``Ain r j v``,
    ``bin r v``, ``lb j v`` and ``ub j v`` lines (zeros omitted).
    """
    qp = p.qp if isinstance(p, MixedBinaryQP) else p
    binary = p.binary_idx if isinstance(p, MixedBinaryQP) else ()
    out = io.StringIO()
    out.write(f"n {qp.n}\n")
    out.write("binary " + " ".join(str(i) for i in binary) + "\n")
    out.write(f"const {float(qp.const_term)!r}\n")
    out.write(f"rows {qp.b_eq.size} {qp.b_in.size}\n")
    for i, j in zip(*np.nonzero(np.triu(qp.Q))):
        out.write(f"Q {i} {j} {float(qp.Q[i, j])!r}\n")
    for j in np.flatnonzero(qp.c):
        out.write(f"c {j} {float(qp.c[j])!r}\n")
    for tag, a, b in (("eq", qp.A_eq, qp.b_eq), ("in", qp.A_in, qp.b_in)):
        for i, j in zip(*np.nonzero(a)):
            out.write(f"A{tag} {i} {j} {float(a[i, j])!r}\n")
        for i in np.flatnonzero(b):
            out.write(f"b{tag} {i} {float(b[i])!r}\n")
    for tag, v in (("lb", qp.lb), ("ub", qp.ub)):
        for j in np.flatnonzero(np.isfinite(v)):
            out.write(f"{tag} {j} {float(v[j])!r}\n")
    text = out.getvalue()
    if fh is not None:
        fh.write(text)
    return text


def load_problem(text):
    n = 0
    binary = ()
    const = 0.0
    m_eq = m_in = 0
    entries = []
    for line in text.splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "n":
            n = int(tok[1])
        elif tok[0] == "binary":
            binary = tuple(int(t) for t in tok[1:])
        elif tok[0] == "const":
            const = float(tok[1])
        elif tok[0] == "rows":
            m_eq, m_in = int(tok[1]), int(tok[2])
        else:
            entries.append(tok)
    Q = np.zeros((n, n))
    c = np.zeros(n)
    A_eq, b_eq = np.zeros((m_eq, n)), np.zeros(m_eq)
    A_in, b_in = np.zeros((m_in, n)), np.zeros(m_in)
    lb, ub = np.full(n, -np.inf), np.full(n, np.inf)
    for tok in entries:
        tag = tok[0]
        if tag == "Q":
            i, j, v = int(tok[1]), int(tok[2]), float(tok[3])
            Q[i, j] = Q[j, i] = v
        elif tag == "c":
            c[int(tok[1])] = float(tok[2])
        elif tag in ("Aeq", "Ain"):
            (A_eq if tag == "Aeq" else A_in)[int(tok[1]), int(tok[2])] = float(tok[3])
        elif tag in ("beq", "bin"):
            (b_eq if tag == "beq" else b_in)[int(tok[1])] = float(tok[2])
        elif tag in ("lb", "ub"):
            (lb if tag == "lb" else ub)[int(tok[1])] = float(tok[2])
        else:
            raise ValidationError(f"unknown record {tag!r}")
    qp = QuadraticProgram(Q, c, const, A_eq, b_eq, A_in, b_in, lb, ub)
    return MixedBinaryQP(qp, binary) if binary else qp
