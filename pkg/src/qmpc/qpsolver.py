"""Operator-splitting (ADMM) solver for convex quadratic programs

    minimize    0.5 z'Pz + q'z
    subject to  l <= G z <= u

Equality rows are encoded with ``l == u``. ``P`` and ``G`` may be scipy sparse
matrices or dense arrays; small dense problems (e.g. condensed MPC QPs) skip
the sparse overhead entirely. The iteration follows the OSQP
splitting: every iteration solves one linear system with a matrix that only
changes when the penalty is rescaled, so it is factorized once and reused.
After the active set settles a polishing step solves the reduced KKT system
directly, which usually removes the long ADMM tail.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse as sp
import scipy.sparse.linalg as spla

SOLVED = "solved"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"

_RHO_MIN = 1e-6
_RHO_MAX = 1e6
_EQ_SCALE = 1e3


def _abs_max(M) -> float:
    if sp.issparse(M):
        return float(abs(M).max()) if M.nnz else 0.0
    return float(np.max(np.abs(M), initial=0.0))


@dataclass(frozen=True, eq=False)
class QPProblem:
    P: sp.csc_matrix | np.ndarray
    q: np.ndarray
    G: sp.csc_matrix | np.ndarray
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        if sp.issparse(self.P) or sp.issparse(self.G):
            P = sp.csc_matrix(self.P, dtype=float)
            G = sp.csc_matrix(self.G, dtype=float)
        else:
            P = np.atleast_2d(np.asarray(self.P, dtype=float))
            G = np.asarray(self.G, dtype=float).reshape(-1, P.shape[1])
        q = np.asarray(self.q, dtype=float).reshape(-1)
        lo = np.asarray(self.l, dtype=float).reshape(-1)
        hi = np.asarray(self.u, dtype=float).reshape(-1)
        n = q.size
        if P.shape != (n, n):
            raise ValueError(f"P has shape {P.shape}, expected {(n, n)}")
        if G.shape[1] != n or lo.size != G.shape[0] or hi.size != G.shape[0]:
            raise ValueError("constraint dimensions are inconsistent")
        asym = _abs_max(P - P.T)
        if asym > 1e-12 * max(1.0, _abs_max(P)):
            raise ValueError("P must be symmetric")
        if np.any(lo > hi):
            raise ValueError("l must not exceed u")
        for name, val in (("P", P), ("q", q), ("G", G), ("l", lo), ("u", hi)):
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def dense(self) -> bool:
        return not sp.issparse(self.P)

    @property
    def m(self) -> int:
        return self.l.size

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ (self.P @ z) + self.q @ z)


@dataclass
class QPSolution:
    z: np.ndarray
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    y: np.ndarray = field(repr=False, default=None)
    objective: float = np.nan
    polished: bool = False


@dataclass(frozen=True)
class SolverOptions:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    eps_pinf: float = 1e-7
    max_iter: int = 4000
    check_every: int = 10
    adaptive_rho: bool = True
    adaptive_rho_tolerance: float = 5.0
    polish: bool = True
    polish_trigger: float = 1e-3
    polish_delta: float = 1e-9
    polish_refine_iter: int = 5


@dataclass
class KKTReport:
    stationarity: float
    primal_feasibility: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.primal_feasibility, self.complementarity)


def _rho_vector(qp: QPProblem, rho: float) -> np.ndarray:
    r = np.full(qp.m, rho)
    free = np.isinf(qp.l) & np.isinf(qp.u)
    eq = qp.u - qp.l <= 1e-12 * np.maximum(1.0, np.abs(qp.l))
    r[free] = _RHO_MIN
    r[eq] = min(_EQ_SCALE * rho, _RHO_MAX)
    return r


class _Reduced:
    """Factorization of ``P + sigma I + G' diag(rho) G``."""

    def __init__(self, qp: QPProblem, sigma: float, rho_vec: np.ndarray):
        self.dense = qp.dense
        if self.dense:
            mat = qp.P + sigma * np.eye(qp.n) + (qp.G.T * rho_vec) @ qp.G
            self.cho = scipy.linalg.cho_factor(mat)
        else:
            mat = qp.P + sigma * sp.identity(qp.n, format="csc") + qp.G.T @ sp.diags(rho_vec) @ qp.G
            self.lu = spla.splu(sp.csc_matrix(mat), permc_spec="COLAMD")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.dense:
            return scipy.linalg.cho_solve(self.cho, rhs, check_finite=False)
        return self.lu.solve(rhs)


def _norm_inf(v) -> float:
    return float(np.max(np.abs(v), initial=0.0))


def _residuals(qp, x, z, y, Px, Gx, Gty):
    r_prim = _norm_inf(Gx - z)
    r_dual = _norm_inf(Px + qp.q + Gty)
    return r_prim, r_dual


def _tolerances(qp, opts, Px, Gx, z, Gty):
    eps_p = opts.eps_abs + opts.eps_rel * max(_norm_inf(Gx), _norm_inf(z))
    eps_d = opts.eps_abs + opts.eps_rel * max(_norm_inf(Px), _norm_inf(Gty), _norm_inf(qp.q))
    return eps_p, eps_d


def _primal_infeasible(qp: QPProblem, dy: np.ndarray, eps: float) -> bool:
    ndy = _norm_inf(dy)
    if ndy <= 1e-12:
        return False
    if _norm_inf(qp.G.T @ dy) > eps * ndy:
        return False
    pos, neg = np.maximum(dy, 0.0), np.minimum(dy, 0.0)
    if np.any((pos > 0) & np.isinf(qp.u)) or np.any((neg < 0) & np.isinf(qp.l)):
        return False
    ub = np.where(np.isinf(qp.u), 0.0, qp.u)
    lb = np.where(np.isinf(qp.l), 0.0, qp.l)
    return float(ub @ pos + lb @ neg) < -eps * ndy


def _polish(qp: QPProblem, x, z, y, opts: SolverOptions):
    """Solve the equality-constrained problem on the guessed active set."""
    lower = (z - qp.l) < -y
    upper = (qp.u - z) < y
    active = lower | upper
    idx = np.flatnonzero(active)
    b = np.where(lower[idx], qp.l[idx], qp.u[idx])
    Ga = qp.G[idx]
    na = idx.size
    delta = opts.polish_delta
    rhs = np.concatenate([-qp.q, b])
    if qp.dense:
        K = np.block([[qp.P, Ga.T], [Ga, np.zeros((na, na))]])
        Kreg = K + np.diag(np.concatenate([np.full(qp.n, delta), np.full(na, -delta)]))
        lu = scipy.linalg.lu_factor(Kreg)
        if not np.all(np.isfinite(lu[0])):
            return None
        sol = scipy.linalg.lu_solve(lu, rhs)
        for _ in range(opts.polish_refine_iter):
            sol = sol + scipy.linalg.lu_solve(lu, rhs - K @ sol)
        if not np.all(np.isfinite(sol)):
            return None
        yp = np.zeros(qp.m)
        yp[idx] = sol[qp.n:]
        return sol[: qp.n], yp
    K = sp.bmat([[qp.P, Ga.T], [Ga, None]], format="csc")
    Kreg = sp.bmat(
        [[qp.P + delta * sp.identity(qp.n), Ga.T], [Ga, -delta * sp.identity(na)]], format="csc"
    ) if na else qp.P + delta * sp.identity(qp.n, format="csc")
    try:
        lu = spla.splu(sp.csc_matrix(Kreg))
    except RuntimeError:
        return None
    sol = lu.solve(rhs)
    Kfull = K if na else sp.csc_matrix(qp.P)
    for _ in range(opts.polish_refine_iter):
        sol = sol + lu.solve(rhs - Kfull @ sol)
    if not np.all(np.isfinite(sol)):
        return None
    xp = sol[: qp.n]
    yp = np.zeros(qp.m)
    yp[idx] = sol[qp.n:]
    return xp, yp


def _try_polish(qp: QPProblem, x, z, y, opts: SolverOptions, GT, k: int) -> QPSolution | None:
    """Polished solution if it meets the tolerances with sign-consistent multipliers."""
    pol = _polish(qp, x, z, y, opts)
    if pol is None:
        return None
    xp, yp = pol
    Pxp, Gxp, Gtyp = qp.P @ xp, qp.G @ xp, GT @ yp
    zp = np.clip(Gxp, qp.l, qp.u)
    rp, rd = _residuals(qp, xp, zp, yp, Pxp, Gxp, Gtyp)
    ep, ed = _tolerances(qp, opts, Pxp, Gxp, zp, Gtyp)
    # y < 0 only at an active lower bound, y > 0 only at an active upper bound
    sign_ok = np.all(yp[(zp - qp.l) > ep] >= -ed) and np.all(yp[(qp.u - zp) > ep] <= ed)
    if rp <= ep and rd <= ed and sign_ok:
        return QPSolution(xp, SOLVED, k, rp, rd, yp, qp.objective(xp), True)
    return None


def solve(qp: QPProblem, opts: SolverOptions | None = None, warm_start=None) -> QPSolution:
    """Solve ``qp`` by ADMM.

    ``warm_start`` may be a primal vector or a ``(z, y)`` pair. On ``max_iter``
    the last iterate is returned.
    """
    opts = opts or SolverOptions()
    n, m = qp.n, qp.m
    x = np.zeros(n)
    y = np.zeros(m)
    if warm_start is not None:
        if isinstance(warm_start, tuple):
            x = np.asarray(warm_start[0], dtype=float).copy()
            if warm_start[1] is not None:
                y = np.asarray(warm_start[1], dtype=float).copy()
        else:
            x = np.asarray(warm_start, dtype=float).copy()
        if x.size != n or y.size != m:
            raise ValueError("warm start has wrong dimensions")
    z = np.clip(qp.G @ x, qp.l, qp.u)

    rho = opts.rho
    rho_vec = _rho_vector(qp, rho)
    fact = _Reduced(qp, opts.sigma, rho_vec)
    GT = np.ascontiguousarray(qp.G.T) if qp.dense else sp.csc_matrix(qp.G.T)
    alpha, sigma = opts.alpha, opts.sigma

    status = MAX_ITER
    r_prim = r_dual = np.inf
    last_active = None
    k = 0
    for k in range(1, opts.max_iter + 1):
        y_prev = y
        rhs = sigma * x - qp.q + GT @ (rho_vec * z - y)
        x_t = fact.solve(rhs)
        z_t = qp.G @ x_t
        x = alpha * x_t + (1.0 - alpha) * x
        z_relax = alpha * z_t + (1.0 - alpha) * z
        z_new = np.clip(z_relax + y / rho_vec, qp.l, qp.u)
        y = y + rho_vec * (z_relax - z_new)
        z = z_new

        if k % opts.check_every and k != opts.max_iter:
            continue
        Px, Gx, Gty = qp.P @ x, qp.G @ x, GT @ y
        r_prim, r_dual = _residuals(qp, x, z, y, Px, Gx, Gty)
        eps_p, eps_d = _tolerances(qp, opts, Px, Gx, z, Gty)
        if r_prim <= eps_p and r_dual <= eps_d:
            status = SOLVED
            break
        if _primal_infeasible(qp, y - y_prev, opts.eps_pinf):
            status = INFEASIBLE
            break
        if opts.polish and max(r_prim, r_dual) < opts.polish_trigger:
            active = ((z - qp.l) < -y) | ((qp.u - z) < y)
            if last_active is None or not np.array_equal(active, last_active):
                last_active = active
                polished = _try_polish(qp, x, z, y, opts, GT, k)
                if polished is not None:
                    return polished
        if opts.adaptive_rho:
            num = r_prim / max(_norm_inf(Gx), _norm_inf(z), 1e-10)
            den = r_dual / max(_norm_inf(Px), _norm_inf(Gty), _norm_inf(qp.q), 1e-10)
            ratio = np.sqrt(num / max(den, 1e-30))
            if ratio > opts.adaptive_rho_tolerance or ratio < 1.0 / opts.adaptive_rho_tolerance:
                new_rho = float(np.clip(rho * ratio, _RHO_MIN, _RHO_MAX))
                if new_rho != rho:
                    rho = new_rho
                    rho_vec = _rho_vector(qp, rho)
                    fact = _Reduced(qp, sigma, rho_vec)

    if status == SOLVED and opts.polish and m:
        # converged before the in-loop polish ran: snap onto the active set
        active = ((z - qp.l) < -y) | ((qp.u - z) < y)
        if last_active is None or not np.array_equal(active, last_active):
            polished = _try_polish(qp, x, z, y, opts, GT, k)
            if polished is not None:
                return polished
    return QPSolution(x, status, k, r_prim, r_dual, y, qp.objective(x), False)


def kkt_check(qp: QPProblem, z, y=None, active_tol: float = 1e-6) -> KKTReport:
    """Stationarity, primal feasibility and complementarity residuals at ``z``.

    Without multipliers, the best sign-consistent multipliers for the active
    constraints are estimated by bounded least squares.
    """
    z = np.asarray(z, dtype=float)
    Gz = qp.G @ z
    feas = _norm_inf(Gz - np.clip(Gz, qp.l, qp.u))
    grad = qp.P @ z + qp.q
    if y is None:
        scale = np.maximum(1.0, np.abs(Gz))
        at_l = np.abs(Gz - qp.l) <= active_tol * scale
        at_u = np.abs(qp.u - Gz) <= active_tol * scale
        idx = np.flatnonzero(at_l | at_u)
        y = np.zeros(qp.m)
        if idx.size:
            # lower-active multipliers are <= 0, upper-active >= 0, equalities free
            lo = np.where(at_u[idx], 0.0, -np.inf)
            hi = np.where(at_l[idx], 0.0, np.inf)
            both = at_l[idx] & at_u[idx]
            lo[both], hi[both] = -np.inf, np.inf
            Ga = qp.G[idx]
            GaT = Ga.T if qp.dense else Ga.T.toarray()
            res = scipy.optimize.lsq_linear(GaT, -grad, bounds=(lo, hi), method="bvls")
            y[idx] = res.x
    y = np.asarray(y, dtype=float)
    stat = _norm_inf(grad + qp.G.T @ y)
    slack_l = np.where(np.isinf(qp.l), np.inf, Gz - qp.l)
    slack_u = np.where(np.isinf(qp.u), np.inf, qp.u - Gz)
    comp_terms = np.concatenate([
        np.where(y < 0, -y * np.minimum(slack_l, 1e300), 0.0),
        np.where(y > 0, y * np.minimum(slack_u, 1e300), 0.0),
    ])
    return KKTReport(stat, feas, _norm_inf(comp_terms))
