"""Receding-horizon controllers.

Decision vector layout for every QP built here::

    z = (x(1), ..., x(T), u(0), ..., u(T-1)[, slack])

``x(0)`` is the measured (or predicted) initial state and is not a variable.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import qcore, qpsolver
from .dynamics import BilinearModel, LinearizedDynamics, linearize, step_truth
from .qcore import QuantumState
from .qpsolver import QPProblem, SolverOptions

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LineSearchConfig:
    c1: float = 1e-4
    beta: float = 0.5
    max_backtracks: int = 20
    merit_penalty: float = 1e3
    rollout: bool = True  # trial points are re-simulated through the model


@dataclass(frozen=True)
class SQPConfig:
    max_iters: int = 30
    convergence_tol: float = 1e-6
    merit_rtol: float = 1e-6  # also stop once the merit stops decreasing
    line_search: LineSearchConfig = field(default_factory=LineSearchConfig)


@dataclass(frozen=True, eq=False)
class MPCConfig:
    """Horizon, weights and constraints of one receding-horizon controller.

    Scalar bounds broadcast over all components. ``du_max=None`` disables
    slew rows; ``slew_interior=False`` keeps only the row against the
    previously applied control. With ``condensed`` (and no finite state
    bounds) SQP solves the state-eliminated dense QP instead of the sparse one.
    """

    horizon: int
    dt: float
    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray | None = None
    x_min: float | np.ndarray = -np.inf
    x_max: float | np.ndarray = np.inf
    u_min: float | np.ndarray = -np.inf
    u_max: float | np.ndarray = np.inf
    du_max: float | np.ndarray | None = None
    slew_interior: bool = True
    feedback_period: int = 1
    sqp: SQPConfig = field(default_factory=SQPConfig)
    qp: SolverOptions = field(default_factory=SolverOptions)
    soft_state_penalty: float = 1e4
    condensed: bool = True

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.feedback_period < 1:
            raise ValueError("feedback_period must be >= 1")
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        Qf = Q if self.Qf is None else np.atleast_2d(np.asarray(self.Qf, dtype=float))
        for name, w in (("Q", Q), ("R", R), ("Qf", Qf)):
            if w.shape[0] != w.shape[1] or not np.allclose(w, w.T):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(w).min() < -1e-12:
                raise ValueError(f"{name} must be PSD")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "Qf", Qf)
        if np.any(np.asarray(self.x_min) > np.asarray(self.x_max)):
            raise ValueError("x_min must not exceed x_max")
        if np.any(np.asarray(self.u_min) > np.asarray(self.u_max)):
            raise ValueError("u_min must not exceed u_max")
        if self.du_max is not None and np.any(np.asarray(self.du_max) < 0):
            raise ValueError("du_max must be non-negative")

    @property
    def n_x(self) -> int:
        return self.Q.shape[0]

    @property
    def m(self) -> int:
        return self.R.shape[0]

    def bounds(self):
        """Broadcast (x_min, x_max, u_min, u_max, du_max)."""
        bx = lambda v: np.broadcast_to(np.asarray(v, dtype=float), (self.n_x,))
        bu = lambda v: np.broadcast_to(np.asarray(v, dtype=float), (self.m,))
        du = None if self.du_max is None else bu(self.du_max)
        return bx(self.x_min), bx(self.x_max), bu(self.u_min), bu(self.u_max), du


@dataclass(frozen=True)
class ReferenceTrajectory:
    X_ref: np.ndarray  # (T+1, n_x)
    U_ref: np.ndarray  # (T, m)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X_ref, dtype=float))
        U = np.asarray(self.U_ref, dtype=float)
        if X.shape[0] == 1:
            U = U.reshape(0, U.shape[-1] if U.ndim == 2 else 1)
        else:
            U = U.reshape(X.shape[0] - 1, -1)
        object.__setattr__(self, "X_ref", X)
        object.__setattr__(self, "U_ref", U)

    @classmethod
    def setpoint(cls, x_target, horizon: int, m: int) -> "ReferenceTrajectory":
        x_target = np.asarray(x_target, dtype=float)
        return cls(np.tile(x_target, (horizon + 1, 1)), np.zeros((horizon, m)))

    @property
    def horizon(self) -> int:
        return self.U_ref.shape[0]


@dataclass(frozen=True)
class GuessTrajectory:
    X: np.ndarray  # (T+1, n_x)
    U: np.ndarray  # (T, m)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        U = np.asarray(self.U, dtype=float).reshape(X.shape[0] - 1, -1)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "U", U)

    @classmethod
    def initial(cls, x0, horizon: int, m: int, u0: float | np.ndarray = 0.0) -> "GuessTrajectory":
        U = np.broadcast_to(np.asarray(u0, dtype=float), (horizon, m)).copy()
        return cls(np.tile(np.asarray(x0, dtype=float), (horizon + 1, 1)), U)


@dataclass(frozen=True)
class LinearModel:
    """Time-invariant ``x+ = A x + B u``."""

    A: np.ndarray
    B: np.ndarray


def shift_warm_start(prev: GuessTrajectory) -> GuessTrajectory:
    """Drop the first entry of each sequence and duplicate the last."""
    X = np.concatenate([prev.X[1:], prev.X[-1:]], axis=0)
    U = np.concatenate([prev.U[1:], prev.U[-1:]], axis=0) if len(prev.U) else prev.U
    return GuessTrajectory(X, U)


# ---------------------------------------------------------------------------
# QP assembly
# ---------------------------------------------------------------------------

def _dynamics_terms(dyn, x0, T: int):
    """Per-step (A_t, B_t, c_t) with x(t+1) = A_t x(t) + B_t u(t) + c_t."""
    if isinstance(dyn, LinearizedDynamics):
        if dyn.horizon != T:
            raise ValueError("linearization horizon does not match reference")
        As, Bs = dyn.A, dyn.B
        Xg, Ug = dyn.X_guess, dyn.U_guess
        c = (
            Xg[1:]
            - np.einsum("tab,tb->ta", As, Xg[:-1])
            - np.einsum("taj,tj->ta", Bs, Ug)
            + dyn.r
        )
        return As, Bs, c
    if isinstance(dyn, LinearModel):
        A = np.asarray(dyn.A, dtype=float)
        B = np.asarray(dyn.B, dtype=float).reshape(A.shape[0], -1)
        return np.broadcast_to(A, (T,) + A.shape), np.broadcast_to(B, (T,) + B.shape), np.zeros((T, A.shape[0]))
    raise TypeError(f"unsupported dynamics {type(dyn).__name__}; linearize bilinear models first")


def build_qp(x0, dyn, ref: ReferenceTrajectory, cfg: MPCConfig, u_prev=None,
             *, soft_state: bool = False, du_scale: float = 1.0) -> QPProblem:
    T, n, m = ref.horizon, cfg.n_x, cfg.m
    if T != cfg.horizon:
        raise ValueError(f"reference horizon {T} does not match config horizon {cfg.horizon}")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != n:
        raise ValueError(f"x0 has length {x0.size}, expected {n}")
    x_lo, x_hi, u_lo, u_hi, du = cfg.bounds()
    As, Bs, c = _dynamics_terms(dyn, x0, T)
    if As.shape[1:] != (n, n) or Bs.shape[1:] != (n, m):
        raise ValueError("dynamics dimensions do not match the cost weights")

    nxv, nuv = T * n, T * m
    ix = lambda t: (t - 1) * n  # x(t), t >= 1
    iu = lambda t: nxv + t * m

    bounded = np.flatnonzero(np.isfinite(x_lo) | np.isfinite(x_hi))
    n_slack = T * bounded.size if soft_state else 0
    nz = nxv + nuv + n_slack

    # cost
    Pblocks = [2.0 * cfg.Q] * (T - 1) + [2.0 * cfg.Qf] + [2.0 * cfg.R] * T
    P = sp.block_diag(Pblocks, format="csc")
    q = np.zeros(nz)
    for t in range(1, T + 1):
        W = cfg.Qf if t == T else cfg.Q
        q[ix(t):ix(t) + n] = -2.0 * W @ ref.X_ref[t]
    for t in range(T):
        q[iu(t):iu(t) + m] = -2.0 * cfg.R @ ref.U_ref[t]
    if n_slack:
        w = cfg.soft_state_penalty
        P = sp.block_diag([P, 2.0 * w * sp.identity(n_slack)], format="csc")
        q[nxv + nuv:] = w

    rows, cols, vals, lo, hi = [], [], [], [], []
    r = 0

    def add_block(r0, c0, M):
        M = np.asarray(M)
        ii, jj = np.nonzero(M)
        rows.append(ii + r0)
        cols.append(jj + c0)
        vals.append(M[ii, jj])

    # dynamics equalities
    eye_n = np.eye(n)
    for t in range(T):
        add_block(r, ix(t + 1), eye_n)
        if t > 0:
            add_block(r, ix(t), -As[t])
        add_block(r, iu(t), -Bs[t])
        rhs = c[t] + (As[t] @ x0 if t == 0 else 0.0)
        lo.append(rhs)
        hi.append(rhs)
        r += n

    # control boxes
    if np.any(np.isfinite(u_lo) | np.isfinite(u_hi)):
        for t in range(T):
            add_block(r, iu(t), np.eye(m))
            lo.append(u_lo)
            hi.append(u_hi)
            r += m

    # slew rows
    if du is not None:
        d = du * du_scale
        if u_prev is not None:
            add_block(r, iu(0), np.eye(m))
            up = np.asarray(u_prev, dtype=float).reshape(m)
            lo.append(up - d)
            hi.append(up + d)
            r += m
        if cfg.slew_interior:
            for t in range(1, T):
                add_block(r, iu(t), np.eye(m))
                add_block(r, iu(t - 1), -np.eye(m))
                lo.append(-d)
                hi.append(d)
                r += m

    # state boxes
    if bounded.size:
        sel = np.zeros((bounded.size, n))
        sel[np.arange(bounded.size), bounded] = 1.0
        for t in range(1, T + 1):
            if soft_state:
                s0 = nxv + nuv + (t - 1) * bounded.size
                for sign, bound_lo, bound_hi in ((1.0, x_lo[bounded], np.full(bounded.size, np.inf)),
                                                 (-1.0, np.full(bounded.size, -np.inf), x_hi[bounded])):
                    add_block(r, ix(t), sel)
                    add_block(r, s0, sign * np.eye(bounded.size))
                    lo.append(bound_lo)
                    hi.append(bound_hi)
                    r += bounded.size
                add_block(r, s0, np.eye(bounded.size))
                lo.append(np.zeros(bounded.size))
                hi.append(np.full(bounded.size, np.inf))
                r += bounded.size
            else:
                add_block(r, ix(t), sel)
                lo.append(x_lo[bounded])
                hi.append(x_hi[bounded])
                r += bounded.size

    G = sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(r, nz)
    )
    return QPProblem(P, q, G, np.concatenate(lo), np.concatenate(hi))


def condense(x0, dyn, T: int):
    """Affine map ``X[1:] = S @ vec(U) + s`` obtained by eliminating the states.

    Returns ``S`` with shape ``(T, n, T*m)`` and ``s`` with shape ``(T, n)``.
    """
    As, Bs, c = _dynamics_terms(dyn, x0, T)
    n, m = Bs.shape[1], Bs.shape[2]
    S = np.zeros((T, n, T * m))
    s = np.zeros((T, n))
    Sprev, sprev = np.zeros((n, T * m)), np.asarray(x0, dtype=float)
    for t in range(T):
        St = As[t] @ Sprev
        St[:, t * m:(t + 1) * m] += Bs[t]
        s[t] = As[t] @ sprev + c[t]
        S[t] = St
        Sprev, sprev = St, s[t]
    return S, s


def build_condensed_qp(x0, dyn, ref: ReferenceTrajectory, cfg: MPCConfig, u_prev=None,
                       *, du_scale: float = 1.0):
    """Dense QP over the controls only; requires unbounded states.

    Same optimum as :func:`build_qp`. Returns ``(qp, S, s)`` so the state
    trajectory can be recovered with ``X[1:] = S @ vec(U) + s``.
    """
    T, n, m = ref.horizon, cfg.n_x, cfg.m
    x_lo, x_hi, u_lo, u_hi, du = cfg.bounds()
    if np.any(np.isfinite(x_lo) | np.isfinite(x_hi)):
        raise ValueError("condensed form does not support state bounds")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    S, s = condense(x0, dyn, T)
    W = np.broadcast_to(cfg.Q, (T, n, n)).copy()
    W[-1] = cfg.Qf
    WS = np.einsum("tab,tbi->tai", W, S)
    P = 2.0 * np.einsum("tai,taj->ij", S, WS) + 2.0 * np.kron(np.eye(T), cfg.R)
    P = 0.5 * (P + P.T)
    q = 2.0 * np.einsum("tai,ta->i", WS, s - ref.X_ref[1:]) - 2.0 * (ref.U_ref @ cfg.R).ravel()

    rows, lo, hi = [], [], []
    if np.any(np.isfinite(u_lo) | np.isfinite(u_hi)):
        rows.append(np.eye(T * m))
        lo.append(np.tile(u_lo, T))
        hi.append(np.tile(u_hi, T))
    if du is not None:
        d = du * du_scale
        if u_prev is not None:
            first = np.zeros((m, T * m))
            first[:, :m] = np.eye(m)
            up = np.asarray(u_prev, dtype=float).reshape(m)
            rows.append(first)
            lo.append(up - d)
            hi.append(up + d)
        if cfg.slew_interior and T > 1:
            D = np.kron(np.eye(T - 1, T, 1) - np.eye(T - 1, T), np.eye(m))
            rows.append(D)
            lo.append(np.tile(-d, T - 1))
            hi.append(np.tile(d, T - 1))
    if rows:
        G = np.vstack(rows)
        lo, hi = np.concatenate(lo), np.concatenate(hi)
    else:
        G, lo, hi = np.zeros((0, T * m)), np.zeros(0), np.zeros(0)
    return QPProblem(P, q, G, lo, hi), S, s


def unpack(z, x0, T: int, n: int, m: int):
    X = np.vstack([np.asarray(x0, dtype=float).reshape(1, n), z[: T * n].reshape(T, n)])
    U = z[T * n: T * n + T * m].reshape(T, m)
    return X, U


def pack(X, U) -> np.ndarray:
    return np.concatenate([np.asarray(X)[1:].ravel(), np.asarray(U).ravel()])


def trajectory_cost(X, U, ref: ReferenceTrajectory, cfg: MPCConfig) -> float:
    dx = np.asarray(X) - ref.X_ref
    du = np.asarray(U) - ref.U_ref
    stage = np.einsum("ta,ab,tb->", dx[:-1], cfg.Q, dx[:-1]) + np.einsum("ta,ab,tb->", du, cfg.R, du)
    return float(stage + dx[-1] @ cfg.Qf @ dx[-1])


# ---------------------------------------------------------------------------
# Linear MPC
# ---------------------------------------------------------------------------

@dataclass
class StepInfo:
    status: str
    iterations: int = 0
    flags: tuple = ()
    qp_iterations: int = 0
    alphas: tuple = ()
    merits: tuple = ()


def _solve_with_fallback(x0, dyn, ref, cfg, u_prev, warm=None, du_scale=1.0):
    qp = build_qp(x0, dyn, ref, cfg, u_prev, du_scale=du_scale)
    sol = qpsolver.solve(qp, cfg.qp, warm_start=warm)
    flags = []
    if sol.status == qpsolver.INFEASIBLE:
        log.debug("QP infeasible; retrying with softened state bounds")
        flags.append("soft_state_bounds")
        qp = build_qp(x0, dyn, ref, cfg, u_prev, soft_state=True, du_scale=du_scale)
        sol = qpsolver.solve(qp, cfg.qp)
    return sol, flags


def solve_linear_mpc_step(x0, model, ref: ReferenceTrajectory, cfg: MPCConfig, u_prev=None):
    """One open-loop QP over the horizon for a linear model or a linearization.

    Returns ``(X_opt, U_opt, info)``; ``X_opt[0]`` is ``x0``.
    """
    T, n, m = cfg.horizon, cfg.n_x, cfg.m
    sol, flags = _solve_with_fallback(x0, model, ref, cfg, u_prev)
    if sol.status == qpsolver.INFEASIBLE:
        flags.append("hold_previous_control")
        up = np.zeros(m) if u_prev is None else np.asarray(u_prev, dtype=float)
        U = np.tile(up, (T, 1))
        As, Bs, c = _dynamics_terms(model, x0, T)
        X = np.empty((T + 1, n))
        X[0] = x0
        for t in range(T):
            X[t + 1] = As[t] @ X[t] + Bs[t] @ U[t] + c[t]
        return X, U, StepInfo(sol.status, 1, tuple(flags), sol.iterations)
    X, U = unpack(sol.z, x0, T, n, m)
    return X, U, StepInfo(sol.status, 1, tuple(flags), sol.iterations)


# ---------------------------------------------------------------------------
# SQP
# ---------------------------------------------------------------------------

def _rollout_residual(model: BilinearModel, x0, X, U) -> float:
    f = np.einsum("tab,tb->ta", model.A[None] + np.einsum("tj,jab->tab", U, model.N), X[:-1])
    return float(np.abs(X[1:] - f).sum() + np.abs(X[0] - x0).sum())


@dataclass
class SQPResult:
    X: np.ndarray
    U: np.ndarray
    iterations: int
    converged: bool
    flags: tuple = ()
    alphas: tuple = ()
    merits: tuple = ()
    qp_iterations: int = 0
    qp_solution: object = field(default=None, repr=False)


def sqp_solve(x0, model: BilinearModel, ref: ReferenceTrajectory, cfg: MPCConfig,
              guess: GuessTrajectory, u_prev=None, *, max_iters: int | None = None,
              fixed_alpha: float | None = None, warm_qp=None) -> SQPResult:
    """Sequential quadratic programming on the bilinear model.

    Each iteration linearizes about the guess, solves the QP and moves the
    guess by a backtracking (Armijo) step on an L1 merit function. With
    ``fixed_alpha`` the line search is skipped.
    """
    T, n, m = cfg.horizon, cfg.n_x, cfg.m
    if guess.X.shape != (T + 1, n) or guess.U.shape != (T, m):
        raise ValueError("guess does not match the horizon")
    x0 = np.asarray(x0, dtype=float)
    ls = cfg.sqp.line_search
    mu = ls.merit_penalty
    x_lo, x_hi = cfg.bounds()[:2]
    condensed = cfg.condensed and not np.any(np.isfinite(x_lo) | np.isfinite(x_hi))
    max_iters = cfg.sqp.max_iters if max_iters is None else max_iters

    def merit(X, U):
        return trajectory_cost(X, U, ref, cfg) + mu * _rollout_residual(model, x0, X, U)

    X, U = guess.X.copy(), guess.U.copy()
    phi = merit(X, U)
    merits, alphas, flags = [phi], [], []
    converged = False
    du_scale = 1.0
    qp_iters = 0
    sol = None
    warm = warm_qp
    for _ in range(max_iters):
        lin = linearize(model, X, U)
        if condensed:
            qp, S, s = build_condensed_qp(x0, lin, ref, cfg, u_prev, du_scale=du_scale)
            sol, fl = qpsolver.solve(qp, cfg.qp, warm_start=warm), []
            if sol.status != qpsolver.INFEASIBLE:
                sol.z = np.concatenate([(np.einsum("tai,i->ta", S, sol.z) + s).ravel(), sol.z])
        else:
            sol, fl = _solve_with_fallback(x0, lin, ref, cfg, u_prev, warm, du_scale)
        flags.extend(fl)
        qp_iters += sol.iterations
        if sol.status == qpsolver.INFEASIBLE:
            du_scale *= 0.5
            flags.append("shrink_du")
            if du_scale < 1e-3:
                flags.append("qp_infeasible")
                break
            continue
        if sol.status != qpsolver.SOLVED:
            flags.append(f"qp_{sol.status}")
        warm = (sol.z[T * n:] if condensed else sol.z, sol.y)
        Xq, Uq = unpack(sol.z, x0, T, n, m)
        dX, dU = Xq - X, Uq - U
        step = max(np.abs(dX).max(initial=0.0), np.abs(dU).max(initial=0.0))
        if step <= cfg.sqp.convergence_tol:
            converged = True
            break

        if fixed_alpha is not None:
            alpha = fixed_alpha
            X, U = X + alpha * dX, U + alpha * dU
            phi = merit(X, U)
        else:
            grad_x = 2.0 * np.einsum("ab,tb->ta", cfg.Q, X[:-1] - ref.X_ref[:-1])
            grad_xT = 2.0 * cfg.Qf @ (X[-1] - ref.X_ref[-1])
            grad_u = 2.0 * np.einsum("ab,tb->ta", cfg.R, U - ref.U_ref)
            dcost = float(np.sum(grad_x * dX[:-1]) + grad_xT @ dX[-1] + np.sum(grad_u * dU))
            slope = dcost - mu * _rollout_residual(model, x0, X, U)
            alpha = 1.0
            accepted = False
            for _ in range(ls.max_backtracks + 1):
                Ua = U + alpha * dU
                Xa = model.rollout(x0, Ua) if ls.rollout else X + alpha * dX
                phi_a = merit(Xa, Ua)
                if slope < 0:
                    ok = phi_a <= phi + ls.c1 * alpha * slope
                else:
                    ok = phi_a < phi
                if ok:
                    accepted = True
                    break
                alpha *= ls.beta
            if not accepted:
                flags.append("line_search_failed")
                converged = step <= cfg.sqp.convergence_tol
                break
            X, U, phi = Xa, Ua, phi_a
        alphas.append(alpha)
        merits.append(phi)
        stalled = fixed_alpha is None and merits[-2] - phi <= cfg.sqp.merit_rtol * max(1.0, abs(phi))
        if alpha * step <= cfg.sqp.convergence_tol or stalled:
            converged = True
            break
    # iterations counts accepted steps; a confirming zero-step QP is not one
    return SQPResult(X, U, len(alphas), converged, tuple(flags), tuple(alphas), tuple(merits), qp_iters, sol)


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------

def reduced_feedback_adapter(plant_state, partition) -> np.ndarray:
    """Concatenate the embedded reduced states of both subsystems."""
    rho = plant_state.rho if isinstance(plant_state, QuantumState) else qcore.as_matrix(plant_state)
    da, db = partition
    if rho.shape[0] != da * db:
        raise ValueError(f"partition {partition} does not match plant dimension {rho.shape[0]}")
    ra = qcore.partial_trace(rho, (da, db), keep="A")
    rb = qcore.partial_trace(rho, (da, db), keep="B")
    return np.concatenate([qcore.state_to_x(ra), qcore.state_to_x(rb)])


def subspace_feedback_adapter(plant_state, levels: int, normalize: bool = True) -> np.ndarray:
    """Embedded top-left ``levels x levels`` block.

    With ``normalize`` the block is rescaled to unit trace so that it is a
    valid state of the reduced model; population outside the block is then
    invisible to the controller.
    """
    rho = plant_state.rho if isinstance(plant_state, QuantumState) else qcore.as_matrix(plant_state)
    if levels < 1 or levels > rho.shape[0]:
        raise ValueError(f"levels must lie in [1, {rho.shape[0]}]")
    block = rho[:levels, :levels]
    if normalize:
        tr = np.real(np.trace(block))
        if tr <= 0:
            raise ValueError("subspace block has no population")
        block = block / tr
    return qcore.state_to_x(block)


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    states: np.ndarray  # plant states, embedded
    controls: np.ndarray
    infidelity: np.ndarray
    feedback: np.ndarray  # bool per control step: was x0 measured
    sqp_iterations: np.ndarray
    flags: list
    predictions: list = field(default_factory=list, repr=False)
    label: str = ""

    @property
    def final_infidelity(self) -> float:
        return float(self.infidelity[-1])

    def infidelity_at(self, t_ns: float) -> float:
        k = int(np.argmin(np.abs(self.times - t_ns)))
        return float(self.infidelity[k])


def _plant_step(plant, state, u, dt):
    if isinstance(plant, BilinearModel):
        return plant.step(state, u)
    return step_truth(plant, state, u, dt)


def _default_observe(state):
    return state.x if isinstance(state, QuantumState) else np.asarray(state, dtype=float)


def _plant_rho(state):
    return state.rho if isinstance(state, QuantumState) else qcore.x_to_state(state)


def run_closed_loop(plant, model: BilinearModel, rho0, ref: ReferenceTrajectory, cfg: MPCConfig,
                    total_steps: int, *, observe: Callable | None = None, target=None,
                    u_prev=None, sqp_mode: str = "warm", initial_guess: GuessTrajectory | None = None,
                    initial_u_guess: float | np.ndarray = 0.0, keep_predictions: bool = False,
                    label: str = "mpc") -> TrajectoryRecord:
    """Alternate MPC decisions with plant propagation.

    ``plant`` is either a ``Liouvillian`` (exact propagation) or a
    ``BilinearModel`` (stepped like the controller's model). Every
    ``cfg.feedback_period`` steps ``x0`` is read from the plant through
    ``observe``; in between it is the model's one-step prediction.

    ``sqp_mode``: ``"warm"`` runs full SQP at step 0 and one ``alpha = 1``
    iteration from the shifted guess afterwards; ``"full_at_feedback"`` runs
    full SQP at every measured step.
    """
    if sqp_mode not in ("warm", "full_at_feedback", "full"):
        raise ValueError(f"unknown sqp_mode {sqp_mode!r}")
    observe = observe or _default_observe
    if isinstance(plant, BilinearModel):
        state = rho0.x if isinstance(rho0, QuantumState) else np.asarray(rho0, dtype=float)
    else:
        state = rho0 if isinstance(rho0, QuantumState) else QuantumState(rho0)
    x_first = observe(state)
    if x_first.size != model.n_x:
        raise ValueError(f"observed state length {x_first.size} does not match model n_x {model.n_x}")
    if target is None:
        target = qcore.x_to_state(ref.X_ref[-1])
    target = _plant_rho(target) if not isinstance(target, np.ndarray) else target

    T, m = cfg.horizon, model.m
    x_lo, x_hi, u_lo, u_hi, du = cfg.bounds()
    u_last = np.zeros(m) if u_prev is None else np.asarray(u_prev, dtype=float).reshape(m)

    states = [state]
    controls, fb, iters, flags, preds = [], [], [], [], []
    guess = initial_guess
    x0 = x_first
    for k in range(total_steps):
        measured = k % cfg.feedback_period == 0
        if measured:
            x0 = observe(state) if k else x_first
        else:
            x0 = model.step(x0, u_last)
        if guess is None:
            guess = GuessTrajectory.initial(x0, T, m, initial_u_guess)
        full = k == 0 or sqp_mode == "full" or (sqp_mode == "full_at_feedback" and measured)
        if full:
            if k:
                # start full SQP from a dynamically consistent guess
                guess = GuessTrajectory(model.rollout(x0, guess.U), guess.U)
            res = sqp_solve(x0, model, ref, cfg, guess, u_last)
        else:
            res = sqp_solve(x0, model, ref, cfg, guess, u_last, max_iters=1, fixed_alpha=1.0)
        u = res.U[0].copy()
        step_flags = list(res.flags)
        lo, hi = u_lo.copy(), u_hi.copy()
        if du is not None:
            lo, hi = np.maximum(lo, u_last - du), np.minimum(hi, u_last + du)
        u_clipped = np.clip(u, lo, hi)
        if np.max(np.abs(u_clipped - u), initial=0.0) > 1e-6:
            step_flags.append("control_clipped")
        u = u_clipped
        if keep_predictions:
            preds.append((res.X.copy(), res.U.copy()))
        state = _plant_step(plant, state, u, cfg.dt)
        states.append(state)
        controls.append(u)
        fb.append(measured)
        iters.append(res.iterations)
        flags.append(tuple(step_flags))
        u_last = u
        guess = shift_warm_start(GuessTrajectory(res.X, res.U))

    times = cfg.dt * np.arange(total_steps + 1)
    xs = np.array([_default_observe(s) for s in states])
    infid = np.array([qcore.infidelity(_plant_rho(s), target) for s in states])
    return TrajectoryRecord(times, xs, np.array(controls).reshape(total_steps, m), infid,
                            np.array(fb, dtype=bool), np.array(iters, dtype=int), flags, preds, label)


def open_loop_record(plant, rho0, U, dt: float, target, label: str = "open_loop") -> TrajectoryRecord:
    """Apply a fixed control sequence to the plant and log it like a closed loop."""
    U = np.asarray(U, dtype=float)
    U = U.reshape(len(U), -1) if U.size else U.reshape(0, 1)
    state = rho0 if isinstance(rho0, QuantumState) or isinstance(plant, BilinearModel) else QuantumState(rho0)
    states = [state]
    for u in U:
        state = _plant_step(plant, state, u, dt)
        states.append(state)
    target = _plant_rho(target) if not isinstance(target, np.ndarray) else target
    xs = np.array([_default_observe(s) for s in states])
    infid = np.array([qcore.infidelity(_plant_rho(s), target) for s in states])
    n = len(U)
    return TrajectoryRecord(dt * np.arange(n + 1), xs, U, infid, np.zeros(n, dtype=bool),
                            np.zeros(n, dtype=int), [()] * n, [], label)
