"""Comparison controllers: area-pi pulses, Gaussian/DRAG pulses, Nelder-Mead
calibration and open-loop optimal pulses.

Every pulse generator reports clipping against amplitude and slew bounds
instead of silently altering the shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.optimize
import scipy.sparse as sp

from . import qpsolver
from .dynamics import BilinearModel
from .mpc import GuessTrajectory, MPCConfig, ReferenceTrajectory, sqp_solve

PULSE_KINDS = ("constant_area_pi", "gaussian", "gaussian_derivative")


# ---------------------------------------------------------------------------
# Bounds
# ---------------------------------------------------------------------------

@dataclass
class BoundReport:
    amplitude_clipped: int = 0
    slew_violations: int = 0

    @property
    def clean(self) -> bool:
        return self.amplitude_clipped == 0 and self.slew_violations == 0


def enforce_bounds(u, u_max: float | None = None, du_max: float | None = None,
                   u_prev: float = 0.0, tol: float = 1e-12) -> tuple[np.ndarray, BoundReport]:
    """Clip amplitudes to ``u_max`` and count remaining slew violations.

    Slew is measured against ``u_prev`` for the first sample. Slew violations
    are reported, not repaired; use :func:`project_pulse` for a feasible point.
    """
    u = np.asarray(u, dtype=float).copy()
    rep = BoundReport()
    if u_max is not None:
        over = np.abs(u) > u_max + tol
        rep.amplitude_clipped = int(over.sum())
        u = np.clip(u, -u_max, u_max)
    if du_max is not None and u.size:
        d = np.diff(np.concatenate([[u_prev], u]))
        rep.slew_violations = int(np.sum(np.abs(d) > du_max + tol))
    return u, rep


def project_pulse(p, u_max: float | None, du_max: float | None, u_prev: float | None = 0.0,
                  opts: qpsolver.SolverOptions | None = None) -> np.ndarray:
    """Euclidean projection of a pulse onto the amplitude and slew constraints."""
    p = np.asarray(p, dtype=float).reshape(-1)
    n = p.size
    if n == 0:
        return p.copy()
    rows, lo, hi = [], [], []
    if u_max is not None:
        rows.append(sp.identity(n, format="csc"))
        lo.append(np.full(n, -u_max))
        hi.append(np.full(n, u_max))
    if du_max is not None:
        D = sp.diags([np.ones(n), -np.ones(n - 1)], [0, -1], shape=(n, n), format="csc")
        start = np.zeros(n)
        if u_prev is None:
            D = D[1:]
        else:
            start[0] = u_prev
        rows.append(D)
        lo.append(start[: D.shape[0]] - du_max)
        hi.append(start[: D.shape[0]] + du_max)
    if not rows:
        return p.copy()
    G = sp.vstack(rows, format="csc")
    qp = qpsolver.QPProblem(sp.identity(n, format="csc"), -p, G, np.concatenate(lo), np.concatenate(hi))
    opts = opts or qpsolver.SolverOptions(eps_abs=1e-10, eps_rel=1e-10)
    sol = qpsolver.solve(qp, opts, warm_start=np.clip(p, -np.inf if u_max is None else -u_max,
                                                     np.inf if u_max is None else u_max))
    return sol.z


# ---------------------------------------------------------------------------
# Pulse shapes
# ---------------------------------------------------------------------------

def _trapezoid(n: int, amplitude: float, du_max: float | None) -> np.ndarray:
    if du_max is None:
        return np.full(n, amplitude)
    k = np.arange(n)
    return np.minimum(np.minimum((k + 1) * du_max, (n - k) * du_max), amplitude)


def _gaussian(duration: float, dt: float):
    """Baseline-subtracted Gaussian ``g`` and its derivative, sampled at midpoints."""
    n = int(round(duration / dt))
    t = (np.arange(n) + 0.5) * dt
    c, s = 0.5 * duration, duration / 6.0
    g = np.exp(-((t - c) ** 2) / (2 * s * s))
    return g - np.exp(-(c ** 2) / (2 * s * s)), -(t - c) / s ** 2 * g


@dataclass(frozen=True)
class PulseShape:
    """Envelope description; ``sample`` returns piecewise-constant values.

    ``constant_area_pi``: trapezoid ramped at ``du_max`` with area pi.
    ``gaussian``: pi-area Gaussian over ``duration`` with sigma = duration/6.
    ``gaussian_derivative``: ``amplitude`` times the time derivative of that
    Gaussian.
    """

    kind: str
    duration: float
    amplitude: float = 1.0
    u_max: float | None = None
    du_max: float | None = None

    def __post_init__(self):
        if self.kind not in PULSE_KINDS:
            raise ValueError(f"unknown pulse kind {self.kind!r}; expected one of {PULSE_KINDS}")
        if self.duration <= 0:
            raise ValueError("duration must be positive")

    @property
    def sigma(self) -> float:
        return self.duration / 6.0

    def sample(self, dt: float) -> np.ndarray:
        if self.kind == "constant_area_pi":
            return area_pi_pulse(self.duration, dt, self.u_max, self.du_max)
        g, dg = _gaussian(self.duration, dt)
        scale = np.pi / (g.sum() * dt)
        if self.kind == "gaussian":
            return scale * g
        return self.amplitude * scale * dg

    def sample_checked(self, dt: float) -> tuple[np.ndarray, BoundReport]:
        return enforce_bounds(self.sample(dt), self.u_max, self.du_max)


def area_pi_pulse(duration: float | None, dt: float, u_max: float | None = None,
                  du_max: float | None = None) -> np.ndarray:
    """Trapezoidal pulse with ``sum(u) * dt == pi`` inside the given bounds.

    ``duration=None`` picks the shortest feasible pulse. Raises ``ValueError``
    naming the binding constraint when area pi cannot be reached.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    target = np.pi / dt  # required sample sum
    if duration is None:
        if u_max is None and du_max is None:
            raise ValueError("a shortest pulse needs u_max or du_max")
        n = 1
        while _trapezoid(n, np.inf if u_max is None else u_max, du_max).sum() < target:
            n += 1
    else:
        n = int(round(duration / dt))
        if n < 1:
            raise ValueError("duration shorter than one timestep")
    cap = np.inf if u_max is None else u_max
    full = _trapezoid(n, cap, du_max).sum()
    if full < target * (1 - 1e-12):
        if du_max is not None and _trapezoid(n, np.inf, du_max).sum() < target:
            raise ValueError(f"area pi unreachable in {n} steps: slew limit du_max={du_max} is binding")
        raise ValueError(f"area pi unreachable in {n} steps: amplitude limit u_max={u_max} is binding")
    if np.isinf(cap):
        cap = target  # any trapezoid height up to the full area
    amp = scipy.optimize.brentq(lambda a: _trapezoid(n, a, du_max).sum() - target, 0.0, cap,
                                xtol=1e-15, rtol=1e-15)
    u = _trapezoid(n, amp, du_max)
    return u * (target / u.sum())


def drag_pulses(duration: float, dt: float, alpha: float, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian pi pulse on ``u_x`` and the DRAG quadrature ``u_y = scale * du_x/dt / alpha``.

    The derivative is analytic. The sign of ``u_y`` is fixed for the drive
    ``(u_y/2) i(a - a^+)``; with negative anharmonicity this is
    ``-scale * du_x/dt / |alpha|``.
    """
    if alpha == 0:
        raise ValueError("alpha must be nonzero")
    if not 0.0 <= scale <= 1.0:
        raise ValueError("scale must lie in [0, 1]")
    ux = PulseShape("gaussian", duration).sample(dt)
    dux = PulseShape("gaussian_derivative", duration).sample(dt)
    return ux, scale * dux / alpha


# ---------------------------------------------------------------------------
# Nelder-Mead
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimplexState:
    vertices: np.ndarray  # (n_params + 1, n_params)
    values: np.ndarray
    reflection: float = 1.0
    expansion: float = 2.0
    contraction: float = 0.5
    shrink: float = 0.5

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vertices, dtype=float))
        if v.shape[0] != v.shape[1] + 1:
            raise ValueError(f"simplex needs n_params + 1 vertices, got shape {v.shape}")
        vals = np.asarray(self.values, dtype=float)
        if vals.size and (vals.size != v.shape[0] or not np.all(np.isfinite(vals))):
            raise ValueError("simplex objective values must be finite, one per vertex")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "values", vals)


@dataclass
class NelderMeadResult:
    params: np.ndarray
    value: float
    history: np.ndarray  # objective value of every evaluation, in order
    simplex: SimplexState
    evaluations: int

    @property
    def best_history(self) -> np.ndarray:
        return np.minimum.accumulate(self.history) if self.history.size else self.history


class _Budget(Exception):
    pass


def nelder_mead_calibrate(objective: Callable[[np.ndarray], float], initial_simplex,
                          max_evals: int, *, xatol: float = 1e-8, fatol: float = 1e-12) -> NelderMeadResult:
    """Standard Nelder-Mead (coefficients 1, 2, 0.5, 0.5) with an evaluation log.

    Every call of ``objective`` counts once toward ``max_evals`` and is
    recorded in ``history``; the initial simplex costs ``n_params + 1``
    evaluations before the first reflection.
    """
    simplex = np.atleast_2d(np.asarray(initial_simplex, dtype=float))
    SimplexState(simplex, np.array([]))  # shape validation
    history: list[float] = []
    points: list[np.ndarray] = []

    def f(p):
        if len(history) >= max_evals:
            raise _Budget
        val = float(objective(np.asarray(p, dtype=float)))
        if not np.isfinite(val):
            raise ValueError("objective returned a non-finite value")
        history.append(val)
        points.append(np.array(p, dtype=float))
        return val

    final = None
    try:
        res = scipy.optimize.minimize(
            f, simplex[0], method="Nelder-Mead",
            options={"initial_simplex": simplex, "maxfev": max_evals, "maxiter": 10 * max_evals,
                     "xatol": xatol, "fatol": fatol, "adaptive": False},
        )
        final = res.final_simplex
    except _Budget:
        pass
    h = np.array(history)
    if not h.size:
        raise ValueError("max_evals must be positive")
    k = int(np.argmin(h))
    if final is not None:
        state = SimplexState(final[0], final[1])
    elif len(h) >= simplex.shape[0]:
        # budget ran out mid-iteration; report the best points seen
        order = np.argsort(h, kind="stable")[: simplex.shape[0]]
        state = SimplexState(np.array([points[i] for i in order]), h[order])
    else:
        state = SimplexState(simplex, np.array([]))
    return NelderMeadResult(points[k], float(h[k]), h, state, len(h))


def random_simplex(seed_params, du_max: float) -> np.ndarray:
    """Seed vertex plus one vertex per coordinate incremented by ``du_max``."""
    p = np.asarray(seed_params, dtype=float).reshape(-1)
    return np.vstack([p, p + du_max * np.eye(p.size)])


def model_aware_simplex(pulses: Sequence) -> np.ndarray:
    """Stack ``n_params + 1`` candidate pulses (e.g. one per model) as a simplex."""
    v = np.array([np.asarray(p, dtype=float).reshape(-1) for p in pulses])
    SimplexState(v, np.array([]))
    return v


# ---------------------------------------------------------------------------
# Open-loop optimal pulse
# ---------------------------------------------------------------------------

def open_loop_optimal_pulse(model: BilinearModel, ref: ReferenceTrajectory, cfg: MPCConfig, x0,
                            u_prev=None, u_guess: float = 0.1) -> np.ndarray:
    """One full SQP solve over the horizon, no feedback; returns ``U`` of shape (T, m)."""
    if ref.horizon == 0:
        return np.zeros((0, model.m))
    guess = GuessTrajectory.initial(x0, ref.horizon, model.m, u_guess)
    res = sqp_solve(x0, model, ref, cfg, guess, u_prev)
    return res.U
