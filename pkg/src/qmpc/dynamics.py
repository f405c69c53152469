"""Liouvillian generators, bilinear discrete-time models and the exact plant.

The controller works with a first-order (Euler) bilinear model

    x(t+1) = (A + sum_j u_j(t) N_j) x(t),

whereas the simulated plant propagates the density matrix with exact matrix
exponentials, so integration error shows up as a disturbance for MPC.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from . import qcore
from .qcore import QuantumState, as_matrix, dag, real_embed

TRACE_DRIFT_TOL = 1e-10
MAX_SUBSTEP_HALVINGS = 12


def commutator_superop(h) -> np.ndarray:
    """Complex superoperator of ``rho -> -i[h, rho]`` (row-major vec)."""
    h = as_matrix(h)
    eye = np.eye(h.shape[0])
    return -1j * (np.kron(h, eye) - np.kron(eye, h.T))


def dissipator_superop(c, ops) -> np.ndarray:
    """Superoperator of ``sum_jk c_jk (D_j rho D_k^+ - 1/2 {D_k^+ D_j, rho})``."""
    c = as_matrix(c)
    ops = [as_matrix(d) for d in ops]
    n = ops[0].shape[0]
    eye = np.eye(n)
    out = np.zeros((n * n, n * n), dtype=complex)
    for j, dj in enumerate(ops):
        for k, dk in enumerate(ops):
            if c[j, k] == 0:
                continue
            dkdj = dag(dk) @ dj
            out += c[j, k] * (
                np.kron(dj, dk.conj())
                - 0.5 * np.kron(dkdj, eye)
                - 0.5 * np.kron(eye, dkdj.T)
            )
    return out


@dataclass(frozen=True, eq=False)
class Liouvillian:
    """Continuous-time generator ``L_drift + sum_j u_j L_j`` of a (possibly open) system.

    Complex superoperators act on row-major ``vec(rho)``; the real generators act
    on the embedded state ``x``.
    """

    h0: np.ndarray
    controls: tuple
    c: np.ndarray | None = None
    dissipators: tuple = ()
    drift_complex: np.ndarray = field(init=False, repr=False)
    controls_complex: tuple = field(init=False, repr=False)
    drift_generator: np.ndarray = field(init=False, repr=False)
    control_generators: tuple = field(init=False, repr=False)

    @property
    def dim(self) -> int:
        return self.h0.shape[0]

    @property
    def n_controls(self) -> int:
        return len(self.controls)

    @property
    def is_closed(self) -> bool:
        return self.c is None or not np.any(self.c)

    @property
    def n_x(self) -> int:
        return 2 * self.dim**2


def build_liouvillian(h0, controls: Sequence = (), c=None, dissipators: Sequence = ()) -> Liouvillian:
    """Assemble drift and control generators from Hamiltonian terms (rad/ns)."""
    h0 = as_matrix(h0)
    n = h0.shape[0]
    hs = tuple(as_matrix(h) for h in controls)
    for h in (h0,) + hs:
        if h.shape != (n, n):
            raise ValueError(f"operator shape {h.shape} does not match ({n}, {n})")
        if not qcore.is_hermitian(h):
            raise ValueError("Hamiltonian terms must be Hermitian")
    ds = tuple(as_matrix(d) for d in dissipators)
    drift = commutator_superop(h0)
    if c is not None:
        c = as_matrix(c)
        if c.shape != (len(ds), len(ds)):
            raise ValueError("dissipator coefficient matrix must be len(dissipators) square")
        if not qcore.is_hermitian(c) or np.linalg.eigvalsh(c).min() < -qcore.PSD_TOL:
            raise ValueError("dissipator coefficient matrix must be PSD")
        for d in ds:
            if d.shape != (n, n):
                raise ValueError("dissipator shape mismatch")
        if np.any(c):
            drift = drift + dissipator_superop(c, ds)
    elif ds:
        raise ValueError("dissipators given without coefficient matrix")
    ctrl = tuple(commutator_superop(h) for h in hs)

    lv = Liouvillian(h0, hs, c, ds)
    object.__setattr__(lv, "drift_complex", drift)
    object.__setattr__(lv, "controls_complex", ctrl)
    object.__setattr__(lv, "drift_generator", real_embed(drift))
    object.__setattr__(lv, "control_generators", tuple(real_embed(g) for g in ctrl))
    return lv


# ---------------------------------------------------------------------------
# Discrete bilinear model
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BilinearModel:
    """Discrete-time model ``x+ = (A + sum_j u_j N_j) x`` with timestep ``dt`` (ns)."""

    A: np.ndarray
    N: np.ndarray  # shape (m, n_x, n_x)
    dt: float

    def __post_init__(self):
        a = np.asarray(self.A, dtype=float)
        nn = np.asarray(self.N, dtype=float).reshape(-1, *a.shape)
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "N", nn)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.N.shape[0]

    def matrix(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float).reshape(self.m)
        return self.A + np.tensordot(u, self.N, axes=1)

    def step(self, x, u) -> np.ndarray:
        return self.matrix(u) @ np.asarray(x, dtype=float)

    def rollout(self, x0, U) -> np.ndarray:
        U = np.asarray(U, dtype=float).reshape(-1, self.m)
        X = np.empty((len(U) + 1, self.n_x))
        X[0] = x0
        for t, u in enumerate(U):
            X[t + 1] = self.step(X[t], u)
        return X


def discretize_first_order(lv: Liouvillian, dt: float) -> BilinearModel:
    if dt <= 0:
        raise ValueError("dt must be positive")
    a = np.eye(lv.n_x) + dt * lv.drift_generator
    n = np.array([dt * g for g in lv.control_generators]).reshape(-1, lv.n_x, lv.n_x)
    return BilinearModel(a, n, dt)


def block_diagonal_model(models: Sequence[BilinearModel]) -> BilinearModel:
    """Stack independent models; controls are concatenated in model order."""
    dts = {m.dt for m in models}
    if len(dts) != 1:
        raise ValueError("models must share a timestep")
    a = scipy.linalg.block_diag(*[m.A for m in models])
    n_tot = a.shape[0]
    ns = []
    offset = 0
    for mdl in models:
        for nj in mdl.N:
            big = np.zeros((n_tot, n_tot))
            big[offset:offset + mdl.n_x, offset:offset + mdl.n_x] = nj
            ns.append(big)
        offset += mdl.n_x
    return BilinearModel(a, np.array(ns).reshape(-1, n_tot, n_tot), dts.pop())


# ---------------------------------------------------------------------------
# Linearization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearizedDynamics:
    A: np.ndarray  # (T, n_x, n_x)
    B: np.ndarray  # (T, n_x, m)
    r: np.ndarray  # (T, n_x); r[t] is the residual entering x(t+1)
    X_guess: np.ndarray
    U_guess: np.ndarray

    @property
    def horizon(self) -> int:
        return self.A.shape[0]


def linearize(model: BilinearModel, X_guess, U_guess) -> LinearizedDynamics:
    X = np.asarray(X_guess, dtype=float)
    U = np.asarray(U_guess, dtype=float).reshape(len(U_guess), -1) if len(U_guess) else np.zeros((0, model.m))
    T = U.shape[0]
    if X.shape != (T + 1, model.n_x):
        raise ValueError(f"X_guess must have shape {(T + 1, model.n_x)}, got {X.shape}")
    if U.shape[1] != model.m:
        raise ValueError(f"U_guess must have {model.m} columns")
    A = model.A[None, :, :] + np.einsum("tj,jab->tab", U, model.N)
    B = np.einsum("jab,tb->taj", model.N, X[:-1])
    f = np.einsum("tab,tb->ta", A, X[:-1])
    r = f - X[1:]
    return LinearizedDynamics(A, B, r, X, U)


# ---------------------------------------------------------------------------
# Exact plant
# ---------------------------------------------------------------------------

def _hamiltonian(lv: Liouvillian, u) -> np.ndarray:
    h = lv.h0.copy()
    for uj, hj in zip(u, lv.controls):
        h = h + uj * hj
    return h


def _propagate(lv: Liouvillian, rho: np.ndarray, u, dt: float) -> np.ndarray:
    if lv.is_closed:
        w, v = np.linalg.eigh(_hamiltonian(lv, u))
        prop = (v * np.exp(-1j * w * dt)) @ dag(v)
        return prop @ rho @ dag(prop)
    gen = lv.drift_complex.copy()
    for uj, g in zip(u, lv.controls_complex):
        gen = gen + uj * g
    vec = scipy.linalg.expm(gen * dt) @ qcore.vectorize(rho)
    return qcore.devectorize(vec, lv.dim)


def step_truth(lv: Liouvillian, rho, u, dt: float, renormalize: bool = True) -> QuantumState:
    """Propagate one zero-order-hold step with exact exponentials.

    ``renormalize=False`` skips the roundoff cleanup so integrator drift
    can be measured.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    u = np.asarray(u, dtype=float).reshape(lv.n_controls)
    if not np.all(np.isfinite(u)):
        raise ValueError("control must be finite")
    r0 = rho.rho if isinstance(rho, QuantumState) else as_matrix(rho)
    substeps = 1
    for _ in range(MAX_SUBSTEP_HALVINGS):
        r = r0
        h = dt / substeps
        for _ in range(substeps):
            r = _propagate(lv, r, u, h)
        if abs(np.trace(r) - np.trace(r0)) < TRACE_DRIFT_TOL:
            break
        substeps *= 2
    return QuantumState(qcore.clean_density(r) if renormalize else r)


def simulate_truth(lv: Liouvillian, rho0, U, dt: float, renormalize: bool = True) -> list[QuantumState]:
    states = [rho0 if isinstance(rho0, QuantumState) else QuantumState(rho0)]
    for u in np.asarray(U, dtype=float).reshape(-1, lv.n_controls):
        states.append(step_truth(lv, states[-1], u, dt, renormalize))
    return states


# ---------------------------------------------------------------------------
# Gate synthesis lift
# ---------------------------------------------------------------------------

def lift_liouvillian(lv: Liouvillian) -> Liouvillian:
    """Generator of ``P = |U>><<U|`` under ``dP/dt = -i[H kron 1, P]``."""
    if not lv.is_closed:
        raise ValueError("process lift requires a closed system (no dissipators)")
    eye = np.eye(lv.dim)
    return build_liouvillian(np.kron(lv.h0, eye), [np.kron(h, eye) for h in lv.controls])


def lift_to_process_model(lv: Liouvillian, dt: float) -> BilinearModel:
    return discretize_first_order(lift_liouvillian(lv), dt)


def process_state(unitary) -> np.ndarray:
    """``|U>><<U| / N`` for row-major ``|U>> = vec(U)``; unit trace."""
    v = qcore.vectorize(unitary)
    return np.outer(v, v.conj()) / np.vdot(v, v).real
