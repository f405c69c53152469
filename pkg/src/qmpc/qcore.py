"""Dense complex linear algebra and density-matrix primitives.

Conventions used across the package:

* ``vectorize`` stacks rows (row-major), so ``vec(A B C) = (A kron C.T) vec(B)``.
* ``real_embed`` maps each complex entry ``a + bi`` to the block
  ``[[a, -b], [b, a]]``; a complex vector therefore embeds to the interleaved
  real vector ``(Re v0, Im v0, Re v1, Im v1, ...)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HERMITIAN_TOL = 1e-9
PSD_TOL = 1e-9
TRACE_TOL = 1e-9

_REAL_UNIT = np.eye(2)
_IMAG_UNIT = np.array([[0.0, -1.0], [1.0, 0.0]])


def as_matrix(m) -> np.ndarray:
    return np.atleast_2d(np.asarray(m, dtype=complex))


def dag(m: np.ndarray) -> np.ndarray:
    return np.conj(np.transpose(m))


def is_hermitian(m, tol: float = HERMITIAN_TOL) -> bool:
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        return False
    return bool(np.max(np.abs(m - dag(m)), initial=0.0) <= tol)


# ---------------------------------------------------------------------------
# Vectorization and real embedding
# ---------------------------------------------------------------------------

def vectorize(rho) -> np.ndarray:
    """Row-major stacking of a square matrix into a length ``N**2`` vector."""
    rho = as_matrix(rho)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError(f"vectorize expects a square matrix, got shape {rho.shape}")
    return rho.reshape(-1).copy()


def devectorize(v, n: int | None = None) -> np.ndarray:
    v = np.asarray(v, dtype=complex).reshape(-1)
    if n is None:
        n = int(round(np.sqrt(v.size)))
    if n * n != v.size:
        raise ValueError(f"vector of length {v.size} is not an {n}x{n} matrix")
    return v.reshape(n, n).copy()


def real_embed(m) -> np.ndarray:
    """Replace every complex entry by its 2x2 real block."""
    m = as_matrix(m)
    return np.kron(m.real, _REAL_UNIT) + np.kron(m.imag, _IMAG_UNIT)


def real_embed_vec(v) -> np.ndarray:
    v = np.asarray(v, dtype=complex).reshape(-1)
    out = np.empty(2 * v.size)
    out[0::2] = v.real
    out[1::2] = v.imag
    return out


def real_unembed_vec(x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size % 2:
        raise ValueError("embedded vector must have even length")
    return x[0::2] + 1j * x[1::2]


def state_to_x(rho) -> np.ndarray:
    """Density matrix -> real MPC state vector of length ``2 N**2``."""
    return real_embed_vec(vectorize(rho))


def x_to_state(x, n: int | None = None) -> np.ndarray:
    return devectorize(real_unembed_vec(x), n)


def population_indices(n: int) -> np.ndarray:
    """Positions of Re(rho_jj) inside the embedded state vector."""
    return np.array([2 * (j * n + j) for j in range(n)], dtype=int)


# ---------------------------------------------------------------------------
# States
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuantumState:
    """Validated density matrix; immutable."""

    rho: np.ndarray

    def __post_init__(self):
        rho = as_matrix(self.rho).copy()
        if rho.shape[0] != rho.shape[1]:
            raise ValueError(f"density matrix must be square, got {rho.shape}")
        if abs(np.trace(rho) - 1.0) > TRACE_TOL:
            raise ValueError(f"trace must be 1, got {np.trace(rho):.3e}")
        if not is_hermitian(rho):
            raise ValueError("density matrix is not Hermitian")
        if np.min(np.linalg.eigvalsh(0.5 * (rho + dag(rho)))) < -PSD_TOL:
            raise ValueError("density matrix is not positive semidefinite")
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)

    @property
    def dim(self) -> int:
        return self.rho.shape[0]

    @property
    def x(self) -> np.ndarray:
        return state_to_x(self.rho)

    @classmethod
    def from_x(cls, x) -> "QuantumState":
        return cls(x_to_state(x))

    @classmethod
    def basis(cls, n: int, j: int) -> "QuantumState":
        return cls(projector(n, j, j))

    @classmethod
    def pure(cls, psi) -> "QuantumState":
        psi = np.asarray(psi, dtype=complex).reshape(-1)
        psi = psi / np.linalg.norm(psi)
        return cls(np.outer(psi, psi.conj()))

    def is_pure(self, tol: float = 1e-9) -> bool:
        return abs(np.real(np.trace(self.rho @ self.rho)) - 1.0) <= tol


def clean_density(rho) -> np.ndarray:
    """Re-Hermitize and renormalize the trace to absorb roundoff."""
    rho = as_matrix(rho)
    rho = 0.5 * (rho + dag(rho))
    return rho / np.real(np.trace(rho))


# ---------------------------------------------------------------------------
# Partial trace, fidelity
# ---------------------------------------------------------------------------

def partial_trace(rho_ab, dims, keep: str = "A") -> np.ndarray:
    """Reduced density matrix of a bipartite operator.

    ``keep="A"`` traces out B and vice versa.
    """
    rho_ab = as_matrix(rho_ab)
    da, db = (int(d) for d in dims)
    if rho_ab.shape != (da * db, da * db):
        raise ValueError(f"dims {dims} inconsistent with matrix of shape {rho_ab.shape}")
    t = rho_ab.reshape(da, db, da, db)
    keep = keep.upper()
    if keep == "A":
        return np.einsum("ijkj->ik", t)
    if keep == "B":
        return np.einsum("ijil->jl", t)
    raise ValueError(f"keep must be 'A' or 'B', got {keep!r}")


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + dag(m)))
    if w.min() < -PSD_TOL:
        raise ValueError(f"matrix is not PSD (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ dag(v)


def _as_rho(s) -> np.ndarray:
    return s.rho if isinstance(s, QuantumState) else as_matrix(s)


def _rank_one(rho: np.ndarray, tol: float = 1e-9) -> bool:
    w = np.linalg.eigvalsh(0.5 * (rho + dag(rho)))
    return bool(w[-1] >= 1.0 - tol and np.all(np.abs(w[:-1]) <= tol))


def fidelity(rho, rho_ref) -> float:
    """Squared Uhlmann fidelity ``Tr{sqrt(sqrt(rho) rho_ref sqrt(rho))}^2``.

    Uses the overlap ``Tr{rho rho_ref}`` when either argument is pure.
    """
    a, b = _as_rho(rho), _as_rho(rho_ref)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if _rank_one(b) or _rank_one(a):
        for m in (a, b):
            if np.linalg.eigvalsh(0.5 * (m + dag(m))).min() < -PSD_TOL:
                raise ValueError("state is not PSD")
        f = float(np.real(np.trace(a @ b)))
    else:
        sa = _psd_sqrt(a)
        inner = _psd_sqrt(sa @ b @ sa)
        f = float(np.real(np.trace(inner)) ** 2)
    return float(np.clip(f, 0.0, 1.0))


def infidelity(rho, rho_ref) -> float:
    return 1.0 - fidelity(rho, rho_ref)


def state_norm_identity_check(rho, rho_ref) -> tuple[float, float]:
    """Both sides of ``0.5 ||x - x_ref||^2 = 1 - F`` for pure states."""
    a, b = _as_rho(rho), _as_rho(rho_ref)
    lhs = 0.5 * float(np.sum((state_to_x(a) - state_to_x(b)) ** 2))
    rhs = 1.0 - float(np.real(np.trace(a @ b)))
    return lhs, rhs


# ---------------------------------------------------------------------------
# Standard operators
# ---------------------------------------------------------------------------

def projector(n: int, j: int, k: int) -> np.ndarray:
    m = np.zeros((n, n), dtype=complex)
    m[j, k] = 1.0
    return m


def lowering(n: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, n)), 1).astype(complex)


def standard_operators(kind: str, dim: int = 2, j: int = 0, k: int = 0) -> np.ndarray:
    """Named operators.

    ``kind`` is one of ``pauli_x``, ``pauli_y``, ``pauli_z``, ``lower``,
    ``raise``, ``projector`` (``|j><k|``) or ``identity``. Pauli matrices act
    on the two lowest levels and are zero elsewhere when ``dim > 2``.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    paulis = {
        "pauli_x": [[0, 1], [1, 0]],
        "pauli_y": [[0, -1j], [1j, 0]],
        "pauli_z": [[1, 0], [0, -1]],
    }
    if kind in paulis:
        m = np.zeros((dim, dim), dtype=complex)
        m[:2, :2] = paulis[kind]
        return m
    if kind == "lower":
        return lowering(dim)
    if kind == "raise":
        return dag(lowering(dim))
    if kind == "projector":
        return projector(dim, j, k)
    if kind == "identity":
        return np.eye(dim, dtype=complex)
    raise ValueError(f"unknown operator kind {kind!r}")


sigma_x = standard_operators("pauli_x")
sigma_y = standard_operators("pauli_y")
sigma_z = standard_operators("pauli_z")
