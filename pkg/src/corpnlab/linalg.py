"""Small dense kernels for the log-determinant diversity term.

Everything here operates on tiny matrices (N <= 16 rows), so clarity wins
over blocking or BLAS tricks.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky hit a non-positive pivot."""

    def __init__(self, pivot: int, value: float):
        self.pivot = pivot
        self.value = value
        super().__init__(f"matrix is not positive definite: pivot {pivot} is {value!r}")


def _check_finite(name, a):
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")


def covariance(F) -> np.ndarray:
    """Population covariance (divisor ``N_A``) of the rows of an ``N x N_A`` matrix."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    _check_finite("F", F)
    n_a = F.shape[1]
    if n_a < 2:
        raise ValueError(f"covariance needs at least 2 columns, got {n_a}")
    Fc = F - F.mean(axis=1, keepdims=True)
    S = Fc @ Fc.T / n_a
    # exact symmetry regardless of BLAS accumulation order
    return 0.5 * (S + S.T)


def cholesky(A) -> np.ndarray:
    """Lower-triangular Cholesky factor ``L`` with ``A = L @ L.T``.

    Raises :class:`NotPositiveDefiniteError` naming the first failing pivot.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"expected a square matrix, got {A.shape}")
    L = np.zeros_like(A)
    for j in range(n):
        d = A[j, j] - L[j, :j] @ L[j, :j]
        if not d > 0.0:
            raise NotPositiveDefiniteError(j, float(d))
        L[j, j] = np.sqrt(d)
        if j + 1 < n:
            L[j + 1:, j] = (A[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def _ridged(S, ridge):
    S = np.asarray(S, dtype=float)
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    _check_finite("S", S)
    return S + ridge * np.eye(S.shape[0])


def logdet_psd(S, ridge: float = 0.0) -> float:
    """Natural log of ``det(S + ridge * I)`` through its Cholesky factor."""
    L = cholesky(_ridged(S, ridge))
    return float(2.0 * np.sum(np.log(np.diag(L))))


def grad_logdet(S, ridge: float = 0.0) -> np.ndarray:
    """Gradient of :func:`logdet_psd` w.r.t. ``S``: the symmetrized inverse of the ridged matrix."""
    A = _ridged(S, ridge)
    L = cholesky(A)
    Linv = solve_triangular(L, np.eye(A.shape[0]), lower=True)
    inv = Linv.T @ Linv
    return 0.5 * (inv + inv.T)


def chain_covariance_grad(F, G) -> np.ndarray:
    """Pull a gradient w.r.t. ``covariance(F)`` back to ``F``.

    For symmetric ``G`` this is ``(2 / N_A) * G @ (F - rowmean(F))``.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    n = F.shape[0]
    if G.shape != (n, n):
        raise ValueError(f"G must be {n}x{n} to match F with {n} rows, got {G.shape}")
    Fc = F - F.mean(axis=1, keepdims=True)
    return (2.0 / F.shape[1]) * (G @ Fc)
