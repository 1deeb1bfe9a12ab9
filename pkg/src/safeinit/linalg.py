"""Small dense symmetric linear algebra.

Everything here works on plain ``numpy`` arrays.  Symmetric inputs are
symmetrized on entry, so callers may pass matrices that are symmetric only up
to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotPositiveDefinite, NumericalFailure, SingularMatrix


@dataclass(frozen=True)
class NumericConfig:
    jacobi_max_sweeps: int = 100
    jacobi_tol: float = 1e-15
    chol_pivot_tol: float = 1e-12
    max_condition: float = 1e12


DEFAULT_NUMERIC = NumericConfig()


@dataclass(frozen=True)
class EigDecomp:
    values: np.ndarray  # ascending
    vectors: np.ndarray  # columns are orthonormal eigenvectors

    def reconstruct(self):
        return (self.vectors * self.values) @ self.vectors.T


def symmetrize(m):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return 0.5 * (m + m.T)


def jacobi_eig(m, config: NumericConfig = DEFAULT_NUMERIC) -> EigDecomp:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Sweeps over all off-diagonal pairs in row order, zeroing each with a
    plane rotation, until the off-diagonal mass is negligible relative to the
    Frobenius norm.
    """
    a = symmetrize(m).copy()
    n = a.shape[0]
    v = np.eye(n)
    if n == 1:
        return EigDecomp(a.diagonal().copy(), v)
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return EigDecomp(np.zeros(n), v)
    for _ in range(config.jacobi_max_sweeps):
        off = np.linalg.norm(a - np.diag(a.diagonal()))
        if off <= config.jacobi_tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise NumericalFailure(
            f"Jacobi iteration did not converge in {config.jacobi_max_sweeps} sweeps"
        )
    w = a.diagonal().copy()
    order = np.argsort(w, kind="stable")
    return EigDecomp(w[order], v[:, order])


def sym_eig(m, method="lapack", config: NumericConfig = DEFAULT_NUMERIC) -> EigDecomp:
    """Eigendecomposition with ascending eigenvalues.

    ``method="jacobi"`` runs the in-house cyclic Jacobi solver;
    ``"lapack"`` (default) delegates to ``numpy.linalg.eigh``, which the
    feasibility solver needs for speed.
    """
    if method == "jacobi":
        return jacobi_eig(m, config)
    if method != "lapack":
        raise ValueError(f"unknown eigensolver {method!r}")
    a = symmetrize(m)
    try:
        w, v = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise NumericalFailure(str(exc)) from exc
    return EigDecomp(w, v)


def cholesky(m, config: NumericConfig = DEFAULT_NUMERIC):
    """Lower-triangular L with L @ L.T == m.

    Raises NotPositiveDefinite when a pivot falls to ``chol_pivot_tol``
    times the matrix norm or below.
    """
    a = symmetrize(m)
    n = a.shape[0]
    tol = config.chol_pivot_tol * max(np.linalg.norm(a, 2), 1e-300)
    low = np.zeros_like(a)
    for j in range(n):
        pivot = a[j, j] - low[j, :j] @ low[j, :j]
        if not pivot > tol:
            raise NotPositiveDefinite(f"pivot {j} is {pivot:.3e} (threshold {tol:.3e})")
        low[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            low[j + 1:, j] = (a[j + 1:, j] - low[j + 1:, :j] @ low[j, :j]) / low[j, j]
    return low


def is_positive_definite(m, config: NumericConfig = DEFAULT_NUMERIC) -> bool:
    try:
        cholesky(m, config)
    except NotPositiveDefinite:
        return False
    return True


def condition_number(m) -> float:
    m = np.asarray(m, dtype=float)
    w = sym_eig(m.T @ m).values
    if w[0] <= 0.0:
        return np.inf
    return float(np.sqrt(w[-1] / w[0]))


def solve(m, rhs, config: NumericConfig = DEFAULT_NUMERIC):
    m = np.asarray(m, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if rhs.shape[0] != m.shape[0]:
        raise ValueError(f"rhs has {rhs.shape[0]} rows, matrix has {m.shape[0]}")
    cond = condition_number(m)
    if not cond < config.max_condition:
        raise SingularMatrix(f"matrix is singular or ill-conditioned (cond={cond:.3e})")
    return np.linalg.solve(m, rhs)


def inverse(m, config: NumericConfig = DEFAULT_NUMERIC):
    m = np.asarray(m, dtype=float)
    return solve(m, np.eye(m.shape[0]), config)


def psd_project(m, method="lapack"):
    """Nearest positive semidefinite matrix in Frobenius norm."""
    d = sym_eig(m, method)
    return symmetrize((d.vectors * np.maximum(d.values, 0.0)) @ d.vectors.T)


def max_eig(m, method="lapack"):
    """Largest eigenvalue and a unit eigenvector for it."""
    d = sym_eig(m, method)
    return float(d.values[-1]), d.vectors[:, -1].copy()


def min_eig(m, method="lapack"):
    d = sym_eig(m, method)
    return float(d.values[0]), d.vectors[:, 0].copy()
