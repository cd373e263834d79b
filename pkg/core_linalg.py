"""
Dense symmetric linear algebra used by every other module: Cholesky, a cyclic
Jacobi eigensolver, PSD tests and projections.
"""
import logging
from dataclasses import dataclass

import numpy as np

from errors import DimensionMismatch, NonConvergence, NotPositiveDefinite

logger = logging.getLogger(__name__)

# A symmetric matrix is a square float ndarray with entries(i,j) == entries(j,i).
SymMatrix = np.ndarray

MAX_JACOBI_SWEEPS = 100
JACOBI_OFF_TOL = 1e-12
JACOBI_THETA_MAX = 1e150
PSD_TOL = 1e-7


@dataclass(frozen=True)
class EigenDecomposition:
    values: np.ndarray   # ascending
    vectors: np.ndarray  # orthonormal columns

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def as_symmetric(m) -> SymMatrix:
    """
    Validate and return a float copy of a square symmetric matrix.
    The lower triangle is authoritative; the upper triangle is mirrored from it.
    """
    a = np.array(m, dtype=float, ndmin=2)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    lower = np.tril(a)
    return lower + np.tril(a, -1).T


def inf_norm(m: np.ndarray) -> float:
    return float(np.linalg.norm(m, np.inf)) if m.size else 0.0


def psd_tolerance(m: np.ndarray) -> float:
    """Tolerance of the repo-wide "numerically PSD" convention."""
    return PSD_TOL * (1.0 + inf_norm(m))


def cholesky(m) -> np.ndarray:
    """
    Lower-triangular factor L with L @ L.T == m.
    Raises NotPositiveDefinite when a pivot drops below 1e-12 * (1 + trace/dim).
    """
    a = as_symmetric(m)
    n = a.shape[0]
    threshold = 1e-12 * (1.0 + np.trace(a) / n)
    L = np.zeros_like(a)
    for j in range(n):
        pivot = a[j, j] - L[j, :j] @ L[j, :j]
        if pivot <= threshold:
            raise NotPositiveDefinite(f"pivot {pivot:.3e} at column {j} below {threshold:.3e}")
        L[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def _jacobi(a: np.ndarray) -> EigenDecomposition:
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a, "fro")
    if scale == 0.0:
        return EigenDecomposition(values=np.zeros(n), vectors=v)

    for sweep in range(MAX_JACOBI_SWEEPS):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= JACOBI_OFF_TOL * scale:
            logger.debug(f"Jacobi converged after {sweep} sweeps (n={n})")
            order = np.argsort(np.diag(a), kind="stable")
            return EigenDecomposition(values=np.diag(a)[order].copy(), vectors=v[:, order].copy())

        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > JACOBI_THETA_MAX:
                    t = 0.5 / theta
                else:
                    sign = 1.0 if theta >= 0.0 else -1.0
                    t = sign / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c

                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0

                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq

    raise NonConvergence(f"Jacobi did not converge in {MAX_JACOBI_SWEEPS} sweeps (n={n})")


def sym_eigen(m, method: str = "jacobi") -> EigenDecomposition:
    """
    Symmetric eigendecomposition with ascending eigenvalues.

    method="jacobi" runs the cyclic Jacobi sweeps; method="lapack" delegates to
    numpy.linalg.eigh and is what the conic solver's hot loop uses.
    """
    a = as_symmetric(m)
    if method == "jacobi":
        return _jacobi(a)
    if method == "lapack":
        values, vectors = np.linalg.eigh(a)
        return EigenDecomposition(values=values, vectors=vectors)
    raise ValueError(f"unknown eigen method '{method}'")


def min_eigenvalue(m, method: str = "jacobi") -> float:
    return float(sym_eigen(m, method=method).values[0])


def psd_project(m, method: str = "jacobi") -> SymMatrix:
    """Frobenius-nearest PSD matrix: clip negative eigenvalues to zero."""
    eig = sym_eigen(m, method=method)
    clipped = np.maximum(eig.values, 0.0)
    out = (eig.vectors * clipped) @ eig.vectors.T
    return 0.5 * (out + out.T)


def psd_project_stack(blocks: np.ndarray) -> np.ndarray:
    """Project a (k, s, s) stack of symmetric blocks onto the PSD cone."""
    values, vectors = np.linalg.eigh(blocks)
    np.maximum(values, 0.0, out=values)
    out = np.einsum("kij,kj,klj->kil", vectors, values, vectors)
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def is_numerically_psd(m, method: str = "lapack") -> bool:
    a = as_symmetric(m)
    return min_eigenvalue(a, method=method) >= -psd_tolerance(a)
