"""Dense symmetric linear algebra used by every other module.

LAPACK does the heavy lifting (``numpy.linalg.eigh`` and a Cholesky solve);
this module adds the conventions the rest of the package relies on:
descending eigenvalue order, a deterministic eigenvector sign, eigenvalue
floors, and errors that say what went wrong.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import IllConditionedError, InputError, NumericalError

__all__ = [
    "SpectralDecomposition",
    "sym",
    "eigh",
    "clamp_floor",
    "solve_spd",
    "frobenius_distance",
    "eigenvalue_clusters",
    "cluster_projectors",
]


def sym(A) -> np.ndarray:
    """Return ``(A + A.T) / 2`` as a float64 array, checking shape and finiteness."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InputError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InputError("matrix has non-finite entries")
    return 0.5 * (A + A.T)


@dataclass(frozen=True)
class SpectralDecomposition:
    """Eigenpairs of a symmetric matrix.

    ``eigenvalues`` are sorted in descending order and column ``i`` of
    ``eigenvectors`` belongs to ``eigenvalues[i]``.  In every column the entry
    of largest magnitude is nonnegative.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def n(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[0])

    def reconstruct(self, values=None) -> np.ndarray:
        """``V diag(values) V^T``; defaults to the stored eigenvalues."""
        lam = self.eigenvalues if values is None else np.asarray(values, dtype=np.float64)
        V = self.eigenvectors
        return sym((V * lam) @ V.T)

    def top(self, k: int) -> "SpectralDecomposition":
        return SpectralDecomposition(self.eigenvalues[:k], self.eigenvectors[:, :k])


def _fix_signs(V: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def eigh(A) -> SpectralDecomposition:
    """Full eigendecomposition of a symmetric matrix (descending order)."""
    A = sym(A)
    try:
        lam, V = np.linalg.eigh(A)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"symmetric eigensolver did not converge for a {A.shape[0]}x{A.shape[0]} matrix"
        ) from exc
    order = np.argsort(lam, kind="stable")[::-1]
    lam = lam[order]
    V = _fix_signs(V[:, order])
    return SpectralDecomposition(np.ascontiguousarray(lam), np.ascontiguousarray(V))


def clamp_floor(decomp: SpectralDecomposition, floor=None, rel: float = 1e-12):
    """Raise eigenvalues below ``floor`` up to it.

    ``floor`` defaults to ``rel * lambda_max``.  Returns the clamped
    decomposition and the boolean mask of entries that were at or above the
    floor before clamping.
    """
    lam = decomp.eigenvalues
    if floor is None:
        floor = rel * max(float(lam[0]), 0.0) if lam.size else 0.0
    keep = lam >= floor
    clamped = np.where(keep, lam, floor)
    return SpectralDecomposition(clamped, decomp.eigenvectors), keep


def solve_spd(A, b, ridge: float = 0.0) -> np.ndarray:
    """Solve ``(A + ridge*I) x = b`` for symmetric positive definite ``A + ridge*I``."""
    if ridge < 0:
        raise InputError(f"ridge must be nonnegative, got {ridge}")
    A = sym(A)
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != A.shape[0]:
        raise InputError(f"right-hand side has length {b.shape[0]}, matrix is {A.shape[0]}x{A.shape[0]}")
    M = A + ridge * np.eye(A.shape[0])
    try:
        factor = scipy.linalg.cho_factor(M, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        lam_min = float(np.linalg.eigvalsh(M)[0])
        raise IllConditionedError(
            f"matrix is not positive definite after ridge {ridge:g} "
            f"(smallest eigenvalue {lam_min:.3e})",
            smallest_eigenvalue=lam_min,
        ) from None
    x = scipy.linalg.cho_solve(factor, b, check_finite=False)
    # one step of iterative refinement keeps the residual at roundoff level
    x = x + scipy.linalg.cho_solve(factor, b - M @ x, check_finite=False)
    if not np.all(np.isfinite(x)):
        lam_min = float(np.linalg.eigvalsh(M)[0])
        raise IllConditionedError(
            f"solve produced non-finite values (smallest eigenvalue {lam_min:.3e})",
            smallest_eigenvalue=lam_min,
        )
    return x


def frobenius_distance(A, B) -> float:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise InputError(f"dimension mismatch: {A.shape} vs {B.shape}")
    return float(np.linalg.norm(A - B))


def eigenvalue_clusters(eigenvalues, rel_gap: float = 1e-6) -> list[np.ndarray]:
    """Group indices of a descending spectrum into clusters of near-equal values.

    Consecutive eigenvalues belong to the same cluster when their gap is at
    most ``rel_gap * max(|lambda_max|, tiny)``.
    """
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if lam.size == 0:
        return []
    scale = max(float(np.max(np.abs(lam))), np.finfo(float).tiny)
    clusters, start = [], 0
    for i in range(1, lam.size):
        if abs(lam[i - 1] - lam[i]) > rel_gap * scale:
            clusters.append(np.arange(start, i))
            start = i
    clusters.append(np.arange(start, lam.size))
    return clusters


def cluster_projectors(decomp: SpectralDecomposition, clusters) -> list[np.ndarray]:
    """Orthogonal projector onto each cluster's eigenspace."""
    V = decomp.eigenvectors
    return [V[:, idx] @ V[:, idx].T for idx in clusters]
