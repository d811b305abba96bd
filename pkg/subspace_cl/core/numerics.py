"""
Dense-matrix decomposition kernels

Thin wrappers around LAPACK (through scipy) that pin down the conventions the
rest of the toolkit relies on: descending eigenvalues, a deterministic sign
for every eigenvector, a canonical basis inside tied eigenspaces, and
positive diagonals for triangular and orthonormal factors.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.typing import NDArray
from scipy import linalg
from scipy.linalg import lapack

from subspace_cl.exceptions import (
    DimensionMismatchError,
    NonSymmetricError,
    NotPositiveDefiniteError,
    RankDeficientError,
    SingularMatrixError,
)

logger = logging.getLogger(__name__)

Matrix = NDArray[np.float64]

SYMMETRY_RTOL = 1e-8
TIE_TOL = 1e-10
RANK_TOL = 1e-10


@dataclass(frozen=True)
class SymEigResult:
    """Top eigenpairs of a symmetric matrix, values in descending order"""
    vectors: Matrix
    values: NDArray[np.float64]

    @property
    def rank(self) -> int:
        return self.vectors.shape[1]


def as_matrix(a, name: str = "matrix") -> Matrix:
    """
    Convert input to a finite 2-D float64 array

    Args:
        a: array-like input
        name: label used in error messages

    Returns:
        The input as a C-contiguous float64 array
    """
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise DimensionMismatchError(f"{name} must be a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DimensionMismatchError(f"{name} contains non-finite entries")
    return m


def symmetrize(S: Matrix) -> Matrix:
    return 0.5 * (S + S.T)


def check_symmetric(S, name: str = "S") -> Matrix:
    """
    Validate squareness and symmetry, returning the symmetrized matrix

    Symmetry is checked relative to the Frobenius norm with tolerance 1e-8.
    """
    S = as_matrix(S, name)
    if S.shape[0] != S.shape[1]:
        raise DimensionMismatchError(f"{name} must be square, got shape {S.shape}")
    scale = np.linalg.norm(S)
    asym = np.linalg.norm(S - S.T)
    if asym > SYMMETRY_RTOL * max(scale, np.finfo(np.float64).tiny):
        raise NonSymmetricError(f"{name} is not symmetric (asymmetry {asym:.3e} vs norm {scale:.3e})")
    return symmetrize(S)


def _canonical_span_basis(V: Matrix) -> Matrix:
    # Greedy Gram-Schmidt over the columns of the projector V V^T, in index
    # order; depends only on span(V).
    k = V.shape[1]
    P = V @ V.T
    basis = []
    for j in range(P.shape[1]):
        v = P[:, j].copy()
        for q in basis:
            v -= (q @ v) * q
        for q in basis:
            v -= (q @ v) * q
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            basis.append(v / norm)
        if len(basis) == k:
            break
    if len(basis) < k:
        return V
    return np.column_stack(basis)


def _fix_signs(V: Matrix) -> Matrix:
    """Flip each column so its largest-magnitude entry is positive"""
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def sym_eig(S) -> SymEigResult:
    """
    Full symmetric eigendecomposition with the toolkit's conventions

    Eigenvalues come out in descending order. Eigenvalues within 1e-10 of each
    other (relative to the spectral scale) form a tie cluster; its eigenvectors
    are replaced by a canonical basis of the cluster's eigenspace, ordered by
    coordinate index. Every eigenvector's largest-magnitude entry is positive.

    Args:
        S: symmetric D x D matrix

    Returns:
        SymEigResult holding all D eigenpairs
    """
    S = check_symmetric(S)
    values, vectors = linalg.eigh(S)
    order = np.argsort(-values, kind="stable")
    values = values[order]
    vectors = vectors[:, order]

    tol = TIE_TOL * max(1.0, float(np.max(np.abs(values))))
    start = 0
    n = len(values)
    while start < n:
        stop = start + 1
        while stop < n and values[stop - 1] - values[stop] <= tol:
            stop += 1
        if stop - start > 1:
            vectors[:, start:stop] = _canonical_span_basis(vectors[:, start:stop])
        start = stop

    return SymEigResult(vectors=_fix_signs(vectors), values=values)


def sym_eig_topr(S, r: int) -> SymEigResult:
    """
    Top-r eigenpairs of a symmetric matrix

    Args:
        S: symmetric D x D matrix (symmetric within 1e-8 relative)
        r: number of eigenpairs, 1 <= r <= D

    Returns:
        SymEigResult with D x r orthonormal vectors and r descending values
    """
    S = as_matrix(S, "S")
    if not 1 <= r <= S.shape[0]:
        raise DimensionMismatchError(f"rank {r} must lie in [1, {S.shape[0]}]")
    full = sym_eig(S)
    return SymEigResult(vectors=full.vectors[:, :r].copy(), values=full.values[:r].copy())


def sym_eig_bottomr(S, r: int) -> SymEigResult:
    """
    Eigenpairs with the r smallest eigenvalues, still listed in descending order
    """
    S = as_matrix(S, "S")
    if not 1 <= r <= S.shape[0]:
        raise DimensionMismatchError(f"rank {r} must lie in [1, {S.shape[0]}]")
    full = sym_eig(S)
    return SymEigResult(vectors=full.vectors[:, -r:].copy(), values=full.values[-r:].copy())


def cholesky_lower(S) -> Matrix:
    """
    Lower Cholesky factor L with L L^T = S

    Args:
        S: symmetric positive-definite matrix; callers add jitter beforehand

    Returns:
        Lower-triangular L with a strictly positive diagonal

    Raises:
        NotPositiveDefiniteError: naming the (0-based) pivot that failed
    """
    S = check_symmetric(S)
    L, info = lapack.dpotrf(S, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(pivot=int(info) - 1)
    if info < 0:
        raise DimensionMismatchError(f"dpotrf rejected argument {-info}")
    return np.ascontiguousarray(L)


def _check_lower(L) -> Matrix:
    L = as_matrix(L, "L")
    if L.shape[0] != L.shape[1]:
        raise DimensionMismatchError(f"L must be square, got shape {L.shape}")
    zero = np.flatnonzero(np.diag(L) == 0.0)
    if zero.size:
        raise SingularMatrixError(index=int(zero[0]))
    return L


def _as_rhs(B, n: int) -> Tuple[Matrix, bool]:
    B = np.asarray(B, dtype=np.float64)
    vector = B.ndim == 1
    B2 = B.reshape(-1, 1) if vector else B
    if B2.ndim != 2 or B2.shape[0] != n:
        raise DimensionMismatchError(f"right-hand side has shape {B.shape}, expected {n} rows")
    return B2, vector


def solve_lower(L, B) -> Matrix:
    """
    Forward substitution X = L^{-1} B

    Args:
        L: lower-triangular D x D matrix with non-zero diagonal
        B: D x k right-hand side (a length-D vector is accepted)

    Returns:
        X with the same shape as B
    """
    L = _check_lower(L)
    B2, vector = _as_rhs(B, L.shape[0])
    X = linalg.solve_triangular(L, B2, lower=True, check_finite=False)
    return X.ravel() if vector else X


def solve_lower_transposed(L, B) -> Matrix:
    """Back substitution X = L^{-T} B for lower-triangular L"""
    L = _check_lower(L)
    B2, vector = _as_rhs(B, L.shape[0])
    X = linalg.solve_triangular(L, B2, lower=True, trans="T", check_finite=False)
    return X.ravel() if vector else X


def thin_qr_rows(M) -> Matrix:
    """
    Orthonormalize the rows of M, preserving their span

    The thin QR factorization is taken of M^T and the orthonormal factor is
    returned transposed, signs fixed so the triangular factor has a positive
    diagonal (an already orthonormal M is returned unchanged).

    Args:
        M: r x D matrix with linearly independent rows

    Returns:
        r x D matrix Q with Q Q^T = I_r

    Raises:
        RankDeficientError: naming the first row that adds no new direction
    """
    M = as_matrix(M, "M")
    r, d = M.shape
    if r > d:
        raise RankDeficientError(row=d)
    Q, R = linalg.qr(M.T, mode="economic")
    diag = np.diag(R)
    tol = RANK_TOL * max(float(np.linalg.norm(M)), np.finfo(np.float64).tiny)
    deficient = np.flatnonzero(np.abs(diag) <= tol)
    if deficient.size:
        raise RankDeficientError(row=int(deficient[0]))
    Q = Q * np.sign(diag)
    return np.ascontiguousarray(Q.T)
