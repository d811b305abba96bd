"""
Task-driven decomposition of the low-rank update space

General bases maximise the joint projection energy of past and new features,
isolated bases maximise the new-to-past energy ratio, and two baselines (the
bottom eigenvectors of the past statistic, random orthonormal directions)
stand in for the usual null-space constructions. The energy helpers work on
statistics only, using ||X U||_F^2 = tr(U^T S U).
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from subspace_cl.core.numerics import (
    Matrix,
    as_matrix,
    cholesky_lower,
    solve_lower,
    solve_lower_transposed,
    sym_eig_bottomr,
    sym_eig_topr,
    symmetrize,
)
from subspace_cl.core.stats import SecondMoment, trace_energy
from subspace_cl.exceptions import DimensionMismatchError, NotPositiveDefiniteError, UndefinedEnergyError

logger = logging.getLogger(__name__)

DEFAULT_JITTER_SCALE = 1e-6


class SubspaceKind(str, Enum):
    GENERAL = "general"
    ISOLATED = "isolated"
    NULL_BASELINE = "null_baseline"
    RANDOM_BASELINE = "random_baseline"


@dataclass(frozen=True)
class SubspaceBases:
    U: Matrix
    kind: SubspaceKind
    spectrum: np.ndarray
    jitter_used: float = 0.0

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    @property
    def dim(self) -> int:
        return self.U.shape[0]


def _check_pair(S_past: SecondMoment, S_new: SecondMoment, r: int) -> None:
    if S_past.dim != S_new.dim:
        raise DimensionMismatchError(f"statistics dimensions differ: {S_past.dim} vs {S_new.dim}")
    if not 1 <= r <= S_new.dim:
        raise DimensionMismatchError(f"rank {r} exceeds dimension {S_new.dim}")


def default_jitter(S_past: SecondMoment, scale: float = DEFAULT_JITTER_SCALE) -> float:
    """Ridge added to the past statistic before factorization: scale * tr(S)/D"""
    return scale * trace_energy(S_past) / S_past.dim


def general_bases(S_past: SecondMoment, S_new: SecondMoment, r: int) -> SubspaceBases:
    """
    Directions maximising tr(U^T (S_past + S_new) U) over orthonormal U

    Args:
        S_past: accumulated statistic of tasks 1..t-1 (zero at the first task)
        S_new: statistic of task t
        r: subspace rank

    Returns:
        Orthonormal bases of kind GENERAL with the top-r eigenvalues as spectrum
    """
    _check_pair(S_past, S_new, r)
    eig = sym_eig_topr(S_past.S + S_new.S, r)
    return SubspaceBases(U=eig.vectors, kind=SubspaceKind.GENERAL, spectrum=eig.values)


def isolated_bases(S_past: SecondMoment, S_new: SecondMoment, r: int, jitter: Optional[float] = None) -> SubspaceBases:
    """
    Directions maximising the ratio tr(U^T S_new U) / tr(U^T S_past U)

    Whitens the new statistic with the Cholesky factor of the (jittered) past
    statistic, takes its top-r eigenvectors and maps them back with L^{-T}.
    The result is S_past-orthogonal, not orthonormal; anchoring
    orthonormalizes it.

    Args:
        S_past: accumulated statistic of tasks 1..t-1
        S_new: statistic of task t
        r: subspace rank
        jitter: ridge added to S_past; defaults to default_jitter(S_past)

    Returns:
        Bases of kind ISOLATED whose spectrum holds the generalized eigenvalues
    """
    _check_pair(S_past, S_new, r)
    if jitter is None:
        jitter = default_jitter(S_past)
    M = S_past.S + jitter * np.eye(S_past.dim)
    try:
        L = cholesky_lower(M)
    except NotPositiveDefiniteError as e:
        logger.error(f"Cholesky of past statistic failed with jitter {jitter:.3e}")
        raise NotPositiveDefiniteError(
            pivot=e.pivot,
            message=f"{e}; past statistic is rank deficient, raise the jitter (currently {jitter:.3e})",
        ) from e

    half = solve_lower(L, S_new.S)
    whitened = symmetrize(solve_lower(L, half.T))
    eig = sym_eig_topr(whitened, r)
    U = solve_lower_transposed(L, eig.vectors)
    logger.debug(f"Isolated bases: jitter {jitter:.3e}, generalized spectrum {np.round(eig.values, 6).tolist()}")
    return SubspaceBases(U=U, kind=SubspaceKind.ISOLATED, spectrum=eig.values, jitter_used=float(jitter))


def null_space_baseline(S_past: SecondMoment, r: int) -> SubspaceBases:
    """Orthonormal eigenvectors of S_past with the r smallest eigenvalues"""
    if not 1 <= r <= S_past.dim:
        raise DimensionMismatchError(f"rank {r} exceeds dimension {S_past.dim}")
    eig = sym_eig_bottomr(S_past.S, r)
    return SubspaceBases(U=eig.vectors, kind=SubspaceKind.NULL_BASELINE, spectrum=eig.values)


def random_orthonormal_bases(dim: int, r: int, rng: np.random.Generator) -> SubspaceBases:
    """Orthonormal bases of a uniformly random r-dimensional subspace"""
    if not 1 <= r <= dim:
        raise DimensionMismatchError(f"rank {r} exceeds dimension {dim}")
    Q, R = np.linalg.qr(rng.standard_normal((dim, r)))
    Q = Q * np.sign(np.diag(R))
    return SubspaceBases(U=Q, kind=SubspaceKind.RANDOM_BASELINE, spectrum=np.zeros(r))


def _check_bases(S: SecondMoment, U) -> Matrix:
    if isinstance(U, SubspaceBases):
        U = U.U
    U = np.asarray(U, dtype=np.float64)
    if U.ndim == 1:
        U = U.reshape(-1, 1)
    U = as_matrix(U, "U")
    if U.shape[0] != S.dim:
        raise DimensionMismatchError(f"bases have {U.shape[0]} rows, statistic has dimension {S.dim}")
    return U


def projection_energy(S: SecondMoment, U) -> float:
    """||X U||_F^2 computed as tr(U^T S U)"""
    U = _check_bases(S, U)
    return float(np.sum(U * (S.S @ U)))


def relative_energy(S_new: SecondMoment, S_past: SecondMoment, U) -> float:
    """
    Normalized new-task energy over normalized past energy

    Returns:
        (tr(U^T S_new U)/tr(S_new)) / (tr(U^T S_past U)/tr(S_past))

    Raises:
        UndefinedEnergyError: when any trace or the past projection is zero
    """
    total_new = trace_energy(S_new)
    total_past = trace_energy(S_past)
    past = projection_energy(S_past, U)
    if total_new <= 0.0 or total_past <= 0.0 or past <= 0.0:
        raise UndefinedEnergyError(
            f"undefined relative energy (tr new {total_new:.3e}, tr past {total_past:.3e}, past projection {past:.3e})"
        )
    return (projection_energy(S_new, U) / total_new) / (past / total_past)


def projection_magnitude(S_new: SecondMoment, U) -> float:
    """Normalized projection magnitude sqrt(||X U||_F^2 / ||X||_F^2)"""
    total = trace_energy(S_new)
    if total <= 0.0:
        raise UndefinedEnergyError("projection magnitude of an empty statistic is undefined")
    return math.sqrt(max(projection_energy(S_new, U), 0.0) / total)
