"""
Post-task recalibration and weight integration

Each rank-1 unit (column j of B_G, row j of A_G) of the general branch is
rescaled by the factor minimising

    lam * ||X_new (g b a)^T - X_new (b a)^T||^2 + sum_past ||X_past (g b a)^T||^2

whose closed form is g = lam e_new / (lam e_new + e_past) with
e = a S a^T. The isolated branch is merged unscaled.
"""
import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from subspace_cl.core.adapter import DualLoRALayer, effective_update
from subspace_cl.core.numerics import Matrix, as_matrix
from subspace_cl.core.stats import SecondMoment
from subspace_cl.exceptions import ConfigError, DimensionMismatchError

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = 3.0
INERT_ENERGY = 1e-12


@dataclass(frozen=True)
class RescaleResult:
    gammas: np.ndarray
    lambda_used: float
    per_unit_energies: List[Tuple[float, float]]

    @property
    def Lambda_G(self) -> Matrix:
        return np.diag(self.gammas)

    @classmethod
    def identity(cls, rank: int) -> "RescaleResult":
        return cls(gammas=np.ones(rank), lambda_used=float("nan"), per_unit_energies=[])


def _unit_energy(a: np.ndarray, S: SecondMoment) -> float:
    return float(a @ S.S @ a)


def rescale_factors(A_G, S_new: SecondMoment, S_past: SecondMoment, lam: float = DEFAULT_LAMBDA) -> RescaleResult:
    """
    Closed-form rescaling factor for every rank-1 unit of the general branch

    Args:
        A_G: r x D general down-projection
        S_new: statistic of the task just trained
        S_past: accumulated statistic of the tasks before it
        lam: weight of the new-task fidelity term, > 0

    Returns:
        RescaleResult; units with lam*e_new + e_past <= 1e-12 get gamma 0
    """
    if lam <= 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    A_G = as_matrix(A_G, "A_G")
    if A_G.shape[1] != S_new.dim or S_new.dim != S_past.dim:
        raise DimensionMismatchError(
            f"A_G has width {A_G.shape[1]}, statistics have dimensions {S_new.dim} and {S_past.dim}"
        )
    gammas = np.zeros(A_G.shape[0])
    energies = []
    for j, a in enumerate(A_G):
        e_new = _unit_energy(a, S_new)
        e_past = _unit_energy(a, S_past)
        energies.append((e_new, e_past))
        denom = lam * e_new + e_past
        if denom <= INERT_ENERGY:
            logger.warning(f"Rank-1 unit {j} is inert on all observed data; gamma set to 0")
            continue
        gammas[j] = min(max(lam * e_new / denom, 0.0), 1.0)
    logger.debug(f"Recalibration factors: {np.round(gammas, 6).tolist()}")
    return RescaleResult(gammas=gammas, lambda_used=float(lam), per_unit_energies=energies)


def objective_value(gamma: float, a, B_col, S_new: SecondMoment, S_past: SecondMoment, lam: float = DEFAULT_LAMBDA) -> float:
    """
    Recalibration objective of one rank-1 unit scaled by gamma

    lam * e_new * (gamma - 1)^2 * ||b||^2 + e_past * gamma^2 * ||b||^2
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b_sq = float(np.sum(np.asarray(B_col, dtype=np.float64) ** 2))
    e_new = _unit_energy(a, S_new)
    e_past = _unit_energy(a, S_past)
    return lam * e_new * (gamma - 1.0) ** 2 * b_sq + e_past * gamma ** 2 * b_sq


def rank1_units(layer: DualLoRALayer) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(column j of B_G, row j of A_G) for every unit of the general branch"""
    if layer.general is None:
        return []
    return [(layer.general.B[:, j].copy(), layer.general.A[j].copy()) for j in range(layer.general.rank)]


def integrate(W, layer: DualLoRALayer, result: RescaleResult) -> Matrix:
    """
    Backbone weight after folding in the trained branches

    Returns:
        W + w_G B_G Lambda_G A_G + B_I A_I; callers swap it in and discard
        the branches
    """
    W = as_matrix(W, "W")
    Lambda_G = result.Lambda_G if layer.general is not None else None
    return W + effective_update(layer, Lambda_G)


def naive_merge_running_average(W_prev, W_new_candidate, t: int) -> Matrix:
    """Running average ((t-1) W_prev + W_new_candidate) / t"""
    if t < 1:
        raise ConfigError(f"task index must be >= 1, got {t}")
    W_prev = as_matrix(W_prev, "W_prev")
    W_new_candidate = as_matrix(W_new_candidate, "W_new_candidate")
    if W_prev.shape != W_new_candidate.shape:
        raise DimensionMismatchError(f"cannot average shapes {W_prev.shape} and {W_new_candidate.shape}")
    return ((t - 1) * W_prev + W_new_candidate) / t
