"""
Second-moment statistics of adapted-layer inputs

Uncentered Gram matrices S = X^T X accumulated per task and summed over past
tasks. Everything is kept in float64 so the Cholesky factor of the past
statistic stays well conditioned.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import List

import numpy as np

from subspace_cl.core.numerics import Matrix, symmetrize
from subspace_cl.exceptions import DataIngestError, DimensionMismatchError

logger = logging.getLogger(__name__)

STORE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SecondMoment:
    """Gram matrix of accumulated feature rows and the number of rows"""
    S: Matrix
    row_count: int = 0

    @classmethod
    def zeros(cls, dim: int) -> "SecondMoment":
        return cls(S=np.zeros((dim, dim), dtype=np.float64), row_count=0)

    @property
    def dim(self) -> int:
        return self.S.shape[0]

    def merge(self, other: "SecondMoment") -> "SecondMoment":
        """Combine statistics accumulated by independent writers"""
        if other.dim != self.dim:
            raise DimensionMismatchError(f"cannot merge statistics of dimension {self.dim} and {other.dim}")
        return SecondMoment(S=symmetrize(self.S + other.S), row_count=self.row_count + other.row_count)


@dataclass(frozen=True)
class SecondMomentStore:
    """
    Statistics of completed tasks

    cumulative_past is S^{1:t-1}. per_task is only filled when retain_per_task
    is set; in cumulative-only mode the footprint depends on the dimension alone.
    """
    cumulative_past: SecondMoment
    per_task: List[SecondMoment] = field(default_factory=list)
    retain_per_task: bool = True
    task_count: int = 0

    @classmethod
    def empty(cls, dim: int, retain_per_task: bool = True) -> "SecondMomentStore":
        return cls(cumulative_past=SecondMoment.zeros(dim), retain_per_task=retain_per_task)

    @property
    def dim(self) -> int:
        return self.cumulative_past.dim

    @property
    def nbytes(self) -> int:
        return self.cumulative_past.S.nbytes + sum(m.S.nbytes for m in self.per_task)


def accumulate(m: SecondMoment, X) -> SecondMoment:
    """
    Add a batch of feature rows to a statistic

    Args:
        m: statistic to extend
        X: N x D batch of feature rows (any float precision)

    Returns:
        New statistic with S + X^T X and row_count + N
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != m.dim:
        raise DimensionMismatchError(f"feature batch has shape {X.shape}, expected (N, {m.dim})")
    return SecondMoment(S=symmetrize(m.S + X.T @ X), row_count=m.row_count + X.shape[0])


def finish_task(store: SecondMomentStore, m: SecondMoment) -> SecondMomentStore:
    """
    Fold one finished task's statistic into the store

    Args:
        store: statistics of tasks 1..t-1
        m: statistic accumulated for task t only

    Returns:
        Store whose cumulative_past covers tasks 1..t
    """
    if m.dim != store.dim:
        raise DimensionMismatchError(f"task statistic has dimension {m.dim}, store has {store.dim}")
    per_task = list(store.per_task) + [m] if store.retain_per_task else []
    logger.debug(f"Finished task {store.task_count + 1} with {m.row_count} feature rows")
    return SecondMomentStore(
        cumulative_past=store.cumulative_past.merge(m),
        per_task=per_task,
        retain_per_task=store.retain_per_task,
        task_count=store.task_count + 1,
    )


def trace_energy(m: SecondMoment) -> float:
    """Total feature energy ||X||_F^2 = tr(S)"""
    return float(np.trace(m.S))


def save_store(store: SecondMomentStore, path: str) -> None:
    """
    Write a store as an uncompressed .npz bundle

    Keys: version, dim, task_count, retain_per_task, cumulative (D x D,
    row-major), cumulative_rows, per_task (T x D x D), per_task_rows (T).
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    dim = store.dim
    per_task = np.stack([m.S for m in store.per_task]) if store.per_task else np.zeros((0, dim, dim))
    with open(path, "wb") as f:
        np.savez(
            f,
            version=np.int64(STORE_FORMAT_VERSION),
            dim=np.int64(dim),
            task_count=np.int64(store.task_count),
            retain_per_task=np.bool_(store.retain_per_task),
            cumulative=store.cumulative_past.S,
            cumulative_rows=np.int64(store.cumulative_past.row_count),
            per_task=per_task,
            per_task_rows=np.array([m.row_count for m in store.per_task], dtype=np.int64),
        )


def load_store(path: str) -> SecondMomentStore:
    """Read a store written by save_store"""
    try:
        with np.load(path) as data:
            if int(data["version"]) != STORE_FORMAT_VERSION:
                raise DataIngestError(f"unsupported store format version {int(data['version'])} in {path}")
            per_task = [
                SecondMoment(S=np.array(S), row_count=int(rows))
                for S, rows in zip(data["per_task"], data["per_task_rows"])
            ]
            return SecondMomentStore(
                cumulative_past=SecondMoment(S=np.array(data["cumulative"]), row_count=int(data["cumulative_rows"])),
                per_task=per_task,
                retain_per_task=bool(data["retain_per_task"]),
                task_count=int(data["task_count"]),
            )
    except (OSError, KeyError, ValueError) as e:
        logger.error(f"Error loading statistics store from {path}: {e}")
        raise DataIngestError(f"cannot load statistics store from {path}: {e}") from e
