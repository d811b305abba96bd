"""
Desk-scale classification model

A frozen random-projection feature extractor feeds the adapted linear layer,
whose output is scored by a cosine classifier. Loss gradients are analytic.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from subspace_cl.core.numerics import Matrix, as_matrix
from subspace_cl.exceptions import ConfigError, DimensionMismatchError

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 16.0
ZERO_NORM = 1e-12


@dataclass(frozen=True)
class FeatureExtractor:
    """X = relu(raw P^T) * scale with a frozen projection P (D x D_raw)"""
    P: Matrix
    scale: float = 1.0

    @classmethod
    def from_seed(cls, d_raw: int, d_model: int, seed, scale: float = 1.0, decay: float = 1.0) -> "FeatureExtractor":
        """Row k of P is scaled by decay**k, giving every task the same decaying unit spectrum."""
        rng = np.random.default_rng(seed)
        P = rng.standard_normal((d_model, d_raw)) / np.sqrt(d_raw)
        P *= (decay ** np.arange(d_model))[:, None]
        return cls(P=P, scale=scale)

    @property
    def d_raw(self) -> int:
        return self.P.shape[1]

    @property
    def d_model(self) -> int:
        return self.P.shape[0]


def extract(fe: FeatureExtractor, raw) -> Matrix:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != fe.d_raw:
        raise DimensionMismatchError(f"raw batch has shape {raw.shape}, expected (N, {fe.d_raw})")
    return np.maximum(raw @ fe.P.T, 0.0) * fe.scale


@dataclass
class CosineClassifier:
    """
    Prototype rows scored by scaled cosine similarity

    class_registry maps a class id to its prototype row; rows are appended as
    tasks introduce classes and are never removed.
    """
    prototypes: Matrix
    temperature: float = DEFAULT_TEMPERATURE
    class_registry: Dict[int, int] = field(default_factory=dict)

    @classmethod
    def empty(cls, d_out: int, temperature: float = DEFAULT_TEMPERATURE) -> "CosineClassifier":
        if temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {temperature}")
        return cls(prototypes=np.zeros((0, d_out)), temperature=temperature)

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def class_ids(self) -> List[int]:
        return sorted(self.class_registry, key=self.class_registry.get)

    def add_classes(self, class_ids: Iterable[int], rng: np.random.Generator) -> None:
        """Register new classes with random unit-direction prototypes"""
        class_ids = [int(c) for c in class_ids]
        clash = [c for c in class_ids if c in self.class_registry]
        if clash:
            raise ConfigError(f"classes already registered: {clash}")
        rows = rng.standard_normal((len(class_ids), self.prototypes.shape[1]))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        start = self.num_classes
        self.prototypes = np.vstack([self.prototypes, rows])
        for offset, c in enumerate(class_ids):
            self.class_registry[c] = start + offset

    def columns(self, class_ids: Sequence[int]) -> np.ndarray:
        try:
            return np.array([self.class_registry[int(c)] for c in class_ids], dtype=np.int64)
        except KeyError as e:
            raise DimensionMismatchError(f"class {e.args[0]} is not registered") from e

    def predict(self, Y, class_ids: Optional[Sequence[int]] = None) -> np.ndarray:
        """Class ids of the highest-scoring prototype among class_ids (all seen classes by default)"""
        class_ids = list(self.class_ids if class_ids is None else class_ids)
        scores = logits(self, Y)[:, self.columns(class_ids)]
        return np.asarray(class_ids, dtype=np.int64)[np.argmax(scores, axis=1)]


def _unit_rows(M: Matrix) -> Tuple[Matrix, np.ndarray]:
    norms = np.linalg.norm(M, axis=1)
    safe = np.where(norms > ZERO_NORM, norms, 1.0)
    unit = M / safe[:, None]
    unit[norms <= ZERO_NORM] = 0.0
    return unit, norms


def logits(clf: CosineClassifier, Y) -> Matrix:
    """
    s * cos(Y_n, C_k) for every row and prototype

    Rows of Y with norm <= 1e-12 get all-zero logits.
    """
    Y = as_matrix(np.atleast_2d(Y), "Y")
    if Y.shape[1] != clf.prototypes.shape[1]:
        raise DimensionMismatchError(f"features have width {Y.shape[1]}, prototypes {clf.prototypes.shape[1]}")
    Y_unit, _ = _unit_rows(Y)
    C_unit, _ = _unit_rows(clf.prototypes)
    return clf.temperature * (Y_unit @ C_unit.T)


def ce_loss_and_grads(clf: CosineClassifier, Y, labels, class_mask: Sequence[int]) -> Tuple[float, Matrix, Matrix]:
    """
    Mean softmax cross-entropy over the masked classes, with analytic gradients

    Args:
        clf: classifier
        Y: N x D' layer outputs
        labels: N class ids, each inside class_mask
        class_mask: class ids competing in the softmax

    Returns:
        (loss, dL/dY with shape N x D', dL/dC with shape K x D'); prototype
        rows outside the mask get exactly zero gradient
    """
    Y = as_matrix(np.atleast_2d(Y), "Y")
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.shape[0] != Y.shape[0]:
        raise DimensionMismatchError(f"{labels.shape[0]} labels for {Y.shape[0]} rows")
    mask = [int(c) for c in class_mask]
    position = {c: j for j, c in enumerate(mask)}
    outside = sorted({int(c) for c in labels if int(c) not in position})
    if outside:
        raise DimensionMismatchError(f"labels {outside} fall outside the class mask")
    cols = clf.columns(mask)
    targets = np.array([position[int(c)] for c in labels], dtype=np.int64)

    n = Y.shape[0]
    s = clf.temperature
    Y_unit, Y_norm = _unit_rows(Y)
    C = clf.prototypes[cols]
    C_unit, C_norm = _unit_rows(C)

    z = s * (Y_unit @ C_unit.T)
    loss = float(-np.mean(log_softmax(z, axis=1)[np.arange(n), targets]))

    dz = softmax(z, axis=1)
    dz[np.arange(n), targets] -= 1.0
    dz /= n

    # Through the row normalisation: d(v/|v|) = (I - u u^T)/|v|
    dY_unit = s * (dz @ C_unit)
    dY_unit -= np.sum(dY_unit * Y_unit, axis=1, keepdims=True) * Y_unit
    dY = np.where(Y_norm[:, None] > ZERO_NORM, dY_unit / np.where(Y_norm > ZERO_NORM, Y_norm, 1.0)[:, None], 0.0)

    dC_unit = s * (dz.T @ Y_unit)
    dC_unit -= np.sum(dC_unit * C_unit, axis=1, keepdims=True) * C_unit
    dC_masked = np.where(C_norm[:, None] > ZERO_NORM, dC_unit / np.where(C_norm > ZERO_NORM, C_norm, 1.0)[:, None], 0.0)

    dC = np.zeros_like(clf.prototypes)
    dC[cols] = dC_masked
    return loss, dY, dC
