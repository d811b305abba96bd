"""
Dual-branch low-rank adapter around a frozen linear layer

Y = X (W + w_G B_G A_G + B_I A_I)^T, with down-projections A anchored on
subspace bases and frozen, and up-projections B trained from zero.
"""
import hashlib
import logging
import os
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from subspace_cl.core.numerics import Matrix, as_matrix, thin_qr_rows
from subspace_cl.core.subspace import SubspaceBases, SubspaceKind
from subspace_cl.exceptions import DataIngestError, DimensionMismatchError

logger = logging.getLogger(__name__)

DEFAULT_W_G = 0.5
DEFAULT_RANK = 4
CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class LoRABranch:
    """One low-rank branch: down-projection A (r x D), up-projection B (D' x r)"""
    A: Matrix
    B: Matrix
    trainable_down: bool = False

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def delta(self) -> Matrix:
        return self.B @ self.A


@dataclass(frozen=True)
class DualLoRALayer:
    W: Matrix
    general: Optional[LoRABranch] = None
    isolated: Optional[LoRABranch] = None
    w_G: float = DEFAULT_W_G
    rank: int = DEFAULT_RANK

    @classmethod
    def frozen(cls, W, w_G: float = DEFAULT_W_G, rank: int = DEFAULT_RANK) -> "DualLoRALayer":
        W = as_matrix(W, "W")
        if not 1 <= rank <= W.shape[1]:
            raise DimensionMismatchError(f"rank {rank} must lie in [1, {W.shape[1]}]")
        return cls(W=W, w_G=w_G, rank=rank)

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]


def random_branch(layer: DualLoRALayer, rng: np.random.Generator) -> LoRABranch:
    """
    Plain low-rank branch with a random orthonormal, trainable down-projection

    Used by the single-branch baseline, which trains both A and B.
    """
    Q, R = np.linalg.qr(rng.standard_normal((layer.d_in, layer.rank)))
    A = (Q * np.sign(np.diag(R))).T
    return LoRABranch(A=np.ascontiguousarray(A), B=np.zeros((layer.d_out, layer.rank)), trainable_down=True)


def anchor(layer: DualLoRALayer, U_G: Optional[SubspaceBases], U_I: Optional[SubspaceBases]) -> DualLoRALayer:
    """
    Fix the down-projections on decomposed bases and reset the up-projections

    A_G = U_G^T, A_I = QR(U_I^T) (orthonormal rows, same span). A branch whose
    bases are None is disabled.

    Args:
        layer: layer holding the frozen weight
        U_G: general bases (orthonormal columns) or None
        U_I: isolated bases (or a baseline construction) or None

    Returns:
        Layer with zero up-projections and frozen anchored down-projections
    """
    general = None
    isolated = None
    if U_G is not None:
        if U_G.kind != SubspaceKind.GENERAL:
            raise DimensionMismatchError(f"general branch needs general bases, got {U_G.kind.value}")
        _check_bases_shape(layer, U_G, "general")
        general = LoRABranch(A=np.ascontiguousarray(U_G.U.T), B=np.zeros((layer.d_out, layer.rank)))
    if U_I is not None:
        if U_I.kind == SubspaceKind.GENERAL:
            raise DimensionMismatchError("isolated branch cannot be anchored on general bases")
        _check_bases_shape(layer, U_I, "isolated")
        isolated = LoRABranch(A=thin_qr_rows(U_I.U.T), B=np.zeros((layer.d_out, layer.rank)))
    return replace(layer, general=general, isolated=isolated)


def _check_bases_shape(layer: DualLoRALayer, bases: SubspaceBases, name: str) -> None:
    if bases.rank != layer.rank:
        raise DimensionMismatchError(f"{name} bases have rank {bases.rank}, branch rank is {layer.rank}")
    if bases.dim != layer.d_in:
        raise DimensionMismatchError(f"{name} bases have dimension {bases.dim}, layer input is {layer.d_in}")


def _check_input(layer: DualLoRALayer, X) -> Matrix:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != layer.d_in:
        raise DimensionMismatchError(f"input has shape {X.shape}, expected (N, {layer.d_in})")
    return X


def forward(layer: DualLoRALayer, X) -> Matrix:
    """Y = X W^T + w_G (X A_G^T) B_G^T + (X A_I^T) B_I^T"""
    X = _check_input(layer, X)
    Y = X @ layer.W.T
    if layer.general is not None:
        Y = Y + layer.w_G * ((X @ layer.general.A.T) @ layer.general.B.T)
    if layer.isolated is not None:
        Y = Y + (X @ layer.isolated.A.T) @ layer.isolated.B.T
    return Y


def grad_up(layer: DualLoRALayer, X, G) -> Tuple[Optional[Matrix], Optional[Matrix]]:
    """
    Exact gradients of the batch loss with respect to B_G and B_I

    Args:
        layer: anchored layer
        X: N x D layer input
        G: N x D' upstream gradient dL/dY

    Returns:
        (dL/dB_G, dL/dB_I); None for a disabled branch
    """
    X = _check_input(layer, X)
    G = np.asarray(G, dtype=np.float64).reshape(X.shape[0], layer.d_out)
    grad_general = None
    grad_isolated = None
    if layer.general is not None:
        grad_general = layer.w_G * (G.T @ (X @ layer.general.A.T))
    if layer.isolated is not None:
        grad_isolated = G.T @ (X @ layer.isolated.A.T)
    return grad_general, grad_isolated


def grad_down(layer: DualLoRALayer, X, G) -> Optional[Matrix]:
    """dL/dA_G for a general branch with a trainable down-projection"""
    X = _check_input(layer, X)
    if layer.general is None or not layer.general.trainable_down:
        return None
    G = np.asarray(G, dtype=np.float64).reshape(X.shape[0], layer.d_out)
    return layer.w_G * ((layer.general.B.T @ G.T) @ X)


def theorem1_predict(x, A, g, eta: float) -> Matrix:
    """
    Output change predicted for one gradient step on B with A fixed

    Returns:
        -eta * ||A x^T||^2 * g for a single sample x
    """
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    A = np.asarray(A, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64).reshape(1, -1)
    energy = float(np.sum((A @ x.T) ** 2))
    return -eta * energy * g


def theorem1_realize(x, W, A, B, g, eta: float) -> Matrix:
    """
    Output change actually produced by B' = B - eta g^T (x A^T)

    Companion to theorem1_predict: applies the explicit single-sample update
    and recomputes the forward pass.
    """
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    g = np.asarray(g, dtype=np.float64).reshape(1, -1)
    W = np.asarray(W, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    B_next = B - eta * (g.T @ (x @ A.T))
    before = x @ (W + B @ A).T
    after = x @ (W + B_next @ A).T
    return after - before


def effective_update(layer: DualLoRALayer, Lambda_G=None) -> Matrix:
    """
    Merged weight change w_G B_G Lambda_G A_G + B_I A_I

    Args:
        layer: trained layer
        Lambda_G: r x r diagonal with entries in [0, 1]; identity when None

    Returns:
        D' x D update
    """
    delta = np.zeros_like(layer.W)
    if layer.general is not None:
        r = layer.general.rank
        if Lambda_G is None:
            Lambda_G = np.eye(r)
        Lambda_G = np.asarray(Lambda_G, dtype=np.float64)
        if Lambda_G.shape != (r, r):
            raise DimensionMismatchError(f"Lambda_G has shape {Lambda_G.shape}, expected ({r}, {r})")
        diag = np.diag(Lambda_G)
        if np.any(Lambda_G - np.diag(diag)):
            raise DimensionMismatchError("Lambda_G must be diagonal")
        if np.any(diag < 0.0) or np.any(diag > 1.0):
            raise DimensionMismatchError("Lambda_G entries must lie in [0, 1]")
        delta = delta + layer.w_G * ((layer.general.B * diag) @ layer.general.A)
    if layer.isolated is not None:
        delta = delta + layer.isolated.delta()
    return delta


def frozen_checksum(layer: DualLoRALayer) -> str:
    """SHA-256 over W and the frozen down-projections"""
    sha256 = hashlib.sha256()
    sha256.update(np.ascontiguousarray(layer.W).tobytes())
    for branch in (layer.general, layer.isolated):
        if branch is not None and not branch.trainable_down:
            sha256.update(np.ascontiguousarray(branch.A).tobytes())
    return sha256.hexdigest()


def save_layer(layer: DualLoRALayer, path: str) -> None:
    """
    Write a layer checkpoint as an uncompressed .npz bundle

    Keys: version, d_in, d_out, rank, w_G, W, and for each enabled branch
    A_G/B_G (plus trainable_down_G) and A_I/B_I.
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    arrays = {
        "version": np.int64(CHECKPOINT_FORMAT_VERSION),
        "d_in": np.int64(layer.d_in),
        "d_out": np.int64(layer.d_out),
        "rank": np.int64(layer.rank),
        "w_G": np.float64(layer.w_G),
        "W": layer.W,
    }
    if layer.general is not None:
        arrays.update(A_G=layer.general.A, B_G=layer.general.B, trainable_down_G=np.bool_(layer.general.trainable_down))
    if layer.isolated is not None:
        arrays.update(A_I=layer.isolated.A, B_I=layer.isolated.B)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_layer(path: str) -> DualLoRALayer:
    """Read a checkpoint written by save_layer"""
    try:
        with np.load(path) as data:
            general = None
            isolated = None
            if "A_G" in data:
                general = LoRABranch(
                    A=np.array(data["A_G"]), B=np.array(data["B_G"]), trainable_down=bool(data["trainable_down_G"])
                )
            if "A_I" in data:
                isolated = LoRABranch(A=np.array(data["A_I"]), B=np.array(data["B_I"]))
            return DualLoRALayer(
                W=np.array(data["W"]),
                general=general,
                isolated=isolated,
                w_G=float(data["w_G"]),
                rank=int(data["rank"]),
            )
    except (OSError, KeyError, ValueError) as e:
        logger.error(f"Error loading layer checkpoint from {path}: {e}")
        raise DataIngestError(f"cannot load layer checkpoint from {path}: {e}") from e
