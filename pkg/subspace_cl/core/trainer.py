"""
Per-task optimisation with Gradient-Aligned Optimization

Each GAO step splits a batch into two label-disjoint subsets. Every subset
then takes a descent step evaluated at parameters perturbed along the other
subset's normalized gradient. Plain SGD is kept as the fallback and for
ablations.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from subspace_cl.config import TrainConfig
from subspace_cl.core.adapter import DualLoRALayer, forward, frozen_checksum, grad_down, grad_up
from subspace_cl.core.model import CosineClassifier, ce_loss_and_grads
from subspace_cl.exceptions import DimensionMismatchError, NonFiniteGradientError, NumericalError

logger = logging.getLogger(__name__)

PERTURBATION_FLOOR = 1e-12

Vector = np.ndarray
GradFn = Callable[["ParamSet", np.ndarray], Tuple[float, Vector]]


@dataclass(frozen=True)
class ParamSet:
    """Named trainable tensors with a fixed flatten/unflatten layout"""
    tensors: Dict[str, np.ndarray]

    @property
    def layout(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(name, value.shape) for name, value in self.tensors.items()]

    def flatten(self) -> Vector:
        if not self.tensors:
            return np.zeros(0)
        return np.concatenate([np.ravel(value) for value in self.tensors.values()])

    def unflatten(self, vector: Vector) -> "ParamSet":
        vector = np.asarray(vector, dtype=np.float64)
        size = sum(int(np.prod(shape)) for _, shape in self.layout)
        if vector.shape != (size,):
            raise DimensionMismatchError(f"vector has shape {vector.shape}, layout needs ({size},)")
        tensors = {}
        offset = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            tensors[name] = vector[offset:offset + n].reshape(shape).copy()
            offset += n
        return ParamSet(tensors)


@dataclass(frozen=True)
class LabelSplit:
    first: np.ndarray
    second: np.ndarray
    degenerate: bool = False


def split_label_disjoint(labels, rng: np.random.Generator) -> LabelSplit:
    """
    Partition a batch into two subsets with disjoint label sets

    The batch's classes are shuffled and split ceil(K/2) / floor(K/2);
    samples follow their label.

    Args:
        labels: class id per sample in the batch
        rng: generator driving the class shuffle

    Returns:
        Index arrays into the batch; a single-class batch gives an empty
        second subset and degenerate=True
    """
    labels = np.asarray(labels).ravel()
    if labels.size == 0:
        raise DimensionMismatchError("cannot split an empty batch")
    classes = np.unique(labels)
    shuffled = rng.permutation(classes)
    half = math.ceil(len(shuffled) / 2)
    in_first = np.isin(labels, shuffled[:half])
    first = np.flatnonzero(in_first)
    second = np.flatnonzero(~in_first)
    return LabelSplit(first=first, second=second, degenerate=len(classes) < 2)


def _checked(grad: Vector, phase: str, params: Vector) -> Vector:
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(
            "non-finite gradient, step aborted",
            {"phase": phase, "param_norm": float(np.linalg.norm(params)), "nan_count": int(np.isnan(grad).sum())},
        )
    return grad


def _perturbed(theta: Vector, grad: Vector, rho: float) -> Vector:
    if rho == 0.0:
        return theta
    sq_norm = float(grad @ grad)
    if sq_norm <= PERTURBATION_FLOOR:
        return theta
    return theta - rho * grad / sq_norm


def sgd_step(params: ParamSet, batch, eta: float, grad_fn: GradFn) -> ParamSet:
    theta = params.flatten()
    _, grad = grad_fn(params, batch)
    return params.unflatten(theta - eta * _checked(grad, "sgd", theta))


def gao_step(
    params: ParamSet,
    batch1,
    batch2,
    eta: float,
    rho: float,
    grad_fn: GradFn,
    rho_second: Optional[float] = None,
) -> ParamSet:
    """
    One two-phase Gradient-Aligned Optimization step

    Phase 1 perturbs theta by -rho g2/||g2||^2 (g2 from batch2) and descends
    on batch1 using the gradient at the perturbed point; phase 2 swaps the
    roles starting from the phase-1 result. Gradients at perturbed points are
    applied to the unperturbed parameters.

    Args:
        params: current parameters
        batch1: first label-disjoint subset (anything grad_fn accepts)
        batch2: second subset
        eta: learning rate
        rho: perturbation scale of phase 1 (and phase 2 unless rho_second)
        grad_fn: (params, batch) -> (loss, flat gradient)
        rho_second: separate scale for phase 2

    Returns:
        Parameters after both phases
    """
    rho_second = rho if rho_second is None else rho_second
    theta = params.flatten()

    if rho == 0.0:
        perturbed = params
    else:
        _, g2 = grad_fn(params, batch2)
        perturbed = params.unflatten(_perturbed(theta, _checked(g2, "perturb-1", theta), rho))
    _, g1 = grad_fn(perturbed, batch1)
    theta_plus = theta - eta * _checked(g1, "descend-1", theta)
    params_plus = params.unflatten(theta_plus)

    if rho_second == 0.0:
        perturbed = params_plus
    else:
        _, g1_plus = grad_fn(params_plus, batch1)
        perturbed = params.unflatten(_perturbed(theta_plus, _checked(g1_plus, "perturb-2", theta_plus), rho_second))
    _, g2_plus = grad_fn(perturbed, batch2)
    return params.unflatten(theta_plus - eta * _checked(g2_plus, "descend-2", theta_plus))


def learning_rate(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Cosine annealing from cfg.eta to 0 over total_steps, or constant"""
    if cfg.schedule == "constant" or total_steps <= 0:
        return cfg.eta
    return 0.5 * cfg.eta * (1.0 + math.cos(math.pi * step / total_steps))


def gradient_cosine(g1: Vector, g2: Vector) -> float:
    denom = float(np.linalg.norm(g1) * np.linalg.norm(g2))
    if denom <= 0.0:
        return 0.0
    return float(g1 @ g2) / denom


class TaskObjective:
    """
    Cross-entropy of one task's training set as a function of the trainables

    Trainables are B_G, B_I, the classifier prototypes and, for a branch with a
    trainable down-projection, A_G. The softmax is restricted to the task's
    classes.
    """

    def __init__(self, layer: DualLoRALayer, classifier: CosineClassifier, X, labels, class_mask: Sequence[int]):
        self.layer = layer
        self.classifier = classifier
        self.X = np.asarray(X, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.class_mask = [int(c) for c in class_mask]
        if self.X.shape[0] != self.labels.shape[0]:
            raise DimensionMismatchError(f"{self.X.shape[0]} feature rows for {self.labels.shape[0]} labels")

    def initial_params(self) -> ParamSet:
        tensors = {}
        if self.layer.general is not None:
            tensors["B_G"] = self.layer.general.B.copy()
            if self.layer.general.trainable_down:
                tensors["A_G"] = self.layer.general.A.copy()
        if self.layer.isolated is not None:
            tensors["B_I"] = self.layer.isolated.B.copy()
        tensors["prototypes"] = self.classifier.prototypes.copy()
        return ParamSet(tensors)

    def with_params(self, params: ParamSet) -> Tuple[DualLoRALayer, CosineClassifier]:
        """Layer and classifier carrying the given trainables"""
        t = params.tensors
        general = self.layer.general
        isolated = self.layer.isolated
        if general is not None:
            general = replace(general, B=t["B_G"], A=t.get("A_G", general.A))
        if isolated is not None:
            isolated = replace(isolated, B=t["B_I"])
        classifier = CosineClassifier(
            prototypes=t["prototypes"],
            temperature=self.classifier.temperature,
            class_registry=dict(self.classifier.class_registry),
        )
        return replace(self.layer, general=general, isolated=isolated), classifier

    def loss_and_grad(self, params: ParamSet, indices) -> Tuple[float, Vector]:
        layer, classifier = self.with_params(params)
        X = self.X[indices]
        Y = forward(layer, X)
        loss, dY, dC = ce_loss_and_grads(classifier, Y, self.labels[indices], self.class_mask)
        dB_G, dB_I = grad_up(layer, X, dY)
        grads = {}
        for name in params.tensors:
            if name == "B_G":
                grads[name] = dB_G
            elif name == "A_G":
                grads[name] = grad_down(layer, X, dY)
            elif name == "B_I":
                grads[name] = dB_I
            elif name == "prototypes":
                grads[name] = dC
        return loss, ParamSet(grads).flatten()


@dataclass
class TrainingLog:
    """Per-step records (epoch, step, loss, grad_cosine, eta, rho) and per-epoch means"""
    steps: List[Dict[str, float]] = field(default_factory=list)

    def record(self, **values) -> None:
        self.steps.append(values)

    def to_frame(self) -> pd.DataFrame:
        columns = ["epoch", "step", "loss", "grad_cosine", "eta", "rho", "degenerate"]
        return pd.DataFrame(self.steps, columns=columns)

    def epoch_summary(self) -> pd.DataFrame:
        frame = self.to_frame()
        if frame.empty:
            return pd.DataFrame(columns=["epoch", "loss", "grad_cosine"])
        return frame.groupby("epoch", as_index=False)[["loss", "grad_cosine"]].mean()

    @property
    def final_grad_cosine(self) -> float:
        summary = self.epoch_summary()
        return float(summary["grad_cosine"].iloc[-1]) if not summary.empty else float("nan")


@dataclass
class TrainResult:
    layer: DualLoRALayer
    classifier: CosineClassifier
    log: TrainingLog


def train_task(
    layer: DualLoRALayer,
    classifier: CosineClassifier,
    X,
    labels,
    class_mask: Sequence[int],
    cfg: TrainConfig,
) -> TrainResult:
    """
    Train the up-projections and prototypes on one task

    Runs cfg.epochs passes of shuffled mini-batches. With the GAO optimizer
    each batch is split into label-disjoint halves for gao_step (single-class
    batches fall back to one SGD step); rho is drawn from U(0, rho_max) once
    per step. The learning rate is annealed per step. Every step logs the
    cosine between the two subsets' gradients at the pre-step parameters.

    Args:
        layer: anchored layer (down-projections frozen)
        classifier: classifier with this task's classes registered
        X: N x D pre-adaptation features of the task's training set
        labels: N class ids
        class_mask: this task's class ids
        cfg: training configuration (its seed drives shuffling, splits and rho)

    Returns:
        TrainResult with the trained layer and classifier and the training log
    """
    objective = TaskObjective(layer, classifier, X, labels, class_mask)
    rng = np.random.default_rng(cfg.seed)
    checksum = frozen_checksum(layer)
    params = objective.initial_params()
    log = TrainingLog()

    n = objective.X.shape[0]
    batches_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.epochs * batches_per_epoch
    step = 0
    grad_fn = objective.loss_and_grad

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            eta = learning_rate(cfg, step, total_steps)
            split = split_label_disjoint(objective.labels[batch], rng)
            rho = 0.0

            if split.degenerate:
                loss, _ = grad_fn(params, batch)
                cosine = float("nan")
                logger.warning(f"Single-class batch at epoch {epoch}, step {step}; plain SGD step")
                params = sgd_step(params, batch, eta, grad_fn)
            else:
                b1, b2 = batch[split.first], batch[split.second]
                loss1, g1 = grad_fn(params, b1)
                loss2, g2 = grad_fn(params, b2)
                loss = (len(b1) * loss1 + len(b2) * loss2) / len(batch)
                cosine = gradient_cosine(g1, g2)
                if cfg.optimizer == "gao":
                    rho = float(rng.uniform(0.0, cfg.rho_max))
                    rho_second = float(rng.uniform(0.0, cfg.rho_max)) if cfg.resample_rho_per_phase else None
                    params = gao_step(params, b1, b2, eta, rho, grad_fn, rho_second=rho_second)
                else:
                    params = sgd_step(params, batch, eta, grad_fn)

            log.record(epoch=epoch, step=step, loss=float(loss), grad_cosine=cosine, eta=eta, rho=rho,
                       degenerate=split.degenerate)
            step += 1

        if log.steps:
            summary = log.epoch_summary().iloc[-1]
            logger.debug(f"Epoch {epoch}: loss {summary['loss']:.4f}, grad cosine {summary['grad_cosine']:.4f}")

    trained_layer, trained_classifier = objective.with_params(params)
    if frozen_checksum(trained_layer) != checksum:
        raise NumericalError("frozen weights changed during training")
    return TrainResult(layer=trained_layer, classifier=trained_classifier, log=log)
