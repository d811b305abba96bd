"""
Continual-learning experiment pipeline

This module runs a task stream through the per-task stages
(statistics, decompose, anchor, train, recalibrate, integrate, evaluate),
collects the metrics and energy diagnostics, and drives ablation sweeps.
"""
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from subspace_cl.config import (
    ABLATION_PRESETS,
    ExperimentConfig,
    apply_preset,
    config_fingerprint,
    update_config,
)
from subspace_cl.core.adapter import DualLoRALayer, anchor, random_branch
from subspace_cl.core.model import CosineClassifier, FeatureExtractor, ce_loss_and_grads, extract
from subspace_cl.core.numerics import Matrix, thin_qr_rows
from subspace_cl.core.recalib import (
    RescaleResult,
    integrate,
    naive_merge_running_average,
    rescale_factors,
)
from subspace_cl.core.stats import SecondMoment, SecondMomentStore, accumulate, finish_task, trace_energy
from subspace_cl.core.stream import TaskDataset, generate, ingest_csv
from subspace_cl.core.subspace import (
    SubspaceBases,
    SubspaceKind,
    default_jitter,
    general_bases,
    isolated_bases,
    null_space_baseline,
    projection_magnitude,
    random_orthonormal_bases,
    relative_energy,
)
from subspace_cl.core.trainer import train_task
from subspace_cl.exceptions import (
    DataIngestError,
    DimensionMismatchError,
    PipelineStageError,
    SubspaceToolkitError,
    UndefinedEnergyError,
)
from subspace_cl.pipelines.report import MetricsReport, emit_report, percent, write_energy_csv

logger = logging.getLogger(__name__)

STAGES = ("statistics", "decompose", "anchor", "train", "recalibrate", "integrate", "evaluate")

Predictor = Callable[[TaskDataset, Matrix], np.ndarray]


@contextmanager
def _stage(task: int, stage: str) -> Iterator[None]:
    logger.debug(f"Task {task}: {stage}")
    try:
        yield
    except (SubspaceToolkitError, ValueError, OSError, ArithmeticError, np.linalg.LinAlgError) as e:
        if isinstance(e, PipelineStageError):
            raise
        logger.error(f"Task {task}: stage '{stage}' failed: {e}")
        raise PipelineStageError(task, stage, e) from e


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Config whose run, stream and training seeds are all set to seed"""
    return update_config(cfg, {"seed": seed, "stream": {"seed": seed}, "train": {"seed": seed}})


def load_stream(cfg: ExperimentConfig) -> List[TaskDataset]:
    if cfg.ingest_path:
        datasets = ingest_csv(cfg.ingest_path)
    else:
        datasets = generate(cfg.stream)
    if not datasets:
        raise DataIngestError("task stream holds no tasks")
    return datasets


@dataclass
class ModelState:
    """Everything retained between tasks: extractor, backbone weight, classifier, statistics"""
    extractor: FeatureExtractor
    W: Matrix
    classifier: CosineClassifier
    store: SecondMomentStore


def initial_backbone(d_out: int, d_model: int, rng: np.random.Generator) -> Matrix:
    """Random semi-orthogonal D' x D weight (nearest to a Gaussian draw)"""
    U, _, Vt = np.linalg.svd(rng.standard_normal((d_out, d_model)), full_matrices=False)
    return U @ Vt


def _seed_streams(cfg: ExperimentConfig) -> Tuple[np.random.SeedSequence, ...]:
    # extractor, backbone, classifier, baseline branches
    return tuple(np.random.SeedSequence(cfg.seed).spawn(4))


def initial_state(cfg: ExperimentConfig, d_raw: int) -> ModelState:
    extractor_seq, backbone_seq, _, _ = _seed_streams(cfg)
    extractor = FeatureExtractor.from_seed(d_raw, cfg.d_model, extractor_seq, scale=cfg.extractor_scale,
                                         decay=cfg.extractor_decay)
    return ModelState(
        extractor=extractor,
        W=initial_backbone(cfg.d_out, cfg.d_model, np.random.default_rng(backbone_seq)),
        classifier=CosineClassifier.empty(cfg.d_out, cfg.temperature),
        store=SecondMomentStore.empty(cfg.d_model, cfg.retain_per_task),
    )


def task_train_seed(cfg: ExperimentConfig, t: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, cfg.train.seed, t]).generate_state(1)[0])


def decompose(
    cfg: ExperimentConfig,
    S_past: SecondMoment,
    S_new: SecondMoment,
    rng: np.random.Generator,
) -> Tuple[Optional[SubspaceBases], Optional[SubspaceBases]]:
    """
    Bases for the general and isolated branches of one task

    With an empty past (first task) the isolated branch is disabled, unless it
    is the only branch: then it uses a ridge-regularized ratio construction,
    which reduces to the top eigenvectors of S_new.

    Returns:
        (U_G, U_I); None for a disabled branch
    """
    first = S_past.row_count == 0
    U_G = general_bases(S_past, S_new, cfg.rank) if cfg.use_general else None
    if not cfg.use_isolated or (first and cfg.use_general):
        return U_G, None

    if cfg.isolation_method == "random_orthonormal":
        U_I = random_orthonormal_bases(S_new.dim, cfg.rank, rng)
    elif first:
        if cfg.isolation_method == "null_baseline":
            U_I = random_orthonormal_bases(S_new.dim, cfg.rank, rng)
        else:
            jitter = max(default_jitter(S_new, cfg.jitter_scale), np.finfo(float).tiny)
            U_I = isolated_bases(S_past, S_new, cfg.rank, jitter=jitter)
    elif cfg.isolation_method == "null_baseline":
        U_I = null_space_baseline(S_past, cfg.rank)
    else:
        U_I = isolated_bases(S_past, S_new, cfg.rank, jitter=default_jitter(S_past, cfg.jitter_scale))
    return U_G, U_I


def _orthonormal(bases: SubspaceBases) -> Matrix:
    if bases.kind in (SubspaceKind.GENERAL, SubspaceKind.NULL_BASELINE, SubspaceKind.RANDOM_BASELINE):
        return bases.U
    return thin_qr_rows(bases.U.T).T


def energy_diagnostics(
    task: int,
    S_past: SecondMoment,
    S_new: SecondMoment,
    rank: int,
    jitter_scale: float,
) -> List[Dict[str, Any]]:
    """
    Projection magnitude and relative energy of every candidate subspace

    The first task only has a general subspace and no relative energy; later
    tasks report the general, isolated and null-space constructions.
    """
    rank = min(rank, S_new.dim)
    if trace_energy(S_new) <= 0.0:
        logger.warning(f"Task {task}: statistic has zero energy, skipping diagnostics")
        return []
    candidates = [general_bases(S_past, S_new, rank)]
    if S_past.row_count > 0:
        candidates.append(isolated_bases(S_past, S_new, rank, jitter=default_jitter(S_past, jitter_scale)))
        candidates.append(null_space_baseline(S_past, rank))

    records = []
    for bases in candidates:
        U = _orthonormal(bases)
        try:
            relative = relative_energy(S_new, S_past, U)
        except UndefinedEnergyError:
            relative = float("nan")
        records.append({
            "task": task,
            "kind": bases.kind.value,
            "rank": rank,
            "projection_magnitude": projection_magnitude(S_new, U),
            "relative_energy": relative,
        })
    return records


def anchor_layer(
    cfg: ExperimentConfig,
    W: Matrix,
    U_G: Optional[SubspaceBases],
    U_I: Optional[SubspaceBases],
    rng: np.random.Generator,
) -> DualLoRALayer:
    layer = DualLoRALayer.frozen(W, w_G=cfg.w_G, rank=cfg.rank)
    if cfg.trainable_down:
        return replace(layer, general=random_branch(layer, rng))
    return anchor(layer, U_G, U_I)


def recalibrate(cfg: ExperimentConfig, layer: DualLoRALayer, S_new: SecondMoment, S_past: SecondMoment) -> RescaleResult:
    if layer.general is None or cfg.merge_method != "closed_form":
        return RescaleResult.identity(cfg.rank)
    return rescale_factors(layer.general.A, S_new, S_past, cfg.lam)


def merge(cfg: ExperimentConfig, W: Matrix, layer: DualLoRALayer, rescale: RescaleResult, t: int) -> Matrix:
    if cfg.merge_method == "running_average":
        return naive_merge_running_average(W, integrate(W, layer, RescaleResult.identity(cfg.rank)), t)
    return integrate(W, layer, rescale)


@dataclass
class SessionEvaluation:
    """Per-task (correct, total) counts after one session, plus the raw predictions"""
    counts: List[Tuple[int, int]] = field(default_factory=list)
    predictions: List[Dict[str, int]] = field(default_factory=list)

    @property
    def accuracies(self) -> List[float]:
        return [percent(c, n) for c, n in self.counts]

    @property
    def all_seen_accuracy(self) -> float:
        return percent(sum(c for c, _ in self.counts), sum(n for _, n in self.counts))


def evaluate(
    extractor: FeatureExtractor,
    W: Matrix,
    classifier: CosineClassifier,
    tasks: Sequence[TaskDataset],
    predictor: Optional[Predictor] = None,
) -> SessionEvaluation:
    """
    Accuracy of the merged backbone on the test sets of all seen tasks

    Predictions use only W and the cosine classifier over every seen class.

    Args:
        extractor: frozen feature extractor
        W: backbone weight after integration
        classifier: classifier holding every seen class
        tasks: seen tasks, in order
        predictor: replaces the classifier argmax, called as predictor(task, Y)

    Returns:
        SessionEvaluation with one (correct, total) pair per task

    Raises:
        DimensionMismatchError: when a task has an empty test set
    """
    evaluation = SessionEvaluation()
    for position, ds in enumerate(tasks, start=1):
        if ds.X_test.shape[0] == 0:
            raise DimensionMismatchError(f"task {position} has an empty test set")
        Y = extract(extractor, ds.X_test) @ W.T
        predicted = predictor(ds, Y) if predictor is not None else classifier.predict(Y)
        predicted = np.asarray(predicted, dtype=np.int64)
        evaluation.counts.append((int(np.sum(predicted == ds.y_test)), int(ds.y_test.shape[0])))
        evaluation.predictions.extend(
            {"task": position, "label": int(label), "predicted": int(guess)}
            for label, guess in zip(ds.y_test, predicted)
        )
    return evaluation


def _masked_loss(extractor: FeatureExtractor, W: Matrix, classifier: CosineClassifier,
                 tasks: Sequence[TaskDataset]) -> float:
    X = np.vstack([extract(extractor, ds.X_test) for ds in tasks])
    labels = np.concatenate([ds.y_test for ds in tasks])
    mask = [c for ds in tasks for c in ds.class_ids]
    loss, _, _ = ce_loss_and_grads(classifier, X @ W.T, labels, mask)
    return loss


def interpolation_losses(
    task: int,
    state: ModelState,
    layer: DualLoRALayer,
    tasks: Sequence[TaskDataset],
    steps: int,
) -> List[Dict[str, Any]]:
    """
    Past-task and current-task loss along W + alpha * w_G B_G A_G, alpha in [0, 1]

    Past tasks are scored over their own classes, the current task over its
    classes.
    """
    if layer.general is None or steps < 2 or len(tasks) < 2:
        return []
    step = layer.w_G * layer.general.delta()
    records = []
    for alpha in np.linspace(0.0, 1.0, steps):
        W_alpha = state.W + alpha * step
        records.append({
            "task": task,
            "alpha": float(alpha),
            "past_loss": _masked_loss(state.extractor, W_alpha, state.classifier, tasks[:-1]),
            "current_loss": _masked_loss(state.extractor, W_alpha, state.classifier, tasks[-1:]),
        })
    return records


def run_experiment(
    cfg: ExperimentConfig,
    datasets: Optional[List[TaskDataset]] = None,
    predictor: Optional[Predictor] = None,
) -> MetricsReport:
    """
    Run every task of the stream and collect metrics

    Per task: collect the statistic on pre-adaptation features, decompose,
    anchor, train, recalibrate, integrate into W, update the statistics store
    and evaluate on all seen test sets. Branches are discarded after
    integration.

    Args:
        cfg: validated experiment config
        datasets: task stream; built from cfg when None
        predictor: evaluation override (see evaluate)

    Returns:
        MetricsReport for the run

    Raises:
        PipelineStageError: naming the task and stage that failed
    """
    started = time.perf_counter()
    datasets = datasets if datasets is not None else load_stream(cfg)
    state = initial_state(cfg, datasets[0].d_raw)
    _, _, classifier_seq, branch_seq = _seed_streams(cfg)
    classifier_rng = np.random.default_rng(classifier_seq)
    branch_rng = np.random.default_rng(branch_seq)
    report = MetricsReport(config=cfg.model_dump(mode="json"), fingerprint=config_fingerprint(cfg))

    logger.info(f"Running {len(datasets)} tasks (preset={cfg.preset}, seed={cfg.seed})")
    for t, ds in enumerate(datasets, start=1):
        S_past = state.store.cumulative_past
        with _stage(t, "statistics"):
            X_train = extract(state.extractor, ds.X_train)
            S_new = accumulate(SecondMoment.zeros(cfg.d_model), X_train)
            report.energy.extend(energy_diagnostics(t, S_past, S_new, cfg.rank, cfg.jitter_scale))

        with _stage(t, "decompose"):
            U_G, U_I = decompose(cfg, S_past, S_new, branch_rng)

        with _stage(t, "anchor"):
            layer = anchor_layer(cfg, state.W, U_G, U_I, branch_rng)
            state.classifier.add_classes(ds.class_ids, classifier_rng)

        with _stage(t, "train"):
            train_cfg = cfg.train.model_copy(update={"seed": task_train_seed(cfg, t)})
            result = train_task(layer, state.classifier, X_train, ds.y_train, ds.class_ids, train_cfg)
            layer, state.classifier = result.layer, result.classifier
            report.training.extend({"task": t, **row} for row in result.log.steps)
            if cfg.interp_steps:
                report.interpolation.extend(
                    interpolation_losses(t, state, layer, datasets[:t], cfg.interp_steps)
                )

        with _stage(t, "recalibrate"):
            rescale = recalibrate(cfg, layer, S_new, S_past)
            for unit, (e_new, e_past) in enumerate(rescale.per_unit_energies):
                report.gammas.append({
                    "task": t, "unit": unit, "e_new": e_new, "e_past": e_past, "gamma": float(rescale.gammas[unit]),
                })

        with _stage(t, "integrate"):
            state.W = merge(cfg, state.W, layer, rescale, t)
            state.store = finish_task(state.store, S_new)

        with _stage(t, "evaluate"):
            evaluation = evaluate(state.extractor, state.W, state.classifier, datasets[:t], predictor)
            report.accuracy_records.extend(
                {"session": t, "task": i, "correct": c, "total": n, "accuracy": percent(c, n)}
                for i, (c, n) in enumerate(evaluation.counts, start=1)
            )
            report.session_accuracy.append(evaluation.all_seen_accuracy)
            report.predictions = evaluation.predictions

        logger.info(f"Session {t}: all-seen accuracy {evaluation.all_seen_accuracy:.2f}")

    report.wall_clock_seconds = time.perf_counter() - started
    logger.info(f"Experiment finished: A_last {report.A_last:.2f}, A_avg {report.A_avg:.2f}")
    return report


def run_diagnostics(cfg: ExperimentConfig, datasets: Optional[List[TaskDataset]] = None) -> List[Dict[str, Any]]:
    """
    Energy-only pass over the stream: statistics and subspace diagnostics, no training

    Features come from the same frozen extractor run_experiment uses.
    """
    datasets = datasets if datasets is not None else load_stream(cfg)
    state = initial_state(cfg, datasets[0].d_raw)
    records = []
    for t, ds in enumerate(datasets, start=1):
        with _stage(t, "statistics"):
            S_new = accumulate(SecondMoment.zeros(cfg.d_model), extract(state.extractor, ds.X_train))
        with _stage(t, "decompose"):
            records.extend(energy_diagnostics(t, state.store.cumulative_past, S_new, cfg.rank, cfg.jitter_scale))
        state.store = finish_task(state.store, S_new)
    return records


def run_diagnostics_pipeline(cfg: ExperimentConfig) -> Dict[str, Any]:
    records = run_diagnostics(cfg)
    path = os.path.join(cfg.output_dir, "energy.csv")
    write_energy_csv(records, path)
    logger.info(f"Wrote {len(records)} energy records to {path}")
    return {"success": True, "output": path, "records": len(records)}


def run_ablation(
    cfg: ExperimentConfig,
    seeds: Sequence[int],
    presets: Optional[Sequence[str]] = None,
    emit: bool = True,
) -> pd.DataFrame:
    """
    Run every preset for every seed

    Each run writes its report under <output_dir>/<preset>/seed_<seed> when
    emit is set; summary.csv in output_dir holds the median A_last and A_avg
    per preset.

    Returns:
        One row per (preset, seed) with A_last and A_avg
    """
    presets = list(presets) if presets is not None else list(ABLATION_PRESETS)
    rows = []
    for name in presets:
        for seed in seeds:
            run_cfg = with_seed(apply_preset(cfg, name), seed)
            run_cfg = update_config(run_cfg, {"output_dir": os.path.join(cfg.output_dir, name, f"seed_{seed}")})
            report = run_experiment(run_cfg)
            if emit:
                emit_report(report, run_cfg.output_dir)
            rows.append({"preset": name, "seed": seed, "A_last": report.A_last, "A_avg": report.A_avg})
            logger.info(f"Ablation {name} seed {seed}: A_last {report.A_last:.2f}")

    frame = pd.DataFrame(rows, columns=["preset", "seed", "A_last", "A_avg"])
    if emit:
        summary = frame.groupby("preset", sort=False)[["A_last", "A_avg"]].median().reset_index()
        os.makedirs(cfg.output_dir, exist_ok=True)
        summary.to_csv(os.path.join(cfg.output_dir, "summary.csv"), index=False, float_format="%.17g")
    return frame


def run_experiment_pipeline(cfg: ExperimentConfig, record: bool = False) -> Dict[str, Any]:
    """
    Run one experiment, write its report and optionally record it in the run registry

    Args:
        cfg: validated experiment config
        record: store the run in the experiment_runs table

    Returns:
        Dictionary with the run results
    """
    from subspace_cl.pipelines.utils import record_experiment_run, update_experiment_run

    fingerprint = config_fingerprint(cfg)
    run_id = record_experiment_run(cfg, "running") if record else None
    results: Dict[str, Any] = {
        "success": False,
        "run_id": run_id,
        "fingerprint": fingerprint,
        "output_dir": cfg.output_dir,
        "A_last": None,
        "A_avg": None,
        "duration_seconds": 0.0,
        "errors": [],
    }
    try:
        report = run_experiment(cfg)
        emit_report(report, cfg.output_dir)
        results.update(success=True, A_last=report.A_last, A_avg=report.A_avg,
                       duration_seconds=report.wall_clock_seconds)
    except SubspaceToolkitError as e:
        logger.error(f"Experiment {fingerprint[:12]} failed: {e}")
        results["errors"].append(str(e))
        if run_id is not None:
            update_experiment_run(run_id, "failed", notes=str(e))
        raise
    if run_id is not None:
        update_experiment_run(run_id, "completed", a_last=report.A_last, a_avg=report.A_avg,
                              duration_seconds=report.wall_clock_seconds)
    return results
