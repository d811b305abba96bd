"""
Synthetic correlated task streams and CSV ingestion

Class means mix a direction in a subspace shared by all tasks with a
direction in the task's own private subspace:

    mean = kappa * G z_c + (1 - kappa) * P_t w_c, rescaled to mean_norm

so kappa = 0 gives mutually orthogonal tasks and kappa = 1 puts every task
in the same shared subspace. Samples add isotropic Gaussian noise.
"""
import logging
import os
import re
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
import pandas as pd

from subspace_cl.config import StreamConfig
from subspace_cl.exceptions import ConfigError, DataIngestError

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")
ID_COLUMNS = ["task_id", "class_id", "split"]


@dataclass(frozen=True)
class TaskDataset:
    task_index: int
    class_ids: Tuple[int, ...]
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray

    @property
    def d_raw(self) -> int:
        return self.X_train.shape[1]


def _class_means(cfg: StreamConfig, shared: np.ndarray, private: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    means = []
    for _ in range(cfg.classes_per_task):
        mean = np.zeros(cfg.d_raw)
        if cfg.d_shared:
            z = rng.standard_normal(cfg.d_shared)
            mean += cfg.kappa * (shared @ (z / np.linalg.norm(z)))
        if cfg.d_private:
            w = rng.standard_normal(cfg.d_private)
            mean += (1.0 - cfg.kappa) * (private @ (w / np.linalg.norm(w)))
        norm = np.linalg.norm(mean)
        means.append(mean * (cfg.mean_norm / norm) if norm > 0 else mean)
    return np.array(means)


def _samples(means: np.ndarray, class_ids: List[int], per_class: int, sigma: float, rng: np.random.Generator):
    X = np.repeat(means, per_class, axis=0) + sigma * rng.standard_normal((len(class_ids) * per_class, means.shape[1]))
    y = np.repeat(np.asarray(class_ids, dtype=np.int64), per_class)
    return X, y


def generate(cfg: StreamConfig) -> List[TaskDataset]:
    """
    Build a class-balanced stream with disjoint label spaces

    The shared basis G and the private bases P_t come from one random
    orthonormal basis of the raw space, so all of them are mutually
    orthogonal. Task t draws from its own child seed of cfg.seed.

    Args:
        cfg: stream configuration

    Returns:
        One TaskDataset per task; task t owns class ids t*K .. t*K+K-1
    """
    needed = cfg.d_shared + cfg.num_tasks * cfg.d_private
    if needed > cfg.d_raw:
        raise ConfigError(f"dimension budget exceeded: {needed} > d_raw {cfg.d_raw}")

    root = np.random.SeedSequence(cfg.seed)
    basis_seq, *task_seqs = root.spawn(cfg.num_tasks + 1)
    Q, R = np.linalg.qr(np.random.default_rng(basis_seq).standard_normal((cfg.d_raw, cfg.d_raw)))
    Q = Q * np.sign(np.diag(R))
    shared = Q[:, :cfg.d_shared]

    datasets = []
    for t, seq in enumerate(task_seqs):
        rng = np.random.default_rng(seq)
        lo = cfg.d_shared + t * cfg.d_private
        private = Q[:, lo:lo + cfg.d_private]
        class_ids = [t * cfg.classes_per_task + c for c in range(cfg.classes_per_task)]
        means = _class_means(cfg, shared, private, rng)
        X_train, y_train = _samples(means, class_ids, cfg.train_samples_per_class, cfg.noise_sigma, rng)
        X_test, y_test = _samples(means, class_ids, cfg.test_samples_per_class, cfg.noise_sigma, rng)
        datasets.append(TaskDataset(t, tuple(class_ids), X_train, y_train, X_test, y_test))

    logger.info(f"Generated {cfg.num_tasks} tasks x {cfg.classes_per_task} classes (kappa={cfg.kappa}, seed={cfg.seed})")
    return datasets


def class_means(dataset: TaskDataset) -> np.ndarray:
    """Empirical training mean of every class, in class_ids order"""
    return np.array([dataset.X_train[dataset.y_train == c].mean(axis=0) for c in dataset.class_ids])


def export_csv(datasets: List[TaskDataset], path: str) -> None:
    """
    Write a stream as CSV: task_id, class_id, split, f0..f{d-1}

    Floats are written with round-trip precision, so ingest_csv reproduces
    the arrays exactly.
    """
    frames = []
    for ds in datasets:
        for split, X, y in (("train", ds.X_train, ds.y_train), ("test", ds.X_test, ds.y_test)):
            frame = pd.DataFrame(X, columns=[f"f{i}" for i in range(X.shape[1])])
            frame.insert(0, "split", split)
            frame.insert(0, "class_id", y)
            frame.insert(0, "task_id", ds.task_index)
            frames.append(frame)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if frames:
        pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format="%.17g")
    else:
        pd.DataFrame(columns=ID_COLUMNS).to_csv(path, index=False)
    logger.info(f"Exported {len(datasets)} tasks to {path}")


def ingest_csv(path: str) -> List[TaskDataset]:
    """
    Read a stream CSV written by export_csv (or by hand)

    Rows are grouped by task_id (ascending); row order is kept inside each
    task and split.

    Raises:
        DataIngestError: ragged rows, unknown split tags, non-numeric values or
            class ids shared by two tasks, naming the offending row (1-based,
            header is row 1)
    """
    logger.info(f"Ingesting task stream from {path}")
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        return []
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise DataIngestError(f"ragged row: {e}", row=int(match.group(1)) if match else None) from e
    except OSError as e:
        raise DataIngestError(f"cannot read {path}: {e}") from e

    missing = [c for c in ID_COLUMNS if c not in frame.columns]
    if missing:
        raise DataIngestError(f"missing columns {missing}")
    if frame.empty:
        return []
    feature_columns = [c for c in frame.columns if c not in ID_COLUMNS]
    if not feature_columns:
        raise DataIngestError("no feature columns")

    ragged = frame.isna().any(axis=1).to_numpy()
    if ragged.any():
        raise DataIngestError("ragged row (missing values)", row=int(np.argmax(ragged)) + 2)
    bad_split = ~frame["split"].isin(SPLITS).to_numpy()
    if bad_split.any():
        i = int(np.argmax(bad_split))
        raise DataIngestError(f"unknown split tag '{frame['split'].iloc[i]}'", row=i + 2)
    for column in ["task_id", "class_id"] + feature_columns:
        numeric = pd.to_numeric(frame[column], errors="coerce")
        if numeric.isna().any():
            raise DataIngestError(f"non-numeric value in column '{column}'", row=int(np.argmax(numeric.isna())) + 2)

    owner = frame.groupby("class_id")["task_id"].nunique()
    shared = owner[owner > 1]
    if not shared.empty:
        class_id = int(shared.index[0])
        first_row = int(np.flatnonzero(frame["class_id"].to_numpy() == class_id)[0]) + 2
        raise DataIngestError(f"class id {class_id} appears in more than one task", row=first_row)

    datasets = []
    for task_id, group in frame.groupby("task_id", sort=True):
        parts = {}
        for split in SPLITS:
            rows = group[group["split"] == split]
            X = rows[feature_columns].to_numpy(dtype=np.float64)
            y = rows["class_id"].to_numpy(dtype=np.int64)
            parts[split] = (X.reshape(-1, len(feature_columns)), y)
        class_ids = tuple(int(c) for c in np.unique(group["class_id"].to_numpy(dtype=np.int64)))
        datasets.append(TaskDataset(int(task_id), class_ids, *parts["train"], *parts["test"]))
    logger.info(f"Ingested {len(datasets)} tasks with {len(feature_columns)} features")
    return datasets
