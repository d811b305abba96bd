"""
Shared fixtures

The run registry is pointed at a throwaway SQLite file before any package
module is imported.
"""
import os
import tempfile

_REGISTRY_DIR = tempfile.mkdtemp(prefix="subspace_cl_tests_")
os.environ["DATABASE_URL"] = f"sqlite:///{os.path.join(_REGISTRY_DIR, 'runs.db')}"
os.environ.setdefault("SUBSPACE_CL_OUTPUT_ROOT", os.path.join(_REGISTRY_DIR, "runs"))

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from subspace_cl.config import ExperimentConfig, load_config  # noqa: E402
from subspace_cl.core.stats import SecondMoment, accumulate  # noqa: E402

SMALL_OVERRIDES = {
    "stream": {
        "num_tasks": 3,
        "classes_per_task": 3,
        "train_samples_per_class": 20,
        "test_samples_per_class": 10,
        "d_raw": 16,
        "d_shared": 4,
        "d_private": 3,
        "kappa": 0.75,
    },
    "d_model": 12,
    "d_out": 12,
    "rank": 3,
    "train": {"epochs": 2, "batch_size": 16},
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_overrides(tmp_path):
    overrides = {**SMALL_OVERRIDES, "output_dir": str(tmp_path / "run")}
    return overrides


@pytest.fixture
def small_config(small_overrides) -> ExperimentConfig:
    return load_config(overrides=small_overrides)


def random_psd(rng: np.random.Generator, dim: int, rows: int = None) -> SecondMoment:
    """Statistic of a random Gaussian feature batch"""
    rows = rows if rows is not None else 3 * dim
    return accumulate(SecondMoment.zeros(dim), rng.standard_normal((rows, dim)))


def random_spd_pair(rng: np.random.Generator, dim: int):
    """(S_past, S_new) with anisotropic, full-rank past statistics"""
    scales = np.exp(rng.uniform(-1.0, 1.0, size=dim))
    past = accumulate(SecondMoment.zeros(dim), rng.standard_normal((4 * dim, dim)) * scales)
    new = accumulate(SecondMoment.zeros(dim), rng.standard_normal((2 * dim, dim)))
    return past, new
