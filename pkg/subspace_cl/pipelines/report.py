"""
Experiment reports

A run produces one MetricsReport, written by emit_report as a JSON tree plus
CSV tables. Everything except timing.json is a pure function of the config
and seed, so repeated runs give byte-identical files.

Files (schema version 1):
    report.json          config echo, fingerprint, accuracy matrix, A_last, A_avg,
                         energy diagnostics, gamma traces, per-epoch training summary
    accuracy_matrix.csv  session, task, correct, total, accuracy
    energy.csv           task, kind, rank, projection_magnitude, relative_energy
    gammas.csv           task, unit, e_new, e_past, gamma
    predictions.csv      task, label, predicted (final session)
    training_log.csv     task, epoch, step, loss, grad_cosine, eta, rho, degenerate
    interpolation.csv    task, alpha, past_loss, current_loss
    timing.json          wall-clock seconds
"""
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from subspace_cl.exceptions import DataIngestError, ReportIOError

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
FLOAT_FORMAT = "%.17g"

ACCURACY_COLUMNS = ["session", "task", "correct", "total", "accuracy"]
ENERGY_COLUMNS = ["task", "kind", "rank", "projection_magnitude", "relative_energy"]
GAMMA_COLUMNS = ["task", "unit", "e_new", "e_past", "gamma"]
PREDICTION_COLUMNS = ["task", "label", "predicted"]
TRAINING_COLUMNS = ["task", "epoch", "step", "loss", "grad_cosine", "eta", "rho", "degenerate"]
INTERPOLATION_COLUMNS = ["task", "alpha", "past_loss", "current_loss"]


def percent(correct: int, total: int) -> float:
    return 100.0 * correct / total


@dataclass
class MetricsReport:
    config: Dict[str, Any]
    fingerprint: str
    accuracy_records: List[Dict[str, Any]] = field(default_factory=list)
    session_accuracy: List[float] = field(default_factory=list)
    energy: List[Dict[str, Any]] = field(default_factory=list)
    gammas: List[Dict[str, Any]] = field(default_factory=list)
    predictions: List[Dict[str, Any]] = field(default_factory=list)
    training: List[Dict[str, Any]] = field(default_factory=list)
    interpolation: List[Dict[str, Any]] = field(default_factory=list)
    wall_clock_seconds: float = 0.0

    @property
    def accuracy_matrix(self) -> List[List[float]]:
        """a[t][i]: accuracy on task i's test set after session t (i <= t)"""
        rows: Dict[int, List[float]] = {}
        for record in self.accuracy_records:
            rows.setdefault(record["session"], []).append(record["accuracy"])
        return [rows[s] for s in sorted(rows)]

    @property
    def A_last(self) -> float:
        return self.session_accuracy[-1] if self.session_accuracy else float("nan")

    @property
    def A_avg(self) -> float:
        return float(np.mean(self.session_accuracy)) if self.session_accuracy else float("nan")

    def training_summary(self) -> List[Dict[str, Any]]:
        frame = pd.DataFrame(self.training, columns=TRAINING_COLUMNS)
        if frame.empty:
            return []
        summary = frame.groupby(["task", "epoch"], as_index=False)[["loss", "grad_cosine"]].mean()
        return [_clean(record) for record in summary.to_dict(orient="records")]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "fingerprint": self.fingerprint,
            "config": self.config,
            "accuracy_matrix": self.accuracy_matrix,
            "session_accuracy": self.session_accuracy,
            "A_last": self.A_last,
            "A_avg": self.A_avg,
            "energy": [_clean(r) for r in self.energy],
            "gammas": [_clean(r) for r in self.gammas],
            "training_summary": self.training_summary(),
        }


def _clean(record: Dict[str, Any]) -> Dict[str, Any]:
    """JSON-safe copy: numpy scalars to Python, NaN to None"""
    cleaned = {}
    for key, value in record.items():
        if isinstance(value, np.generic):
            value = value.item()
        if isinstance(value, float) and np.isnan(value):
            value = None
        cleaned[key] = value
    return cleaned


def _write_csv(records: List[Dict[str, Any]], columns: List[str], path: str) -> None:
    pd.DataFrame(records, columns=columns).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def emit_report(report: MetricsReport, out_dir: str) -> Dict[str, str]:
    """
    Write every report file into out_dir

    Args:
        report: completed report
        out_dir: target directory, created if missing

    Returns:
        Mapping of file role to written path

    Raises:
        ReportIOError: when the directory or a file cannot be written
    """
    paths = {
        "report": os.path.join(out_dir, "report.json"),
        "accuracy": os.path.join(out_dir, "accuracy_matrix.csv"),
        "energy": os.path.join(out_dir, "energy.csv"),
        "gammas": os.path.join(out_dir, "gammas.csv"),
        "predictions": os.path.join(out_dir, "predictions.csv"),
        "training": os.path.join(out_dir, "training_log.csv"),
        "interpolation": os.path.join(out_dir, "interpolation.csv"),
        "timing": os.path.join(out_dir, "timing.json"),
    }
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(paths["report"], "w") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        _write_csv(report.accuracy_records, ACCURACY_COLUMNS, paths["accuracy"])
        _write_csv(report.energy, ENERGY_COLUMNS, paths["energy"])
        _write_csv(report.gammas, GAMMA_COLUMNS, paths["gammas"])
        _write_csv(report.predictions, PREDICTION_COLUMNS, paths["predictions"])
        _write_csv(report.training, TRAINING_COLUMNS, paths["training"])
        _write_csv(report.interpolation, INTERPOLATION_COLUMNS, paths["interpolation"])
        with open(paths["timing"], "w") as f:
            json.dump({"wall_clock_seconds": report.wall_clock_seconds}, f, indent=2)
    except OSError as e:
        logger.error(f"Error writing report to {out_dir}: {e}")
        raise ReportIOError(out_dir, str(e)) from e
    logger.info(f"Report written to {out_dir} (A_last {report.A_last:.2f}, A_avg {report.A_avg:.2f})")
    return paths


def write_energy_csv(records: List[Dict[str, Any]], path: str) -> None:
    """Energy diagnostics alone, for the energy-only pass"""
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        _write_csv(records, ENERGY_COLUMNS, path)
    except OSError as e:
        raise ReportIOError(path, str(e)) from e


def recompute_metrics(out_dir: str) -> Dict[str, float]:
    """
    Re-derive A_last and A_avg from emitted CSVs

    A_avg and the session accuracies come from accuracy_matrix.csv;
    A_last_predictions is recomputed from the raw final-session predictions.
    """
    try:
        accuracy = pd.read_csv(os.path.join(out_dir, "accuracy_matrix.csv"), float_precision="round_trip")
        predictions = pd.read_csv(os.path.join(out_dir, "predictions.csv"))
    except (OSError, pd.errors.EmptyDataError) as e:
        raise DataIngestError(f"cannot read report tables in {out_dir}: {e}") from e
    sessions = accuracy.groupby("session", sort=True)[["correct", "total"]].sum()
    session_accuracy = [percent(int(row.correct), int(row.total)) for row in sessions.itertuples()]
    correct = int((predictions["label"] == predictions["predicted"]).sum())
    return {
        "A_last": session_accuracy[-1] if session_accuracy else float("nan"),
        "A_avg": float(np.mean(session_accuracy)) if session_accuracy else float("nan"),
        "A_last_predictions": percent(correct, len(predictions)) if len(predictions) else float("nan"),
    }


def load_report(out_dir: str) -> Optional[Dict[str, Any]]:
    path = os.path.join(out_dir, "report.json")
    if not os.path.exists(path):
        return None
    with open(path, "r") as f:
        return json.load(f)
