"""
Run registry helpers shared by the CLI, the API and the Celery tasks
"""
import json
import logging
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

from sqlalchemy import select

from subspace_cl.config import ExperimentConfig, config_fingerprint
from subspace_cl.database import ExperimentRun, SessionLocal, init_db

logger = logging.getLogger(__name__)


def _as_dict(run: ExperimentRun) -> Dict[str, Any]:
    return {
        "id": run.id,
        "fingerprint": run.fingerprint,
        "preset": run.preset,
        "seed": run.seed,
        "output_dir": run.output_dir,
        "status": run.status,
        "started_at": run.started_at,
        "ended_at": run.ended_at,
        "a_last": run.a_last,
        "a_avg": run.a_avg,
        "duration_seconds": run.duration_seconds,
        "notes": run.notes,
    }


def record_experiment_run(cfg: ExperimentConfig, status: str, notes: Optional[str] = None) -> int:
    """
    Record an experiment run in the database

    Args:
        cfg: config of the run
        status: status of the run
        notes: optional notes about the run

    Returns:
        ID of the new run record
    """
    init_db()
    with SessionLocal() as db:
        run = ExperimentRun(
            fingerprint=config_fingerprint(cfg),
            preset=cfg.preset,
            seed=cfg.seed,
            output_dir=cfg.output_dir,
            status=status,
            config_json=json.dumps(cfg.model_dump(mode="json"), sort_keys=True),
            notes=notes,
        )
        db.add(run)
        db.commit()
        logger.info(f"Recorded experiment run {run.id} ({status})")
        return run.id


def update_experiment_run(
    run_id: int,
    status: str,
    a_last: Optional[float] = None,
    a_avg: Optional[float] = None,
    duration_seconds: Optional[float] = None,
    notes: Optional[str] = None,
) -> None:
    """
    Update an experiment run record in the database

    Args:
        run_id: ID of the run to update
        status: new status of the run
        a_last: final all-seen accuracy
        a_avg: mean all-seen accuracy over sessions
        duration_seconds: wall-clock duration
        notes: optional notes about the run
    """
    with SessionLocal() as db:
        run = db.get(ExperimentRun, run_id)
        if run is None:
            logger.warning(f"Experiment run {run_id} not found, nothing to update")
            return
        run.status = status
        run.ended_at = datetime.now(timezone.utc)
        run.a_last = a_last
        run.a_avg = a_avg
        run.duration_seconds = duration_seconds
        run.notes = notes
        db.commit()


def get_experiment_runs(limit: int = 10) -> List[Dict[str, Any]]:
    """
    Get the latest experiment runs from the database

    Args:
        limit: maximum number of runs to return

    Returns:
        List of run records, newest first
    """
    init_db()
    with SessionLocal() as db:
        runs = db.execute(
            select(ExperimentRun).order_by(ExperimentRun.id.desc()).limit(limit)
        ).scalars().all()
        return [_as_dict(run) for run in runs]


def get_experiment_run(run_id: int) -> Optional[Dict[str, Any]]:
    init_db()
    with SessionLocal() as db:
        run = db.get(ExperimentRun, run_id)
        return _as_dict(run) if run is not None else None
