"""
FastAPI endpoints for experiment runs

This module provides REST API endpoints to launch experiments in the background
and to browse the run registry and its reports
"""
from contextlib import asynccontextmanager
from datetime import datetime
from typing import Any, Dict, List, Optional

from fastapi import BackgroundTasks, FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from subspace_cl.config import ABLATION_PRESETS, config_fingerprint, load_config
from subspace_cl.database import init_db, test_connection
from subspace_cl.exceptions import ConfigError, SubspaceToolkitError
from subspace_cl.pipelines.experiment_pipeline import run_experiment_pipeline, with_seed
from subspace_cl.pipelines.report import load_report
from subspace_cl.pipelines.utils import get_experiment_run, get_experiment_runs
from subspace_cl.utils import setup_logging

logger = setup_logging(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    init_db()
    yield


app = FastAPI(title="Subspace CL API",
              description="API for continual-learning subspace experiments",
              lifespan=lifespan)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


# Pydantic models for API requests/responses
class StatusResponse(BaseModel):
    status: str
    message: str


class ExperimentRequest(BaseModel):
    config: Dict[str, Any] = Field(default_factory=dict)
    preset: Optional[str] = None
    seed: Optional[int] = None
    use_worker: bool = False


class ExperimentResponse(BaseModel):
    status: str
    message: str
    fingerprint: str
    output_dir: str
    task_id: Optional[str] = None


class RunResponse(BaseModel):
    id: int
    fingerprint: str
    preset: Optional[str] = None
    seed: int
    output_dir: str
    status: str
    started_at: Optional[datetime] = None
    ended_at: Optional[datetime] = None
    a_last: Optional[float] = None
    a_avg: Optional[float] = None
    duration_seconds: Optional[float] = None
    notes: Optional[str] = None
    report: Optional[Dict[str, Any]] = None


def _run_in_background(cfg) -> None:
    try:
        run_experiment_pipeline(cfg, record=True)
    except SubspaceToolkitError as e:
        logger.error(f"Background experiment failed: {e}")


@app.get("/", response_model=StatusResponse)
def read_root():
    return {"status": "active", "message": "Subspace CL API is running"}


@app.get("/health", response_model=StatusResponse)
def health_check():
    if test_connection():
        return {"status": "ok", "message": "API and database connection healthy"}
    raise HTTPException(status_code=500, detail="Database connection failed")


@app.get("/presets", response_model=Dict[str, Dict[str, Any]])
def list_presets():
    """
    Ablation presets and the config deltas each applies
    """
    return ABLATION_PRESETS


@app.post("/experiments", response_model=ExperimentResponse)
def launch_experiment(request: ExperimentRequest, background_tasks: BackgroundTasks):
    """
    Validate a config and run it in the background (or on a Celery worker)
    """
    overrides = dict(request.config)
    if request.preset is not None:
        overrides["preset"] = request.preset
    try:
        cfg = load_config(overrides=overrides)
        if request.seed is not None:
            cfg = with_seed(cfg, request.seed)
    except ConfigError as e:
        raise HTTPException(status_code=422, detail=str(e))

    fingerprint = config_fingerprint(cfg)
    if request.use_worker:
        from subspace_cl.tasks.experiment_tasks import run_experiment_task

        async_result = run_experiment_task.delay(cfg.model_dump(mode="json"))
        logger.info(f"Queued experiment {fingerprint[:12]} as task {async_result.id}")
        return {"status": "queued", "message": "Experiment queued on worker", "fingerprint": fingerprint,
                "output_dir": cfg.output_dir, "task_id": async_result.id}

    logger.info(f"Starting experiment {fingerprint[:12]} in background")
    background_tasks.add_task(_run_in_background, cfg)
    return {"status": "started", "message": "Experiment started in background", "fingerprint": fingerprint,
            "output_dir": cfg.output_dir}


@app.get("/experiments", response_model=List[RunResponse])
def list_experiments(limit: int = 10):
    """
    Latest recorded runs, newest first
    """
    try:
        return get_experiment_runs(limit)
    except Exception as e:
        logger.error(f"Error fetching experiment runs: {e}")
        raise HTTPException(status_code=500, detail=str(e))


@app.get("/experiments/{run_id}", response_model=RunResponse)
def get_experiment(run_id: int):
    """
    One recorded run with its report when it has been written
    """
    try:
        run = get_experiment_run(run_id)
        if run is None:
            raise HTTPException(status_code=404, detail=f"Experiment run {run_id} not found")
        return {**run, "report": load_report(run["output_dir"])}
    except HTTPException:
        raise
    except Exception as e:
        logger.error(f"Error fetching experiment run {run_id}: {e}")
        raise HTTPException(status_code=500, detail=str(e))
