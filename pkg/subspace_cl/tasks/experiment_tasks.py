"""
Celery tasks for experiment runs and seed sweeps
"""
import os
from typing import Any, Dict, List, Optional

from subspace_cl.celery_app import app
from subspace_cl.config import load_config, update_config
from subspace_cl.exceptions import SubspaceToolkitError
from subspace_cl.pipelines.experiment_pipeline import run_experiment_pipeline, with_seed
from subspace_cl.utils import setup_logging

logger = setup_logging(__name__)

IO_EXIT_CODE = 4


@app.task(bind=True, max_retries=3, default_retry_delay=60)
def run_experiment_task(self, config: Dict[str, Any], record: bool = True) -> Dict:
    """
    Task to run one experiment from a config mapping

    Configuration and numerical errors are final; only I/O errors are retried.
    """
    cfg = load_config(overrides=config)
    logger.info(f"Starting experiment task (preset={cfg.preset}, seed={cfg.seed})")

    try:
        result = run_experiment_pipeline(cfg, record=record)
        logger.info(f"Experiment task completed with status: {result['success']}")
        return result

    except SubspaceToolkitError as e:
        if e.exit_code != IO_EXIT_CODE:
            raise
        logger.error(f"I/O error in experiment task: {e}")
        raise self.retry(exc=e, countdown=60)


@app.task(bind=True, max_retries=3, default_retry_delay=60)
def run_seed_sweep_task(self, config: Dict[str, Any], seeds: List[int], record: bool = True,
                        preset: Optional[str] = None) -> List[Dict]:
    """
    Task to run the same experiment once per seed

    Each seed writes its report under <output_dir>/seed_<seed>.
    """
    overrides = dict(config)
    if preset is not None:
        overrides["preset"] = preset
    base = load_config(overrides=overrides)
    logger.info(f"Starting seed sweep over {len(seeds)} seeds (preset={base.preset})")

    results = []
    try:
        for seed in seeds:
            cfg = with_seed(base, seed)
            cfg = update_config(cfg, {"output_dir": os.path.join(base.output_dir, f"seed_{seed}")})
            results.append(run_experiment_pipeline(cfg, record=record))
        logger.info("Seed sweep task completed")
        return results

    except SubspaceToolkitError as e:
        if e.exit_code != IO_EXIT_CODE:
            raise
        logger.error(f"I/O error in seed sweep task: {e}")
        raise self.retry(exc=e, countdown=60)
