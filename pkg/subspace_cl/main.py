"""
Command-line entry point

    python -m subspace_cl.main run --seed 0 [--config cfg.yaml] [field flags]
    python -m subspace_cl.main generate-stream --out stream.csv
    python -m subspace_cl.main ablate --seeds 0 1 2
    python -m subspace_cl.main diagnose
    python -m subspace_cl.main serve

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O error.
"""
import argparse
import json
import os
import sys
from typing import Any, Dict, List, Optional

from subspace_cl.config import ABLATION_PRESETS, load_config, update_config
from subspace_cl.core.stream import export_csv, generate
from subspace_cl.exceptions import SubspaceToolkitError
from subspace_cl.pipelines.experiment_pipeline import (
    run_ablation,
    run_diagnostics_pipeline,
    run_experiment_pipeline,
    with_seed,
)
from subspace_cl.utils import setup_logging

logger = setup_logging(__name__)

IO_EXIT_CODE = 4

# CLI flag -> nested config key
FLAG_FIELDS = {
    "tasks": ("stream", "num_tasks"),
    "classes_per_task": ("stream", "classes_per_task"),
    "kappa": ("stream", "kappa"),
    "noise_sigma": ("stream", "noise_sigma"),
    "ingest": ("ingest_path",),
    "rank": ("rank",),
    "w_g": ("w_G",),
    "lam": ("lam",),
    "rho_max": ("train", "rho_max"),
    "eta": ("train", "eta"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "optimizer": ("train", "optimizer"),
    "schedule": ("train", "schedule"),
    "preset": ("preset",),
    "isolation": ("isolation_method",),
    "merge": ("merge_method",),
    "interp_steps": ("interp_steps",),
    "output_dir": ("output_dir",),
}


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment config")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (default: $LOG_LEVEL or INFO)")
    stream = common.add_argument_group("stream")
    stream.add_argument("--tasks", type=int)
    stream.add_argument("--classes-per-task", type=int)
    stream.add_argument("--kappa", type=float)
    stream.add_argument("--noise-sigma", type=float)
    stream.add_argument("--ingest", help="read the task stream from a CSV instead of generating it")
    model = common.add_argument_group("model and training")
    model.add_argument("--rank", type=int)
    model.add_argument("--w-g", type=float)
    model.add_argument("--lam", type=float)
    model.add_argument("--rho-max", type=float)
    model.add_argument("--eta", type=float)
    model.add_argument("--epochs", type=int)
    model.add_argument("--batch-size", type=int)
    model.add_argument("--optimizer", choices=["gao", "sgd"])
    model.add_argument("--schedule", choices=["cosine_annealing", "constant"])
    model.add_argument("--preset", choices=list(ABLATION_PRESETS))
    model.add_argument("--isolation", choices=["loda_isolated", "null_baseline", "random_orthonormal"])
    model.add_argument("--merge", choices=["closed_form", "identity", "running_average"])
    model.add_argument("--interp-steps", type=int)
    common.add_argument("--output-dir")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="subspace-cl", description="Continual-learning subspace experiments")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", parents=[common], help="run one experiment and write its report")
    run.add_argument("--seed", type=int, required=True)
    run.add_argument("--record", action="store_true", help="store the run in the run registry")

    stream = commands.add_parser("generate-stream", parents=[common], help="write a synthetic stream as CSV")
    stream.add_argument("--out", required=True)
    stream.add_argument("--seed", type=int)

    ablate = commands.add_parser("ablate", parents=[common], help="run every ablation preset over several seeds")
    ablate.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])

    diagnose = commands.add_parser("diagnose", parents=[common], help="energy diagnostics without training")
    diagnose.add_argument("--seed", type=int)

    serve = commands.add_parser("serve", help="start the HTTP API")
    serve.add_argument("--log-level", default=None)
    serve.add_argument("--port", type=int, default=int(os.environ.get("PORT", "8000")))
    serve.add_argument("--host", default="0.0.0.0")
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Nested config updates for every field flag that was given"""
    overrides: Dict[str, Any] = {}
    for flag, path in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        node = overrides
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value
    return overrides


def _load(args: argparse.Namespace):
    cfg = load_config(args.config, overrides_from_args(args))
    seed = getattr(args, "seed", None)
    return with_seed(cfg, seed) if seed is not None else cfg


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load(args)
    result = run_experiment_pipeline(cfg, record=args.record)
    print(json.dumps({k: result[k] for k in ("A_last", "A_avg", "output_dir", "fingerprint", "run_id")}, indent=2))
    return 0


def cmd_generate_stream(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, overrides_from_args(args))
    if args.seed is not None:
        cfg = update_config(cfg, {"stream": {"seed": args.seed}})
    export_csv(generate(cfg.stream), args.out)
    print(args.out)
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _load(args)
    frame = run_ablation(cfg, args.seeds)
    print(frame.groupby("preset", sort=False)[["A_last", "A_avg"]].median().to_string())
    return 0


def cmd_diagnose(args: argparse.Namespace) -> int:
    cfg = _load(args)
    result = run_diagnostics_pipeline(cfg)
    print(result["output"])
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from subspace_cl.database import test_connection

    if not test_connection():
        logger.error("Database connection failed. Please check your DATABASE_URL environment variable.")
    logger.info(f"Starting FastAPI server on port {args.port}")
    uvicorn.run("subspace_cl.api:app", host=args.host, port=args.port)
    return 0


COMMANDS = {
    "run": cmd_run,
    "generate-stream": cmd_generate_stream,
    "ablate": cmd_ablate,
    "diagnose": cmd_diagnose,
    "serve": cmd_serve,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging("subspace_cl", args.log_level)
    try:
        return COMMANDS[args.command](args)
    except SubspaceToolkitError as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return IO_EXIT_CODE


if __name__ == "__main__":
    sys.exit(main())
