"""
Configuration models for streams, training and experiments

Config files are YAML (JSON works too) and are validated by pydantic.
Ablation presets are tables of field deltas applied on top of a config.
"""
import copy
import hashlib
import json
import logging
import os
from typing import Any, Dict, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from subspace_cl.exceptions import ConfigError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

OUTPUT_ROOT = os.environ.get("SUBSPACE_CL_OUTPUT_ROOT", "runs")

PresetName = Literal["baseline_single_lora", "general_only", "isolated_only", "dual_no_gao", "full_loda"]
IsolationMethod = Literal["loda_isolated", "null_baseline", "random_orthonormal"]
MergeMethod = Literal["closed_form", "identity", "running_average"]


class StreamConfig(BaseModel):
    """Synthetic correlated task stream"""
    model_config = ConfigDict(extra="forbid")

    num_tasks: int = Field(5, ge=1)
    classes_per_task: int = Field(4, ge=1)
    train_samples_per_class: int = Field(100, ge=1)
    test_samples_per_class: int = Field(50, ge=1)
    d_raw: int = Field(32, ge=1)
    d_shared: int = Field(8, ge=0)
    d_private: int = Field(4, ge=0)
    kappa: float = Field(0.75, ge=0.0, le=1.0)
    noise_sigma: float = Field(0.3, ge=0.0)
    mean_norm: float = Field(2.0, gt=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def check_dimension_budget(self) -> "StreamConfig":
        needed = self.d_shared + self.num_tasks * self.d_private
        if needed > self.d_raw:
            raise ValueError(f"d_shared + num_tasks * d_private = {needed} exceeds d_raw = {self.d_raw}")
        if self.d_shared + self.d_private == 0:
            raise ValueError("class means need a shared or a private subspace")
        return self


class TrainConfig(BaseModel):
    """Per-task optimisation of up-projections and prototypes"""
    model_config = ConfigDict(extra="forbid")

    eta: float = Field(0.1, gt=0.0)
    epochs: int = Field(5, ge=0)
    batch_size: int = Field(48, ge=1)
    rho_max: float = Field(0.3, ge=0.0)
    resample_rho_per_phase: bool = False
    seed: int = 0
    schedule: Literal["cosine_annealing", "constant"] = "cosine_annealing"
    optimizer: Literal["gao", "sgd"] = "gao"

    @model_validator(mode="after")
    def check_gao_batch(self) -> "TrainConfig":
        if self.optimizer == "gao" and self.batch_size < 2:
            raise ValueError("GAO needs batch_size >= 2 to split a batch into two label-disjoint subsets")
        return self


class ExperimentConfig(BaseModel):
    """Everything a continual-learning run depends on"""
    model_config = ConfigDict(extra="forbid")

    schema_version: int = SCHEMA_VERSION
    stream: StreamConfig = Field(default_factory=StreamConfig)
    ingest_path: Optional[str] = None
    d_model: int = Field(24, ge=1)
    d_out: int = Field(24, ge=1)
    rank: int = Field(4, ge=1)
    w_G: float = Field(0.5, ge=0.0)
    lam: float = Field(3.0, gt=0.0)
    train: TrainConfig = Field(default_factory=TrainConfig)
    preset: Optional[PresetName] = None
    use_general: bool = True
    use_isolated: bool = True
    trainable_down: bool = False
    isolation_method: IsolationMethod = "loda_isolated"
    merge_method: MergeMethod = "closed_form"
    temperature: float = Field(16.0, gt=0.0)
    extractor_scale: float = Field(1.0, gt=0.0)
    extractor_decay: float = Field(0.8, gt=0.0, le=1.0)
    jitter_scale: float = Field(1e-6, ge=0.0)
    retain_per_task: bool = True
    interp_steps: int = Field(0, ge=0)
    output_dir: str = os.path.join(OUTPUT_ROOT, "default")
    seed: int = 0

    @model_validator(mode="after")
    def check_consistency(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}, expected {SCHEMA_VERSION}")
        if self.rank > min(self.d_model, self.d_out):
            raise ValueError(f"rank {self.rank} exceeds layer dimensions ({self.d_model}, {self.d_out})")
        if not (self.use_general or self.use_isolated):
            raise ValueError("at least one branch must be enabled")
        if self.trainable_down and (self.use_isolated or not self.use_general):
            raise ValueError("a trainable down-projection is only supported on a single general branch")
        return self


ABLATION_PRESETS: Dict[str, Dict[str, Any]] = {
    "baseline_single_lora": {
        "use_general": True,
        "use_isolated": False,
        "trainable_down": True,
        "merge_method": "identity",
        "train": {"optimizer": "sgd"},
    },
    "general_only": {
        "use_general": True,
        "use_isolated": False,
        "trainable_down": False,
        "merge_method": "closed_form",
        "train": {"optimizer": "sgd"},
    },
    "isolated_only": {
        "use_general": False,
        "use_isolated": True,
        "trainable_down": False,
        "train": {"optimizer": "sgd"},
    },
    "dual_no_gao": {
        "use_general": True,
        "use_isolated": True,
        "trainable_down": False,
        "merge_method": "closed_form",
        "train": {"optimizer": "sgd"},
    },
    "full_loda": {
        "use_general": True,
        "use_isolated": True,
        "trainable_down": False,
        "merge_method": "closed_form",
        "train": {"optimizer": "gao"},
    },
}


def ablation_preset(name: str) -> Dict[str, Any]:
    """
    Field deltas for one ablation preset

    Raises:
        ConfigError: for an unknown name, listing the valid ones
    """
    if name not in ABLATION_PRESETS:
        raise ConfigError(f"unknown preset '{name}'; valid presets: {', '.join(ABLATION_PRESETS)}")
    return copy.deepcopy(ABLATION_PRESETS[name])


def _deep_update(base: Dict[str, Any], updates: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in updates.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_update(merged[key], value)
        else:
            merged[key] = value
    return merged


def update_config(cfg: ExperimentConfig, updates: Dict[str, Any]) -> ExperimentConfig:
    """Re-validate a config with nested field updates applied"""
    try:
        return ExperimentConfig.model_validate(_deep_update(cfg.model_dump(), updates))
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def apply_preset(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    """Config with the preset's deltas applied and the preset name recorded"""
    deltas = ablation_preset(name)
    deltas["preset"] = name
    return update_config(cfg, deltas)


def config_fingerprint(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON dump"""
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Load and validate an experiment config

    Args:
        path: YAML or JSON file; defaults are used when None
        overrides: nested field updates applied after loading

    Returns:
        Validated config with its preset expanded
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "r") as f:
                raw = yaml.safe_load(f) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a mapping at top level")
    overrides = overrides or {}
    # Preset deltas sit between the file and explicit overrides
    preset = overrides.get("preset", raw.get("preset"))
    if preset:
        raw = _deep_update(raw, ablation_preset(preset))
    raw = _deep_update(raw, overrides)
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
