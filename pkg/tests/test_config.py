"""
Config loading, presets and fingerprints
"""
import json

import pytest
import yaml

from subspace_cl.config import (
    ABLATION_PRESETS,
    ExperimentConfig,
    ablation_preset,
    apply_preset,
    config_fingerprint,
    load_config,
    update_config,
)
from subspace_cl.exceptions import ConfigError


class TestPresets:
    def test_expansions(self):
        cfg = ExperimentConfig()
        baseline = apply_preset(cfg, "baseline_single_lora")
        assert baseline.use_general and not baseline.use_isolated
        assert baseline.trainable_down and baseline.w_G == cfg.w_G
        assert baseline.merge_method == "identity"
        assert baseline.train.optimizer == "sgd"

        isolated = apply_preset(cfg, "isolated_only")
        assert isolated.use_isolated and not isolated.use_general

        full = apply_preset(cfg, "full_loda")
        assert full.use_general and full.use_isolated and full.train.optimizer == "gao"
        assert full.preset == "full_loda"

    def test_dual_without_gao_differs_only_in_optimizer(self):
        cfg = ExperimentConfig()
        dual = apply_preset(cfg, "dual_no_gao").model_dump()
        full = apply_preset(cfg, "full_loda").model_dump()
        assert dual["train"]["optimizer"] == "sgd"
        dual["train"]["optimizer"] = "gao"
        dual["preset"] = "full_loda"
        assert dual == full

    def test_unknown_preset_lists_valid_names(self):
        with pytest.raises(ConfigError) as info:
            ablation_preset("everything")
        for name in ABLATION_PRESETS:
            assert name in str(info.value)

    def test_preset_returns_a_copy(self):
        ablation_preset("full_loda")["train"]["optimizer"] = "sgd"
        assert ABLATION_PRESETS["full_loda"]["train"]["optimizer"] == "gao"

    def test_distinct_fingerprints(self):
        cfg = ExperimentConfig()
        prints = {config_fingerprint(apply_preset(cfg, name)) for name in ABLATION_PRESETS}
        assert len(prints) == len(ABLATION_PRESETS)


class TestFingerprint:
    def test_stable(self):
        assert config_fingerprint(ExperimentConfig()) == config_fingerprint(ExperimentConfig())
        assert len(config_fingerprint(ExperimentConfig())) == 64

    def test_sensitive_to_nested_fields(self):
        cfg = ExperimentConfig()
        changed = update_config(cfg, {"train": {"eta": 0.05}})
        assert config_fingerprint(changed) != config_fingerprint(cfg)
        assert changed.train.epochs == cfg.train.epochs


class TestLoadConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg.rank == 4 and cfg.lam == 3.0 and cfg.temperature == 16.0

    def test_yaml_file_with_preset_and_overrides(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text(yaml.safe_dump({"preset": "general_only", "rank": 2, "train": {"eta": 0.05}}))
        cfg = load_config(str(path), overrides={"merge_method": "running_average"})
        assert cfg.preset == "general_only"
        assert not cfg.use_isolated
        assert cfg.rank == 2 and cfg.train.eta == 0.05
        assert cfg.train.optimizer == "sgd"
        # Explicit overrides win over the preset's deltas
        assert cfg.merge_method == "running_average"

    def test_json_file(self, tmp_path):
        path = tmp_path / "exp.json"
        path.write_text(json.dumps({"lam": 1.5}))
        assert load_config(str(path)).lam == 1.5

    def test_preset_from_overrides(self):
        cfg = load_config(overrides={"preset": "dual_no_gao"})
        assert cfg.train.optimizer == "sgd" and cfg.use_isolated

    def test_extra_key(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"learning_rate": 0.1})

    def test_nested_extra_key(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"stream": {"tasks": 3}})

    def test_schema_version_mismatch(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"schema_version": 2})

    def test_trainable_down_with_isolated_branch(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"trainable_down": True, "use_isolated": True})

    def test_no_branch_enabled(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"use_general": False, "use_isolated": False})

    @pytest.mark.parametrize("overrides", [{"stream": {"kappa": 1.5}}, {"lam": 0.0}, {"rank": 100}])
    def test_out_of_range_values(self, overrides):
        with pytest.raises(ConfigError):
            load_config(overrides=overrides)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "missing.yaml"))

    def test_top_level_must_be_a_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_config_error_exit_code(self):
        with pytest.raises(ConfigError) as info:
            load_config(overrides={"lam": -1})
        assert info.value.exit_code == 2
