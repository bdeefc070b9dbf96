"""Tests for the layered run configuration."""

import json
from pathlib import Path

import pytest

from src.config.constants import DESK_PHASE_LIST, PAPER_PHASE_LIST, ConfigDefaults
from src.config.settings import (RESOLVED_CONFIG_NAME, RunConfig, get_config, parse_override,
                                 reset_config)
from src.core.optim import cosine_lr
from src.core.trainer import ProgressivePhase
from src.utils.errors import ConfigurationError, ConfigurationValidationError

REPO_CONFIG = Path(__file__).resolve().parents[1] / "config" / "config.json"


class TestDefaults:

    def test_defaults_validate(self):
        config = RunConfig()
        assert config.net.base_channels == 12
        assert config["loss"].mode == "both"
        assert config.phases.preset == "desk"
        assert [[p.image_size, p.batch_size, p.iterations] for p in config.phases()] == DESK_PHASE_LIST

    def test_repository_file_matches_defaults(self):
        assert RunConfig(REPO_CONFIG).to_dict() == RunConfig().to_dict()

    def test_default_table_lookup(self):
        assert ConfigDefaults.get_default("ssm", "d_state") == 8
        with pytest.raises(KeyError):
            ConfigDefaults.get_default("ssm", "width")

    def test_net_builder(self):
        net = RunConfig(overrides={"net.branches": "hn", "net.pools": "m"}).net_config()
        assert net.block.branches == ("normal", "horizontal")
        assert net.block.pools == ("maximum",)
        assert net.stage_blocks == (1, 2, 2, 4, 2, 2, 1, 1)

    def test_other_builders(self):
        config = RunConfig()
        assert config.loss_config().alpha == pytest.approx(0.8)
        assert config.schedule_config().total is None
        assert config.corruption_config().metal_attenuation == pytest.approx(4.0)
        assert config.calibration() == {"slope": 2000.0, "intercept": -1000.0}
        assert config.ssm_config().chunk == 16


class TestOverrides:

    def test_parse_override(self):
        assert parse_override("net.base_channels=8") == ("net.base_channels", 8)
        assert parse_override("loss.mode=lpips") == ("loss.mode", "lpips")
        assert parse_override("analysis.annulus=[0.1, 0.3]") == ("analysis.annulus", [0.1, 0.3])
        with pytest.raises(ConfigurationError):
            parse_override("net.base_channels")

    def test_string_overrides(self):
        config = RunConfig(overrides=["net.base_channels=8", "loss.mode=lpips"])
        assert config.net.base_channels == 8
        assert config.loss.mode == "lpips"

    def test_full_size_preset(self):
        config = RunConfig(overrides={"phases.preset": "paper"})
        assert config.phases.list == PAPER_PHASE_LIST
        assert config.phases()[0] == ProgressivePhase(256, 8, 100_000)

    def test_explicit_list_becomes_custom(self):
        config = RunConfig(overrides={"phases.list": [[16, 1, 5], [24, 1, 5]]})
        assert config.phases.preset == "custom"
        assert [p.image_size for p in config.phases()] == [16, 24]

    def test_desk_schedule_ends_every_phase_annealed(self):
        config = RunConfig()
        schedule = config.schedule_config()
        assert schedule.lr_max == pytest.approx(1e-3) and schedule.t_max == 150
        for phase in config.phases():
            assert cosine_lr(phase.iterations - 1, schedule) < 1e-3 * schedule.lr_max

    def test_single_schedule_spans_longest_phase(self):
        config = RunConfig(overrides={"schedule.mode": "single"})
        assert config.schedule_config().total == max(p[2] for p in DESK_PHASE_LIST)

    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"net": {"base_channels": 6}, "runtime": {"seed": 4}}))
        config = RunConfig(path, overrides=["net.base_channels=10"])
        assert config.net.base_channels == 10
        assert config.runtime.seed == 4


class TestValidation:

    @pytest.mark.parametrize("overrides, fragment", [
        ({"net.width": 3}, "Unknown key 'net.width'"),
        ({"nothing.key": 1}, "Unknown section 'nothing'"),
        ({"net.base_channels": "wide"}, "net.base_channels"),
        ({"net.base_channels": True}, "net.base_channels"),
        ({"net.branches": "vh"}, "net.branches"),
        ({"net.stage_blocks": [1, 1]}, "net.stage_blocks"),
        ({"loss.mode": "l1"}, "loss.mode"),
        ({"ssm.dt_min": 0.5, "ssm.dt_max": 0.1}, "ssm.dt_min must not exceed ssm.dt_max"),
        ({"analysis.hu_lo": 300.0}, "analysis.hu_lo must be below analysis.hu_hi"),
        ({"analysis.profile_sizes": [60]}, "analysis.profile_sizes"),
    ])
    def test_rejected(self, overrides, fragment):
        with pytest.raises(ConfigurationValidationError) as info:
            RunConfig(overrides=overrides)
        assert any(fragment in e for e in info.value.errors)

    def test_every_error_is_reported(self):
        with pytest.raises(ConfigurationValidationError) as info:
            RunConfig(overrides={"net.base_channels": 0, "ssm.d_state": 0})
        assert len(info.value.errors) == 2

    def test_ints_accepted_as_floats(self):
        assert RunConfig(overrides={"loss.alpha": 1}).loss.alpha == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            RunConfig(tmp_path / "absent.json")

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{not json")
        with pytest.raises(ConfigurationError):
            RunConfig(path)

    def test_unknown_section_in_file(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"export_settings": {}}))
        with pytest.raises(ConfigurationValidationError):
            RunConfig(path)


class TestMutation:

    def test_set_revalidates_and_restores(self):
        config = RunConfig()
        config.set("net.base_channels", 16)
        assert config.get("net.base_channels") == 16
        with pytest.raises(ConfigurationValidationError):
            config.set("net.base_channels", -1)
        assert config.get("net.base_channels") == 16

    def test_set_preset_resolves_phases(self):
        config = RunConfig()
        config.set("phases.preset", "paper")
        assert config.phases.list == PAPER_PHASE_LIST

    def test_sections_are_read_only(self):
        config = RunConfig()
        with pytest.raises(ConfigurationError):
            config.net.base_channels = 3
        with pytest.raises(AttributeError):
            config.net.width

    def test_unknown_get(self):
        with pytest.raises(ConfigurationError):
            RunConfig().get("net.width")

    def test_snapshot(self, tmp_path):
        config = RunConfig(overrides={"phases.preset": "paper"})
        path = config.snapshot(tmp_path)
        assert path.name == RESOLVED_CONFIG_NAME
        assert json.loads(path.read_text()) == config.to_dict()

    def test_global_instance(self):
        reset_config()
        try:
            first = get_config(overrides={"runtime.seed": 9})
            assert get_config() is first
            assert first.runtime.seed == 9
        finally:
            reset_config()
