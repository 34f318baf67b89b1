import json
from pathlib import Path

import pandas as pd
import pytest
from typer.testing import CliRunner

from config.config_exceptions import ConfigError
from config.run_config import RunConfig, dump_config, format_report, load_config
from conftest import scenario_factory
from harness.episode_runner import run_episode, write_episode
from llm.llm_assist import Planner
from main import EXIT_CONFIG_ERROR, EXIT_RUNTIME_ERROR, app

FIXTURES = Path(__file__).parent / "fixtures"


def _write(tmp_path: Path, payload, name="config.json") -> Path:
    path = tmp_path / name
    path.write_text(payload if isinstance(payload, str) else json.dumps(payload), encoding="utf-8")
    return path


class TestLoadConfig:
    """Defaults, file values and flag overrides."""

    def test_defaults(self):
        config = load_config()
        assert config == RunConfig()
        assert config.planner == "base"
        assert config.simulation_mode == "non_reactive"
        assert config.policy.score_threshold == 0.8
        assert config.policy.max_queries_per_step == 4
        assert config.policy.temperature == 1.4
        assert config.backend.kind == "oracle"
        assert config.params.lateral_offsets == [-1.0, 0.0, 1.0]

    def test_flags_override_file(self, tmp_path):
        path = _write(tmp_path, {
            "planner": "assist-par",
            "mode": "reactive",
            "policy": {"temperature": 0.5, "max_queries_per_step": 2},
        })
        config = load_config(path, {"policy.temperature": 1.0, "scenarios": None})
        assert config.planner == "assist-par"
        assert config.simulation_mode == "reactive"
        assert config.policy.temperature == 1.0
        assert config.policy.max_queries_per_step == 2
        assert config.scenarios == "builtin"

    def test_empty_file_gives_defaults(self, tmp_path):
        assert load_config(_write(tmp_path, "  \n")) == RunConfig()

    @pytest.mark.parametrize("overrides", [
        {"policy.temperature": -1.0},
        {"policy.max_queries_per_step": 3},
        {"policy.score_threshold": 1.5},
        {"planner": "autopilot"},
        {"workers": 0},
        {"surprise": True},
    ])
    def test_invalid_values(self, overrides):
        with pytest.raises(ConfigError):
            load_config(overrides=overrides)

    @pytest.mark.parametrize("payload", ["{not json", "[1, 2]", {"policy": {"unknown": 1}}])
    def test_invalid_files(self, tmp_path, payload):
        with pytest.raises(ConfigError):
            load_config(_write(tmp_path, payload))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.json")

    def test_dump_round_trip(self, tmp_path):
        config = load_config(overrides={"planner": "assist-unc", "params.lateral_offsets": [-2.0, 2.0], "seed": 3})
        assert load_config(_write(tmp_path, dump_config(config))) == config
        assert '"speed_limit_fraction"' in dump_config(config)


class TestFormatReport:
    """Summary CSV and console table."""

    def test_golden_csv(self):
        table = pd.DataFrame(
            {
                "Direction": [100.0, 50.0], "Score": [80.0, 30.0], "Collisions": [100.0, 50.0],
                "TTC": [100.0, 50.0], "Drivable": [100.0, 50.0], "Comfort": [100.0, 50.0],
                "Progress": [80.0, 30.0], "Speed Limit": [100.0, 50.0],
            },
            index=pd.Index(["base", "assist-par"], name="planner"),
        )
        csv_text, rich_table = format_report(table)
        assert csv_text == (FIXTURES / "summary_golden.csv").read_text(encoding="utf-8")
        assert rich_table.row_count == 2
        assert [column.header for column in rich_table.columns][:2] == ["Planner", "Score"]


class TestCli:
    """Command-line entry points."""

    def test_invalid_temperature_exits_with_config_error(self, tmp_path):
        result = CliRunner().invoke(app, ["run", "--temperature=-1", "--out", str(tmp_path)])
        assert result.exit_code == EXIT_CONFIG_ERROR
        assert not (tmp_path / "summary.csv").exists()

    def test_missing_config_file(self, tmp_path):
        result = CliRunner().invoke(app, ["run", "--config", str(tmp_path / "absent.json")])
        assert result.exit_code == EXIT_CONFIG_ERROR

    def test_unknown_scenario_is_a_runtime_error(self, tmp_path):
        result = CliRunner().invoke(app, ["run", "--scenarios", "nowhere_road", "--out", str(tmp_path)])
        assert result.exit_code == EXIT_RUNTIME_ERROR

    async def test_score_recorded_episode(self, tmp_path):
        log = await run_episode(scenario_factory(duration_steps=5), Planner("base"))
        path = write_episode(log, tmp_path)
        result = CliRunner().invoke(app, ["score", "--log", str(path)])
        assert result.exit_code == 0
        assert "aggregate" in result.output

    async def test_roc_needs_both_classes(self, tmp_path):
        log = await run_episode(scenario_factory(duration_steps=5), Planner("base"))
        write_episode(log, tmp_path)
        result = CliRunner().invoke(app, ["roc", "--logs", str(tmp_path), "--gt-threshold", "0.5"])
        assert result.exit_code == EXIT_RUNTIME_ERROR

    @pytest.mark.slow
    def test_run_writes_summary(self, tmp_path):
        result = CliRunner().invoke(app, ["run", "--scenarios", "free_road", "--out", str(tmp_path), "--workers", "1"])
        assert result.exit_code == 0
        lines = (tmp_path / "summary.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0].startswith("planner,Score,Collisions")
        assert lines[1].startswith("base,")
        assert (tmp_path / "base" / "free_road.episode.json").exists()
