import json
import logging
from pathlib import Path
from typing import Any, Mapping, Optional

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from rich.table import Table

from config.config_exceptions import ConfigError
from harness.dto import TABLE_COLUMNS, SimulationMode
from llm.dto import BackendConfig, InvocationPolicy, PlannerMode
from planner.dto import PlannerParams

logger = logging.getLogger(__name__)


class RunConfig(BaseModel):
    """Everything one benchmark run needs; the JSON config file mirrors this model."""
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    planner: PlannerMode = "base"
    simulation_mode: SimulationMode = Field(default="non_reactive", alias="mode")
    policy: InvocationPolicy = Field(default_factory=InvocationPolicy)
    params: PlannerParams = Field(default_factory=PlannerParams)
    backend: BackendConfig = Field(default_factory=BackendConfig)
    scenarios: str = "builtin"
    out_dir: Path = Path("runs")
    seed: Optional[int] = None
    workers: int = Field(default=4, ge=1)


def _merge(base: dict[str, Any], overrides: Mapping[str, Any]) -> dict[str, Any]:
    """Apply dotted-key overrides (``policy.temperature``) on top of nested file values."""
    merged = json.loads(json.dumps(base))
    for key, value in overrides.items():
        if value is None:
            continue
        target = merged
        *parents, leaf = key.split(".")
        for parent in parents:
            child = target.get(parent)
            if not isinstance(child, dict):
                child = {}
                target[parent] = child
            target = child
        target[leaf] = value
    return merged


def load_config(path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Build a validated RunConfig with precedence flags > file > defaults.

    Raises:
        ConfigError: unreadable file, invalid JSON, unknown key or out-of-range value
    """
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file {path} does not exist")
        text = path.read_text(encoding="utf-8")
        if text.strip():
            try:
                data = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
            if not isinstance(data, dict):
                raise ConfigError(f"Config file {path} must hold a JSON object")

    try:
        config = RunConfig.model_validate(_merge(data, overrides or {}))
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
    logger.debug(f"Loaded config: {config.model_dump_json(by_alias=True)}")
    return config


def dump_config(config: RunConfig) -> str:
    return config.model_dump_json(by_alias=True, indent=2)


def format_report(table: pd.DataFrame) -> tuple[str, Table]:
    """CSV text and an aligned rich table, both in table column order with two decimals."""
    ordered = table.reindex(columns=list(TABLE_COLUMNS))
    csv_text = ordered.to_csv(float_format="%.2f", index_label="planner", lineterminator="\n")

    rich_table = Table(title="Closed-loop benchmark")
    rich_table.add_column("Planner", style="bold")
    for column in TABLE_COLUMNS:
        rich_table.add_column(column, justify="right")
    for name, row in ordered.iterrows():
        rich_table.add_row(str(name), *(f"{row[column]:.2f}" for column in TABLE_COLUMNS))
    return csv_text, rich_table
