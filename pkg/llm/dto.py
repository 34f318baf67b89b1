from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from custom_types import DecisionRecord
from metrics.dto import METRIC_NAMES, MetricReport
from planner.dto import PlannerParams
from scene.scene_types import Trajectory

PlannerMode = Literal["base", "assist-par", "assist-unc", "llm-only"]
ResponseFormat = Literal["params", "waypoints"]
Provenance = Literal["base", "llm_par", "llm_unc", "emergency"]
BackendKind = Literal["mock", "oracle", "live", "replay"]

ALLOWED_QUERY_BUDGETS = (0, 1, 2, 4)
WAYPOINT_COUNT = 4
WAYPOINT_SPACING = 2.0


class InvocationPolicy(BaseModel):
    """When and how often the LLM is asked for help during one planning step."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    score_threshold: float = Field(default=0.8, ge=0, le=1)
    max_queries_per_step: int = Field(default=4)
    allow_llm_emergency_brake: bool = True
    temperature: float = Field(default=1.4, ge=0)
    metric_gates: dict[str, float] = Field(default_factory=dict)

    @field_validator("max_queries_per_step")
    @classmethod
    def known_budget(cls, v: int) -> int:
        if v not in ALLOWED_QUERY_BUDGETS:
            raise ValueError(f"max_queries_per_step must be one of {ALLOWED_QUERY_BUDGETS}, got {v}")
        return v

    @field_validator("metric_gates")
    @classmethod
    def known_metrics(cls, gates: dict[str, float]) -> dict[str, float]:
        for name, value in gates.items():
            if name not in METRIC_NAMES:
                raise ValueError(f"unknown metric gate {name}")
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"gate for {name} must be in [0, 1]")
        return gates


class BackendConfig(BaseModel):
    """
    Backend selection and transport settings.

    Credentials are read from the environment variables named here, never stored.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: BackendKind = "oracle"
    base_url_env: str = "PLANNER_LLM_BASE_URL"
    api_key_env: str = "PLANNER_LLM_API_KEY"
    model_env: str = "PLANNER_LLM_MODEL"
    model_name: str = "gpt-3.5-turbo"
    max_tokens: int = Field(default=512, gt=0)
    timeout_s: float = Field(default=30.0, gt=0)
    max_retries: int = Field(default=2, ge=0, le=2)
    retry_delay_ms: int = Field(default=500, ge=0)
    transcript_path: Optional[Path] = None
    replay_path: Optional[Path] = None
    mock_replies: list[str] = Field(default_factory=list)


class ChatRequest(BaseModel):
    """One chat-completion call; routing metadata rides along for mocks, replay and transcripts."""
    model_config = ConfigDict(frozen=True)

    system_prompt: str = Field(..., min_length=1)
    user_prompt: str = Field(..., min_length=1)
    temperature: float = Field(default=1.4, ge=0)
    max_tokens: int = Field(default=512, gt=0)
    model_name: str = "mock"
    scenario_id: str = ""
    tick: int = Field(default=0, ge=0)
    query_index: int = Field(default=0, ge=0)
    response_format: ResponseFormat = "params"
    scene_hash: str = ""
    world: Any = Field(default=None, exclude=True, description="WorldState for in-process backends")


class LlmParamResponse(BaseModel):
    model_config = ConfigDict(frozen=True)

    params: PlannerParams
    invoke_emergency_brake: Optional[bool] = None
    rationale: str = ""
    warnings: list[str] = Field(default_factory=list)


class LlmTrajectoryResponse(BaseModel):
    """Four waypoints at two-second spacing and their densified trajectory."""
    model_config = ConfigDict(frozen=True)

    waypoints: list[tuple[float, float]] = Field(..., min_length=WAYPOINT_COUNT, max_length=WAYPOINT_COUNT)
    rationale: str = ""
    invoke_emergency_brake: Optional[bool] = None
    trajectory: Any = Field(..., exclude=True, description="densified Trajectory")


@dataclass
class PlanDecision:
    """Outcome of one planning step."""
    tick: int
    trajectory: Trajectory
    provenance: Provenance
    rationale: str = ""
    predicted_aggregate: float = 0.0
    selected_aggregate: float = 0.0
    queries_used: int = 0
    report: Optional[MetricReport] = None
    degraded: bool = False
    llm_brake_requested: bool = False
    candidate_scores: list[float] = field(default_factory=list)

    def to_record(self, time: float) -> DecisionRecord:
        return {
            "tick": self.tick,
            "time": round(time, 6),
            "provenance": self.provenance,
            "queries_used": self.queries_used,
            "rationale": self.rationale,
            "predicted_aggregate": self.predicted_aggregate,
            "selected_aggregate": self.selected_aggregate,
            "predicted_scores": (
                {name: getattr(self.report, name) for name in METRIC_NAMES} if self.report is not None else {}
            ),
            "degraded": self.degraded,
        }
