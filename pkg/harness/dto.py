from typing import Any, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from metrics.closed_loop_metrics import AgentTracks
from metrics.dto import MetricReport
from scene.scene_types import AgentState, EgoState, Scenario, Trajectory

SimulationMode = Literal["non_reactive", "reactive"]

TABLE_COLUMNS = ("Score", "Collisions", "TTC", "Drivable", "Comfort", "Progress", "Speed Limit", "Direction")
COLUMN_METRICS = {
    "Score": "aggregate",
    "Collisions": "collisions",
    "TTC": "ttc",
    "Drivable": "drivable",
    "Comfort": "comfort",
    "Progress": "progress",
    "Speed Limit": "speed_limit",
    "Direction": "direction",
}


class TickRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    tick: int = Field(..., ge=0)
    ego: EgoState
    agents: list[AgentState] = Field(default_factory=list)
    provenance: Optional[Literal["base", "llm_par", "llm_unc", "emergency"]] = None
    predicted_aggregate: Optional[float] = None
    selected_aggregate: Optional[float] = None
    queries_used: int = 0


class EpisodeLog(BaseModel):
    """
    Full record of one closed-loop episode.

    The scenario travels with the log so ``score`` and ``roc`` need nothing else.
    """
    scenario: Scenario
    planner: str
    mode: SimulationMode = "non_reactive"
    ticks: list[TickRecord] = Field(default_factory=list)
    decisions: list[dict[str, Any]] = Field(default_factory=list, exclude=True)
    report: Optional[MetricReport] = None
    failed: bool = False
    diagnostic: Optional[str] = None

    @property
    def scenario_id(self) -> str:
        return self.scenario.id

    def ego_trajectory(self) -> Trajectory:
        return Trajectory.from_states([record.ego for record in self.ticks])

    def agent_tracks(self) -> AgentTracks:
        return AgentTracks.from_states([record.agents for record in self.ticks])

    def predicted_aggregates(self) -> np.ndarray:
        return np.array(
            [record.predicted_aggregate for record in self.ticks if record.predicted_aggregate is not None],
            dtype=float,
        )

    def min_predicted_aggregate(self) -> Optional[float]:
        predicted = self.predicted_aggregates()
        return float(predicted.min()) if predicted.size else None


class RocPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    threshold: float = Field(..., ge=0, le=1)
    true_positive_rate: float = Field(..., ge=0, le=1)
    false_positive_rate: float = Field(..., ge=0, le=1)


class RocResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    points: list[RocPoint]
    auc: float = Field(..., ge=0, le=1)
    positives: int
    negatives: int
    gt_threshold: Optional[float] = None
