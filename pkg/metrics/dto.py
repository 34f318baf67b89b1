from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

MetricName = Literal["collisions", "ttc", "drivable", "comfort", "progress", "speed_limit", "direction"]
METRIC_NAMES: tuple[str, ...] = ("collisions", "ttc", "drivable", "comfort", "progress", "speed_limit", "direction")


class MetricThresholds(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    stopped_speed: float = Field(default=0.05, ge=0, description="ego below this speed is never at fault")
    ttc_threshold: float = Field(default=0.95, gt=0)
    ttc_horizon: float = Field(default=3.0, gt=0)
    ttc_step: float = Field(default=0.1, gt=0)
    ttc_moving_speed: float = Field(default=5e-3, ge=0)
    drivable_tolerance: float = Field(default=0.3, ge=0)
    max_lon_accel: float = Field(default=2.40, gt=0)
    min_lon_accel: float = Field(default=-4.05, lt=0)
    max_lat_accel: float = Field(default=4.89, gt=0)
    max_yaw_rate: float = Field(default=0.95, gt=0)
    max_yaw_accel: float = Field(default=1.93, gt=0)
    max_lon_jerk: float = Field(default=4.13, gt=0)
    max_jerk_magnitude: float = Field(default=8.37, gt=0)
    comfort_window: int = Field(default=15, ge=3)
    negative_progress: float = Field(default=-0.1, le=0)
    making_progress_ratio: float = Field(default=0.2, ge=0, le=1)
    overspeed_cap: float = Field(default=2.23, gt=0)
    direction_window: float = Field(default=1.0, gt=0)
    direction_compliance: float = Field(default=2.0, ge=0)
    direction_violation: float = Field(default=6.0, ge=0)


class ScoreWeights(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    ttc: float = Field(default=5.0, ge=0)
    progress: float = Field(default=5.0, ge=0)
    speed_limit: float = Field(default=4.0, ge=0)
    comfort: float = Field(default=2.0, ge=0)


class Violation(BaseModel):
    model_config = ConfigDict(frozen=True)

    metric: MetricName
    tick: int
    detail: str


class CollisionEvent(BaseModel):
    model_config = ConfigDict(frozen=True)

    tick: int
    agent_id: str
    agent_kind: str
    at_fault: bool


class MetricReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    collisions: float = Field(..., ge=0, le=1)
    ttc: float = Field(..., ge=0, le=1)
    drivable: float = Field(..., ge=0, le=1)
    comfort: float = Field(..., ge=0, le=1)
    progress: float = Field(..., ge=0, le=1)
    speed_limit: float = Field(..., ge=0, le=1)
    direction: float = Field(..., ge=0, le=1)
    making_progress: bool = True
    aggregate: float = Field(..., ge=0, le=1)
    violations: list[Violation] = Field(default_factory=list)
    collision_events: list[CollisionEvent] = Field(default_factory=list)
    min_ttc: Optional[float] = None
