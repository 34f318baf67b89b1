import itertools
from dataclasses import dataclass
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from metrics.dto import MetricReport
from scene.scene_types import Trajectory

MAX_LATERAL_OFFSET = 3.0
PROPOSAL_HORIZON = 8.0


@dataclass(frozen=True)
class IdmCell:
    """One point of the proposal grid: a lateral offset and a full IDM parameter set."""
    lateral_offset: float
    speed_limit_fraction: float
    fallback_target_velocity: float
    min_gap_to_lead_agent: float
    headway_time: float
    accel_max: float
    decel_max: float
    idm_exponent: float


def _as_list(v):
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return [v]
    return v


def _check_offsets(offsets: list[float]) -> list[float]:
    for offset in offsets:
        if abs(offset) > MAX_LATERAL_OFFSET:
            raise ValueError(f"lateral offset {offset} exceeds ±{MAX_LATERAL_OFFSET} m")
    return offsets


def _check_fractions(fractions: list[float]) -> list[float]:
    for fraction in fractions:
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"speed limit fraction {fraction} must be in (0, 1]")
    return fractions


class PlannerParams(BaseModel):
    """
    The seven model-controllable base planner parameters plus the IDM exponent.

    ``speed_limit_fractions`` is read and written as ``speed_limit_fraction``.
    """
    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid", allow_inf_nan=False)

    lateral_offsets: list[float] = Field(default_factory=lambda: [-1.0, 0.0, 1.0], min_length=1)
    speed_limit_fractions: list[float] = Field(
        default_factory=lambda: [0.2, 0.4, 0.6, 0.8, 1.0], min_length=1, alias="speed_limit_fraction"
    )
    fallback_target_velocity: float = Field(default=15.0, gt=0)
    min_gap_to_lead_agent: float = Field(default=1.0, gt=0)
    headway_time: float = Field(default=1.5, gt=0)
    accel_max: float = Field(default=1.5, gt=0)
    decel_max: float = Field(default=3.0, gt=0)
    idm_exponent: float = Field(default=4.0, gt=0)

    @field_validator("lateral_offsets", "speed_limit_fractions", mode="before")
    @classmethod
    def listify(cls, v):
        return _as_list(v)

    @field_validator("lateral_offsets")
    @classmethod
    def offsets_in_range(cls, v: list[float]) -> list[float]:
        return _check_offsets(v)

    @field_validator("speed_limit_fractions")
    @classmethod
    def fractions_in_range(cls, v: list[float]) -> list[float]:
        return _check_fractions(v)

    def cells(self) -> list[IdmCell]:
        return [
            IdmCell(
                lateral_offset=offset,
                speed_limit_fraction=fraction,
                fallback_target_velocity=self.fallback_target_velocity,
                min_gap_to_lead_agent=self.min_gap_to_lead_agent,
                headway_time=self.headway_time,
                accel_max=self.accel_max,
                decel_max=self.decel_max,
                idm_exponent=self.idm_exponent,
            )
            for offset, fraction in itertools.product(self.lateral_offsets, self.speed_limit_fractions)
        ]


class ProposalSweep(BaseModel):
    """Enlarged grid where every planner parameter is a list."""
    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid", allow_inf_nan=False)

    lateral_offsets: list[float] = Field(..., min_length=1)
    speed_limit_fractions: list[float] = Field(..., min_length=1, alias="speed_limit_fraction")
    fallback_target_velocity: list[float] = Field(..., min_length=1)
    min_gap_to_lead_agent: list[float] = Field(..., min_length=1)
    headway_time: list[float] = Field(..., min_length=1)
    accel_max: list[float] = Field(..., min_length=1)
    decel_max: list[float] = Field(..., min_length=1)
    idm_exponent: float = Field(default=4.0, gt=0)

    @field_validator(
        "lateral_offsets", "speed_limit_fractions", "fallback_target_velocity", "min_gap_to_lead_agent",
        "headway_time", "accel_max", "decel_max", mode="before",
    )
    @classmethod
    def listify(cls, v):
        return _as_list(v)

    @field_validator("lateral_offsets")
    @classmethod
    def offsets_in_range(cls, v: list[float]) -> list[float]:
        return _check_offsets(v)

    @field_validator("speed_limit_fractions")
    @classmethod
    def fractions_in_range(cls, v: list[float]) -> list[float]:
        return _check_fractions(v)

    @field_validator("fallback_target_velocity", "min_gap_to_lead_agent", "headway_time", "accel_max", "decel_max")
    @classmethod
    def strictly_positive(cls, v: list[float]) -> list[float]:
        if any(value <= 0.0 for value in v):
            raise ValueError("sweep values must be positive")
        return v

    @classmethod
    def from_params(cls, params: PlannerParams) -> "ProposalSweep":
        return cls(
            lateral_offsets=params.lateral_offsets,
            speed_limit_fractions=params.speed_limit_fractions,
            fallback_target_velocity=[params.fallback_target_velocity],
            min_gap_to_lead_agent=[params.min_gap_to_lead_agent],
            headway_time=[params.headway_time],
            accel_max=[params.accel_max],
            decel_max=[params.decel_max],
            idm_exponent=params.idm_exponent,
        )

    def cells(self) -> list[IdmCell]:
        return [
            IdmCell(offset, fraction, fallback, gap, headway, accel, decel, self.idm_exponent)
            for offset, fraction, fallback, gap, headway, accel, decel in itertools.product(
                self.lateral_offsets, self.speed_limit_fractions, self.fallback_target_velocity,
                self.min_gap_to_lead_agent, self.headway_time, self.accel_max, self.decel_max,
            )
        ]


_SWEEP_TAIL = dict(
    speed_limit_fractions=[0.2, 0.4, 0.6, 0.8, 1.0],
    fallback_target_velocity=[5.0, 10.0, 15.0],
    min_gap_to_lead_agent=[1.0, 2.0, 3.0],
    headway_time=[1.0, 1.5, 2.0],
    accel_max=[1.0, 1.5, 2.0],
    decel_max=[2.0, 3.0, 4.0],
)

# 7 offsets: 8505 proposals; 6 offsets: 7290 proposals.
SWEEP_8505 = ProposalSweep(lateral_offsets=[-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5], **_SWEEP_TAIL)
SWEEP_7290 = ProposalSweep(lateral_offsets=[-1.5, -1.0, -0.5, 0.5, 1.0, 1.5], **_SWEEP_TAIL)


@dataclass(eq=False)
class Proposal:
    trajectory: Trajectory
    source_offset: float
    source_target_speed: float
    cell: Optional[IdmCell] = None
    predicted_scores: Optional[MetricReport] = None

    @property
    def predicted_aggregate(self) -> float:
        return self.predicted_scores.aggregate if self.predicted_scores is not None else 0.0
