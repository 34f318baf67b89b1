import math
from dataclasses import dataclass
from typing import Any, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, field_validator, model_validator
from shapely.geometry import Point, Polygon

from scene.geometry import LaneMap, ReferencePath, normalize_angle, polyline_headings, resample_polyline
from scene.scene_exceptions import InvalidTrajectoryError

AgentKind = Literal["vehicle", "pedestrian", "bicycle", "static_object"]
LightState = Literal["green", "yellow", "red"]
AgentPolicy = Literal["non_reactive_replay", "reactive_idm"]

EGO_LENGTH = 4.6
EGO_WIDTH = 2.0
MAX_CENTERLINE_SPACING = 1.0


class Pose2D(BaseModel):
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    x: float
    y: float
    heading: float = 0.0

    @model_validator(mode="before")
    @classmethod
    def from_sequence(cls, data: Any) -> Any:
        if isinstance(data, (list, tuple)):
            return dict(zip(("x", "y", "heading"), data))
        return data

    @field_validator("heading")
    @classmethod
    def wrap_heading(cls, v: float) -> float:
        return normalize_angle(v)


class AgentState(BaseModel):
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    id: str = Field(..., min_length=1)
    kind: AgentKind = "vehicle"
    pose: Pose2D
    speed: float = Field(default=0.0, ge=0)
    length: float = Field(default=EGO_LENGTH, gt=0)
    width: float = Field(default=EGO_WIDTH, gt=0)
    lane_id: Optional[str] = None


class EgoState(BaseModel):
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    pose: Pose2D
    velocity: float = Field(default=0.0, ge=0)
    acceleration: float = 0.0
    length: float = Field(default=EGO_LENGTH, gt=0)
    width: float = Field(default=EGO_WIDTH, gt=0)
    timestamp: float = Field(default=0.0, ge=0)


class Lane(BaseModel):
    """
    Lane with a centerline resampled to at most one meter between points.

    Boundaries left empty are derived from ``width``.
    """
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    id: str = Field(..., min_length=1)
    centerline: list[Pose2D]
    speed_limit: Optional[float] = Field(default=None, gt=0)
    width: float = Field(default=3.5, gt=0)
    left_boundary: list[tuple[float, float]] = Field(default_factory=list)
    right_boundary: list[tuple[float, float]] = Field(default_factory=list)
    successors: list[str] = Field(default_factory=list)
    is_connector: bool = False

    _path: Optional[ReferencePath] = PrivateAttr(default=None)

    @field_validator("centerline")
    @classmethod
    def resample_centerline(cls, points: list[Pose2D]) -> list[Pose2D]:
        if len(points) < 2:
            raise ValueError("centerline needs at least 2 points")
        xy = np.array([[p.x, p.y] for p in points], dtype=float)
        steps = np.hypot(*np.diff(xy, axis=0).T)
        if np.any(steps <= 1e-9):
            raise ValueError("centerline arc length must be strictly increasing")
        dense = resample_polyline(xy, MAX_CENTERLINE_SPACING)
        headings = polyline_headings(dense)
        return [Pose2D(x=px, y=py, heading=h) for (px, py), h in zip(dense.tolist(), headings.tolist())]

    @model_validator(mode="after")
    def boundaries_bracket_centerline(self):
        first = self.centerline[0]
        for boundary, side in ((self.left_boundary, 1.0), (self.right_boundary, -1.0)):
            if not boundary:
                continue
            bx, by = boundary[0]
            cross = math.cos(first.heading) * (by - first.y) - math.sin(first.heading) * (bx - first.x)
            if cross * side <= 0.0:
                raise ValueError(f"lane {self.id} boundary is on the wrong side of the centerline")
        return self

    def path(self) -> ReferencePath:
        if self._path is None:
            self._path = ReferencePath.from_lanes([self])
        return self._path

    def boundary_polylines(self) -> tuple[np.ndarray, np.ndarray]:
        """Left and right boundary points, derived from the width when not given."""
        if self.left_boundary and self.right_boundary:
            return np.array(self.left_boundary, dtype=float), np.array(self.right_boundary, dtype=float)
        xy = np.array([[p.x, p.y] for p in self.centerline])
        heading = np.array([p.heading for p in self.centerline])
        normal = np.stack([-np.sin(heading), np.cos(heading)], axis=-1) * (self.width / 2.0)
        return xy + normal, xy - normal


class SpeedKeyframe(BaseModel):
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    time: float = Field(..., ge=0)
    speed: float = Field(..., ge=0)


class LightPhase(BaseModel):
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    start_time: float = Field(..., ge=0)
    state: LightState


class TrafficLight(BaseModel):
    """Fixed-schedule light guarding a stop line at ``stop_arc`` meters along its lane."""
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    lane_id: str
    stop_arc: float = Field(..., ge=0)
    schedule: list[LightPhase] = Field(..., min_length=1)

    @field_validator("schedule")
    @classmethod
    def sort_schedule(cls, phases: list[LightPhase]) -> list[LightPhase]:
        return sorted(phases, key=lambda phase: phase.start_time)

    def state_at(self, time: float) -> LightState:
        state: LightState = "green"
        for phase in self.schedule:
            if phase.start_time <= time + 1e-9:
                state = phase.state
        return state


class Scenario(BaseModel):
    model_config = ConfigDict(frozen=True, allow_inf_nan=False, extra="forbid")

    id: str = Field(..., min_length=1)
    description: str = ""
    lanes: list[Lane] = Field(..., min_length=1)
    drivable_polygon: list[tuple[float, float]] = Field(..., min_length=3)
    ego_init: EgoState
    agents_init: list[AgentState] = Field(default_factory=list)
    agent_policy: AgentPolicy = "non_reactive_replay"
    agent_scripts: dict[str, list[SpeedKeyframe]] = Field(default_factory=dict)
    traffic_lights: list[TrafficLight] = Field(default_factory=list)
    route: list[str] = Field(default_factory=list)
    duration_steps: int = Field(default=150, gt=0)
    dt: float = Field(default=0.1, gt=0)
    expert_progress: Optional[float] = Field(default=None, ge=0)

    _route_path: Optional[ReferencePath] = PrivateAttr(default=None)
    _lane_map: Optional[LaneMap] = PrivateAttr(default=None)
    _drivable: Optional[Polygon] = PrivateAttr(default=None)

    @field_validator("agent_scripts")
    @classmethod
    def sort_keyframes(cls, scripts: dict[str, list[SpeedKeyframe]]) -> dict[str, list[SpeedKeyframe]]:
        return {agent_id: sorted(frames, key=lambda f: f.time) for agent_id, frames in scripts.items()}

    @model_validator(mode="after")
    def check_references(self):
        lane_ids = [lane.id for lane in self.lanes]
        if len(set(lane_ids)) != len(lane_ids):
            raise ValueError(f"scenario {self.id} has duplicate lane ids")
        known = set(lane_ids)
        for lane in self.lanes:
            missing = [s for s in lane.successors if s not in known]
            if missing:
                raise ValueError(f"lane {lane.id} references unknown successors {missing}")
        unknown_route = [lane_id for lane_id in self.route if lane_id not in known]
        if unknown_route:
            raise ValueError(f"route references unknown lanes {unknown_route}")
        for light in self.traffic_lights:
            if light.lane_id not in known:
                raise ValueError(f"traffic light references unknown lane {light.lane_id}")

        agent_ids = [agent.id for agent in self.agents_init]
        if len(set(agent_ids)) != len(agent_ids):
            raise ValueError(f"scenario {self.id} has duplicate agent ids")
        stray = [agent_id for agent_id in self.agent_scripts if agent_id not in agent_ids]
        if stray:
            raise ValueError(f"scripts reference unknown agents {stray}")

        polygon = Polygon(self.drivable_polygon)
        if not polygon.is_valid or polygon.area <= 0.0:
            raise ValueError("drivable polygon must be a valid non-empty polygon")
        ego = self.ego_init.pose
        if not polygon.buffer(1e-6).covers(Point(ego.x, ego.y)):
            raise ValueError("ego_init must lie inside the drivable polygon")
        return self

    @property
    def duration(self) -> float:
        return self.duration_steps * self.dt

    def lane(self, lane_id: str) -> Lane:
        for lane in self.lanes:
            if lane.id == lane_id:
                return lane
        raise KeyError(lane_id)

    def resolved_route(self) -> list[str]:
        """Explicit route, or the first lane followed by its first-successor chain."""
        if self.route:
            return list(self.route)
        chain = [self.lanes[0].id]
        while True:
            successors = self.lane(chain[-1]).successors
            if not successors or successors[0] in chain:
                return chain
            chain.append(successors[0])

    def route_path(self) -> ReferencePath:
        if self._route_path is None:
            lane_map = self.lane_map()
            route = self.resolved_route()
            limits = [lane_map.effective_limits[lane_map.lane_ids.index(lane_id)] for lane_id in route]
            self._route_path = ReferencePath.from_lanes(
                [self.lane(lane_id) for lane_id in route],
                speed_limits=[None if np.isnan(limit) else float(limit) for limit in limits],
            )
        return self._route_path

    def lane_map(self) -> LaneMap:
        if self._lane_map is None:
            self._lane_map = LaneMap(self.lanes)
        return self._lane_map

    def drivable_area(self) -> Polygon:
        if self._drivable is None:
            self._drivable = Polygon(self.drivable_polygon)
        return self._drivable

    def route_arc_of(self, lane_id: str, arc: float) -> Optional[float]:
        """Arc length on the route of a point ``arc`` meters along ``lane_id``; None when off-route."""
        route = self.resolved_route()
        if lane_id not in route:
            return None
        offset = 0.0
        for route_lane in route:
            if route_lane == lane_id:
                return offset + arc
            offset += self.lane(route_lane).path().length
        return None


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Timed ego samples on a fixed step; headings are kept unwrapped."""
    times: np.ndarray
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        for name in ("times", "x", "y", "heading", "velocity"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).copy())
        n = len(self.times)
        if n == 0:
            raise InvalidTrajectoryError("Trajectory needs at least one sample")
        if any(len(getattr(self, name)) != n for name in ("x", "y", "heading", "velocity")):
            raise InvalidTrajectoryError("Trajectory arrays must share one length")
        if n > 1:
            steps = np.diff(self.times)
            if np.any(steps <= 0.0) or not np.allclose(steps, steps[0], atol=1e-6):
                raise InvalidTrajectoryError("Trajectory timestamps must increase on a fixed step")
        if np.any(self.velocity < -1e-9):
            raise InvalidTrajectoryError("Trajectory velocity must be non-negative")
        np.maximum(self.velocity, 0.0, out=self.velocity)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self) > 1 else 0.0

    @property
    def horizon(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def xy(self) -> np.ndarray:
        return np.stack([self.x, self.y], axis=-1)

    def pose_at(self, index: int) -> Pose2D:
        return Pose2D(x=float(self.x[index]), y=float(self.y[index]), heading=float(self.heading[index]))

    @property
    def samples(self) -> list[tuple[float, Pose2D, float]]:
        return [(float(self.times[i]), self.pose_at(i), float(self.velocity[i])) for i in range(len(self))]

    @classmethod
    def from_samples(cls, samples: list[tuple[float, Pose2D, float]]) -> "Trajectory":
        return cls(
            times=[t for t, _, _ in samples],
            x=[p.x for _, p, _ in samples],
            y=[p.y for _, p, _ in samples],
            heading=np.unwrap([p.heading for _, p, _ in samples]),
            velocity=[v for _, _, v in samples],
        )

    @classmethod
    def from_states(cls, states: list[EgoState]) -> "Trajectory":
        return cls(
            times=[s.timestamp for s in states],
            x=[s.pose.x for s in states],
            y=[s.pose.y for s in states],
            heading=np.unwrap([s.pose.heading for s in states]),
            velocity=[s.velocity for s in states],
        )


@dataclass(frozen=True)
class WorldState:
    """Everything the planner sees at one tick."""
    scenario: Scenario
    tick: int
    ego: EgoState
    agents: tuple[AgentState, ...]

    @property
    def time(self) -> float:
        return self.tick * self.scenario.dt

    def light_states(self) -> dict[str, LightState]:
        return {light.lane_id: light.state_at(self.time) for light in self.scenario.traffic_lights}
