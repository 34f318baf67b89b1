import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from harness.dto import SimulationMode
from planner.dto import PlannerParams
from planner.idm_planner import CORRIDOR_MARGIN, LEADER_RANGE, STOP_LINE_DEPTH, idm_acceleration
from scene.geometry import ReferencePath, box_corners
from scene.scene_types import AgentState, EgoState, Pose2D, Scenario, SpeedKeyframe

logger = logging.getLogger(__name__)

REACTIVE_KINDS = ("vehicle", "bicycle")


def scripted_speed(initial_speed: float, frames: Sequence[SpeedKeyframe], time: float) -> float:
    """Piecewise-constant speed: the latest keyframe at or before ``time``."""
    speed = initial_speed
    for frame in frames:
        if frame.time <= time + 1e-9:
            speed = frame.speed
    return speed


def scripted_distance(initial_speed: float, frames: Sequence[SpeedKeyframe], time: float) -> float:
    """Distance covered by ``time`` under the piecewise-constant speed profile."""
    distance, speed, last = 0.0, initial_speed, 0.0
    for frame in frames:
        if frame.time >= time:
            break
        distance += speed * max(0.0, frame.time - last)
        speed, last = frame.speed, max(last, frame.time)
    return distance + speed * max(0.0, time - last)


@dataclass
class _Track:
    """An agent bound to a path: arc length, lateral offset and travel direction."""
    agent: AgentState
    path: Optional[ReferencePath]
    arc: float
    lateral: float
    direction: float

    def pose(self, arc: float) -> Pose2D:
        if self.path is None:
            origin = self.agent.pose
            return Pose2D(
                x=origin.x + arc * math.cos(origin.heading),
                y=origin.y + arc * math.sin(origin.heading),
                heading=origin.heading,
            )
        x, y = self.path.position_at(arc, self.lateral)
        heading = float(self.path.heading_at(arc)) + (0.0 if self.direction > 0 else math.pi)
        return Pose2D(x=float(x), y=float(y), heading=heading)


def _bind(scenario: Scenario, agent: AgentState) -> _Track:
    if agent.lane_id is None or agent.kind in ("pedestrian", "static_object"):
        return _Track(agent, None, 0.0, 0.0, 1.0)
    path = scenario.lane(agent.lane_id).path()
    s, d = path.project(np.array([agent.pose.x, agent.pose.y]))
    along = math.cos(agent.pose.heading - float(path.heading_at(s)))
    return _Track(agent, path, float(s), float(d), 1.0 if along >= 0.0 else -1.0)


class AgentPolicy(ABC):
    """Moves background agents from one tick to the next."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.tracks = {agent.id: _bind(scenario, agent) for agent in scenario.agents_init}

    def initial(self) -> tuple[AgentState, ...]:
        return tuple(self.scenario.agents_init)

    @abstractmethod
    def step(self, tick: int, agents: Sequence[AgentState], ego: EgoState) -> tuple[AgentState, ...]:
        """States at ``tick + 1`` given the states and the ego at ``tick``."""


class ReplayPolicy(AgentPolicy):
    """Non-reactive agents: follow their lane at a constant offset with the scripted speeds."""

    def replay_state(self, agent_id: str, time: float) -> AgentState:
        track = self.tracks[agent_id]
        agent = track.agent
        frames = self.scenario.agent_scripts.get(agent_id, [])
        distance = scripted_distance(agent.speed, frames, time)
        if agent.kind == "static_object":
            distance = 0.0
        pose = track.pose(track.arc + track.direction * distance) if track.path is not None else track.pose(distance)
        return agent.model_copy(update={"pose": pose, "speed": scripted_speed(agent.speed, frames, time)})

    def step(self, tick: int, agents: Sequence[AgentState], ego: EgoState) -> tuple[AgentState, ...]:
        time = (tick + 1) * self.scenario.dt
        return tuple(self.replay_state(agent.id, time) for agent in agents)


class ReactiveIdmPolicy(ReplayPolicy):
    """
    Vehicles and bicycles on a lane follow IDM with default parameters, reacting to the ego,
    to each other and to red lights; everything else replays its script.

    The scripted speed is the cruise speed; a script speed of zero holds the agent.
    """

    def __init__(self, scenario: Scenario, params: PlannerParams = PlannerParams()):
        super().__init__(scenario)
        self.params = params
        self.arcs = {agent_id: track.arc for agent_id, track in self.tracks.items()}

    def _obstacles(self, agents: Sequence[AgentState], ego: EgoState):
        boxes = [(None, ego.pose, ego.length, ego.width, ego.velocity)]
        boxes += [(a.id, a.pose, a.length, a.width, a.speed) for a in agents]
        corners = box_corners(
            [b[1].x for b in boxes], [b[1].y for b in boxes], [b[1].heading for b in boxes],
            [b[2] for b in boxes], [b[3] for b in boxes],
        )
        return boxes, corners

    def _leader(self, track: _Track, arc: float, agent: AgentState, boxes, corners, time: float) -> tuple[float, float]:
        path = track.path
        s, d = path.project(corners.reshape(-1, 2))
        s = s.reshape(-1, 4) * track.direction
        d = d.reshape(-1, 4) * track.direction
        own_arc = arc * track.direction
        own_lateral = track.lateral * track.direction
        half = (agent.width + CORRIDOR_MARGIN) / 2.0
        front = own_arc + agent.length / 2.0

        gap, lead_speed = math.inf, 0.0
        for i, (other_id, pose, _, _, speed) in enumerate(boxes):
            if other_id == agent.id:
                continue
            if d[i].max() < own_lateral - half or d[i].min() > own_lateral + half:
                continue
            if s[i].max() <= front or s[i].min() - front > LEADER_RANGE:
                continue
            candidate = s[i].min() - front
            if candidate < gap:
                heading = float(path.heading_at(float(np.mean(s[i]) * track.direction)))
                gap = candidate
                lead_speed = max(0.0, speed * math.cos(pose.heading - heading) * track.direction)

        for light in self.scenario.traffic_lights:
            if light.lane_id != agent.lane_id or track.direction < 0 or light.state_at(time) != "red":
                continue
            stop_gap = light.stop_arc - front
            if 0.0 < stop_gap + STOP_LINE_DEPTH and stop_gap < gap:
                gap, lead_speed = stop_gap, 0.0
        return gap, lead_speed

    def step(self, tick: int, agents: Sequence[AgentState], ego: EgoState) -> tuple[AgentState, ...]:
        dt = self.scenario.dt
        time = tick * dt
        boxes, corners = self._obstacles(agents, ego)
        moved = []
        for agent in agents:
            track = self.tracks[agent.id]
            if agent.kind not in REACTIVE_KINDS or track.path is None:
                moved.append(self.replay_state(agent.id, time + dt))
                continue

            cruise = scripted_speed(track.agent.speed, self.scenario.agent_scripts.get(agent.id, []), time)
            if cruise <= 0.0:
                moved.append(agent.model_copy(update={"speed": 0.0}))
                continue
            arc = self.arcs[agent.id]
            gap, lead_speed = self._leader(track, arc, agent, boxes, corners, time)
            acc = idm_acceleration(agent.speed, cruise, gap, agent.speed - lead_speed, self.params)
            speed = min(max(0.0, agent.speed + acc * dt), max(cruise, agent.speed))
            arc += track.direction * speed * dt
            self.arcs[agent.id] = arc
            moved.append(agent.model_copy(update={"pose": track.pose(arc), "speed": speed}))
        return tuple(moved)


def make_agent_policy(scenario: Scenario, mode: SimulationMode) -> AgentPolicy:
    if mode == "reactive":
        return ReactiveIdmPolicy(scenario)
    return ReplayPolicy(scenario)
