import sys
import os

sys.path.insert(0, os.path.abspath(os.path.dirname(__file__)))

from typing import Callable, Optional, Sequence

import numpy as np
import pytest

from metrics.closed_loop_metrics import compose_report
from metrics.dto import MetricReport
from planner.dto import Proposal
from planner.internal_sim import InternalSimulator
from scene.scene_types import AgentState, EgoState, Lane, Pose2D, Scenario, Trajectory, WorldState


def lane_factory(
        lane_id: str = "main",
        start: tuple[float, float] = (0.0, 0.0),
        end: tuple[float, float] = (300.0, 0.0),
        speed_limit: Optional[float] = 13.9,
        **kwargs,
) -> Lane:
    return Lane(id=lane_id, centerline=[start, end], speed_limit=speed_limit, **kwargs)


def agent_factory(
        agent_id: str = "agent_1",
        x: float = 50.0,
        y: float = 0.0,
        heading: float = 0.0,
        speed: float = 0.0,
        kind: str = "vehicle",
        **kwargs,
) -> AgentState:
    return AgentState(id=agent_id, kind=kind, pose=Pose2D(x=x, y=y, heading=heading), speed=speed, **kwargs)


def scenario_factory(
        agents: Sequence[AgentState] = (),
        ego_x: float = 10.0,
        ego_y: float = 0.0,
        ego_speed: float = 10.0,
        lanes: Optional[list[Lane]] = None,
        polygon: Optional[list[tuple[float, float]]] = None,
        scenario_id: str = "test_scenario",
        **kwargs,
) -> Scenario:
    return Scenario(
        id=scenario_id,
        lanes=lanes or [lane_factory()],
        drivable_polygon=polygon or [(-10.0, -1.75), (310.0, -1.75), (310.0, 1.75), (-10.0, 1.75)],
        ego_init=EgoState(pose=Pose2D(x=ego_x, y=ego_y), velocity=ego_speed),
        agents_init=list(agents),
        **kwargs,
    )


def world_factory(scenario: Scenario, tick: int = 0, ego: Optional[EgoState] = None) -> WorldState:
    ego = ego or scenario.ego_init.model_copy(update={"timestamp": tick * scenario.dt})
    return WorldState(scenario=scenario, tick=tick, ego=ego, agents=tuple(scenario.agents_init))


def straight_trajectory(
        speed: float = 10.0,
        ticks: int = 81,
        dt: float = 0.1,
        x0: float = 10.0,
        y: float = 0.0,
        heading: float = 0.0,
) -> Trajectory:
    t = np.arange(ticks) * dt
    return Trajectory(
        times=t,
        x=x0 + speed * t * np.cos(heading),
        y=y + speed * t * np.sin(heading),
        heading=np.full(ticks, heading),
        velocity=np.full(ticks, speed),
    )


def report_factory(aggregate: float = 1.0) -> MetricReport:
    """A report carrying exactly the given aggregate."""
    return MetricReport(
        collisions=1.0, ttc=1.0, drivable=1.0, comfort=1.0, progress=aggregate,
        speed_limit=1.0, direction=1.0, aggregate=aggregate,
    )


class ScriptedSimulator(InternalSimulator):
    """Internal simulator whose predicted aggregates come from a callable."""

    def __init__(self, score_of: Callable[[Proposal], float]):
        super().__init__()
        self.score_of = score_of
        self.scored = 0

    def score(self, world, proposals, forecast):
        reports = []
        for proposal in proposals:
            report = report_factory(self.score_of(proposal))
            proposal.predicted_scores = report
            reports.append(report)
        self.scored += len(proposals)
        return reports


@pytest.fixture
def empty_road() -> Scenario:
    return scenario_factory()


@pytest.fixture
def empty_world(empty_road) -> WorldState:
    return world_factory(empty_road)


@pytest.fixture
def perfect_report() -> MetricReport:
    return compose_report(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
