import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from metrics.closed_loop_metrics import AgentTracks, ScoringContext, evaluate_episode
from metrics.dto import MetricReport, MetricThresholds, ScoreWeights
from planner.dto import PROPOSAL_HORIZON, Proposal
from planner.planner_exceptions import EmptyProposalSetError, PlannerError
from scene.geometry import box_corners, boxes_overlap
from scene.scene_types import EGO_LENGTH, EGO_WIDTH, AgentState, EgoState, Pose2D, Scenario, WorldState

logger = logging.getLogger(__name__)

FORECAST_RADIUS = 50.0
EMERGENCY_WINDOW = 2.0
DEFAULT_REFERENCE_SPEED = 15.0


@dataclass(frozen=True, eq=False)
class Forecast:
    """Constant-velocity prediction of the nearby agents, one column per future tick."""
    times: np.ndarray
    tracks: AgentTracks

    @property
    def ticks(self) -> int:
        return len(self.times)

    @property
    def horizon(self) -> float:
        return float(self.times[-1] - self.times[0])

    def agent_ids(self) -> tuple[str, ...]:
        return self.tracks.ids

    def states_at(self, tick: int) -> list[AgentState]:
        tracks = self.tracks
        return [
            AgentState(
                id=tracks.ids[i],
                kind=tracks.kinds[i],
                pose=Pose2D(x=float(tracks.x[i, tick]), y=float(tracks.y[i, tick]), heading=float(tracks.heading[i, tick])),
                speed=float(tracks.speed[i, tick]),
                length=float(tracks.lengths[i]),
                width=float(tracks.widths[i]),
            )
            for i in range(tracks.count)
        ]


def forecast_constant_velocity(
        agents: Sequence[AgentState],
        horizon: float,
        dt: float,
        ego: Optional[EgoState] = None,
        radius: float = FORECAST_RADIUS,
        start_time: float = 0.0,
) -> Forecast:
    """
    Advance every agent along its heading at its current speed.

    Agents whose center lies farther than ``radius`` from the ego are dropped.
    """
    if horizon <= 0.0:
        raise PlannerError(f"Forecast horizon must be positive, got {horizon}")
    steps = int(round(horizon / dt))
    offsets = np.arange(steps + 1) * dt
    times = start_time + offsets

    if ego is not None:
        agents = [a for a in agents if math.hypot(a.pose.x - ego.pose.x, a.pose.y - ego.pose.y) <= radius]
    agents = sorted(agents, key=lambda a: a.id)
    if not agents:
        return Forecast(times=times, tracks=AgentTracks.empty(len(times)))

    x0 = np.array([a.pose.x for a in agents])[:, None]
    y0 = np.array([a.pose.y for a in agents])[:, None]
    heading = np.array([a.pose.heading for a in agents])[:, None]
    speed = np.array([a.speed for a in agents])[:, None]
    shape = (len(agents), len(times))
    tracks = AgentTracks(
        ids=tuple(a.id for a in agents),
        kinds=tuple(a.kind for a in agents),
        lengths=np.array([a.length for a in agents]),
        widths=np.array([a.width for a in agents]),
        x=x0 + speed * np.cos(heading) * offsets,
        y=y0 + speed * np.sin(heading) * offsets,
        heading=np.broadcast_to(heading, shape).copy(),
        speed=np.broadcast_to(speed, shape).copy(),
        present=np.ones(shape, dtype=bool),
    )
    return Forecast(times=times, tracks=tracks)


def progress_reference(scenario: Scenario, ego: EgoState, horizon: float) -> float:
    """Distance a proposal should cover: the expert's mean speed, else the route limit, over the horizon."""
    if scenario.expert_progress is not None and scenario.expert_progress > 0.0:
        return scenario.expert_progress / scenario.duration * horizon
    route = scenario.route_path()
    s, _ = route.project(np.array([ego.pose.x, ego.pose.y]))
    limit = float(route.speed_limit_at(s))
    return (DEFAULT_REFERENCE_SPEED if math.isnan(limit) else limit) * horizon


def scoring_context(scenario: Scenario, ego: EgoState, horizon: float = PROPOSAL_HORIZON) -> ScoringContext:
    return ScoringContext.from_scenario(
        scenario,
        expert_progress=progress_reference(scenario, ego, horizon),
        apply_progress_gate=False,
        use_scenario_expert=False,
    )


def score_proposal(
        proposal: Proposal,
        forecast: Forecast,
        scenario: Scenario,
        context: Optional[ScoringContext] = None,
        ego_length: float = EGO_LENGTH,
        ego_width: float = EGO_WIDTH,
        thresholds: MetricThresholds = MetricThresholds(),
        weights: ScoreWeights = ScoreWeights(),
) -> MetricReport:
    """Score a proposal against the forecast with the episode metrics and store the report on it."""
    trajectory = proposal.trajectory
    if len(trajectory) != forecast.ticks:
        raise PlannerError(
            f"Proposal has {len(trajectory)} samples but the forecast has {forecast.ticks}"
        )
    if context is None:
        ego = EgoState(
            pose=trajectory.pose_at(0), velocity=float(trajectory.velocity[0]),
            length=ego_length, width=ego_width, timestamp=max(0.0, float(trajectory.times[0])),
        )
        context = scoring_context(scenario, ego, trajectory.horizon)
    report = evaluate_episode(
        trajectory, forecast.tracks, context, ego_length, ego_width, thresholds, weights,
        ttc_horizon=thresholds.ttc_threshold,
    )
    proposal.predicted_scores = report
    return report


def select_best(proposals: Sequence[Proposal]) -> tuple[Proposal, float]:
    """Highest predicted aggregate; ties go to the smaller |offset|, then the higher target speed."""
    if not proposals:
        raise EmptyProposalSetError("Cannot select from an empty proposal set")
    best = max(
        proposals,
        key=lambda p: (p.predicted_aggregate, -abs(p.source_offset), p.source_target_speed),
    )
    return best, best.predicted_aggregate


def check_emergency(
        best: Proposal,
        forecast: Forecast,
        ego_length: float = EGO_LENGTH,
        ego_width: float = EGO_WIDTH,
        window: float = EMERGENCY_WINDOW,
) -> bool:
    """True iff the proposal's box meets any forecast box at a tick within ``window`` seconds."""
    tracks = forecast.tracks
    if tracks.count == 0:
        return False
    trajectory = best.trajectory
    elapsed = trajectory.times - trajectory.times[0]
    ticks = int(np.count_nonzero(elapsed <= window + 1e-9))
    ticks = min(ticks, forecast.ticks)
    ego = box_corners(
        trajectory.x[:ticks], trajectory.y[:ticks], trajectory.heading[:ticks], ego_length, ego_width
    )
    agents = tracks.corners()[:, :ticks]
    hits = boxes_overlap(ego[None], agents) & tracks.present[:, :ticks]
    return bool(hits.any())


class InternalSimulator:
    """
    Planner-side world model: constant-velocity forecast, proposal scoring and selection.

    Subclasses may override ``score`` to script predicted reports.
    """

    def __init__(
            self,
            thresholds: MetricThresholds = MetricThresholds(),
            weights: ScoreWeights = ScoreWeights(),
            radius: float = FORECAST_RADIUS,
            emergency_window: float = EMERGENCY_WINDOW,
    ):
        self.thresholds = thresholds
        self.weights = weights
        self.radius = radius
        self.emergency_window = emergency_window

    def forecast(self, world: WorldState, horizon: float = PROPOSAL_HORIZON) -> Forecast:
        return forecast_constant_velocity(
            world.agents, horizon, world.scenario.dt, ego=world.ego, radius=self.radius,
            start_time=world.ego.timestamp,
        )

    def score(self, world: WorldState, proposals: Sequence[Proposal], forecast: Forecast) -> list[MetricReport]:
        context = scoring_context(world.scenario, world.ego, forecast.horizon)
        return [
            score_proposal(
                proposal, forecast, world.scenario, context,
                world.ego.length, world.ego.width, self.thresholds, self.weights,
            )
            for proposal in proposals
        ]

    def select(self, world: WorldState, proposals: Sequence[Proposal], forecast: Forecast) -> tuple[Proposal, float]:
        self.score(world, proposals, forecast)
        best, aggregate = select_best(proposals)
        logger.debug(
            f"Tick {world.tick}: best of {len(proposals)} proposals offset={best.source_offset} "
            f"v0={best.source_target_speed:.1f} aggregate={aggregate:.3f}"
        )
        return best, aggregate

    def is_emergency(self, world: WorldState, proposal: Proposal, forecast: Forecast) -> bool:
        return check_emergency(proposal, forecast, world.ego.length, world.ego.width, self.emergency_window)
