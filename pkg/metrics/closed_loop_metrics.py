import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import shapely
from scipy.signal import savgol_filter
from shapely.geometry import Polygon

from metrics.dto import CollisionEvent, MetricReport, MetricThresholds, ScoreWeights, Violation
from scene.geometry import LaneMap, ReferencePath, box_corners, boxes_overlap
from scene.scene_types import EGO_LENGTH, EGO_WIDTH, AgentState, Scenario, Trajectory

logger = logging.getLogger(__name__)

AGENT_KINDS_FATAL = ("vehicle", "pedestrian", "bicycle")
COMFORT_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class AgentTracks:
    """Per-agent state arrays of shape (agents, ticks)."""
    ids: tuple[str, ...]
    kinds: tuple[str, ...]
    lengths: np.ndarray
    widths: np.ndarray
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    speed: np.ndarray
    present: np.ndarray

    @property
    def count(self) -> int:
        return len(self.ids)

    @classmethod
    def empty(cls, ticks: int) -> "AgentTracks":
        zeros = np.zeros((0, ticks))
        return cls((), (), np.zeros(0), np.zeros(0), zeros, zeros, zeros, zeros, zeros.astype(bool))

    @classmethod
    def from_states(cls, states_per_tick: Sequence[Sequence[AgentState]]) -> "AgentTracks":
        """Stack per-tick agent lists; agents missing at a tick are marked absent."""
        ticks = len(states_per_tick)
        order: dict[str, AgentState] = {}
        for states in states_per_tick:
            for state in states:
                order.setdefault(state.id, state)
        ids = tuple(sorted(order))
        if not ids:
            return cls.empty(ticks)

        index = {agent_id: i for i, agent_id in enumerate(ids)}
        shape = (len(ids), ticks)
        x, y, heading, speed = (np.zeros(shape) for _ in range(4))
        present = np.zeros(shape, dtype=bool)
        for t, states in enumerate(states_per_tick):
            for state in states:
                i = index[state.id]
                x[i, t], y[i, t] = state.pose.x, state.pose.y
                heading[i, t], speed[i, t] = state.pose.heading, state.speed
                present[i, t] = True
        return cls(
            ids=ids,
            kinds=tuple(order[i].kind for i in ids),
            lengths=np.array([order[i].length for i in ids]),
            widths=np.array([order[i].width for i in ids]),
            x=x, y=y, heading=heading, speed=speed, present=present,
        )

    def corners(self) -> np.ndarray:
        return box_corners(self.x, self.y, self.heading, self.lengths[:, None], self.widths[:, None])


@dataclass(frozen=True, eq=False)
class ScoringContext:
    """Map-derived inputs shared by every metric of one scenario."""
    route: ReferencePath
    lane_map: LaneMap
    drivable_area: Polygon
    expert_progress: Optional[float]
    apply_progress_gate: bool = True

    @classmethod
    def from_scenario(
            cls,
            scenario: Scenario,
            expert_progress: Optional[float] = None,
            apply_progress_gate: bool = True,
            use_scenario_expert: bool = True,
    ) -> "ScoringContext":
        if expert_progress is None and use_scenario_expert:
            expert_progress = scenario.expert_progress
        return cls(
            route=scenario.route_path(),
            lane_map=scenario.lane_map(),
            drivable_area=scenario.drivable_area(),
            expert_progress=expert_progress,
            apply_progress_gate=apply_progress_gate,
        )


@dataclass
class MetricOutcome:
    score: float
    violations: list[Violation] = field(default_factory=list)


@dataclass
class CollisionOutcome(MetricOutcome):
    events: list[CollisionEvent] = field(default_factory=list)
    collided_at: dict[int, int] = field(default_factory=dict)


@dataclass
class TtcOutcome(MetricOutcome):
    min_ttc: Optional[float] = None


@dataclass
class ProgressOutcome(MetricOutcome):
    ego_progress: float = 0.0
    making_progress: bool = True


def _ego_corners(trajectory: Trajectory, ego_length: float, ego_width: float) -> np.ndarray:
    return box_corners(trajectory.x, trajectory.y, trajectory.heading, ego_length, ego_width)


def _ego_at_fault(
        trajectory: Trajectory,
        agents: AgentTracks,
        agent: int,
        tick: int,
        route: ReferencePath,
        thresholds: MetricThresholds,
) -> bool:
    if trajectory.velocity[tick] < thresholds.stopped_speed:
        return False
    heading = trajectory.heading[tick]
    dx = agents.x[agent, tick] - trajectory.x[tick]
    dy = agents.y[agent, tick] - trajectory.y[tick]
    if dx * np.cos(heading) + dy * np.sin(heading) > 0.0:
        return True
    s, d = route.project(np.array([trajectory.x[tick], trajectory.y[tick]]))
    return bool(abs(d) > route.half_width_at(s))


def metric_collisions(
        trajectory: Trajectory,
        agents: AgentTracks,
        route: ReferencePath,
        ego_length: float = EGO_LENGTH,
        ego_width: float = EGO_WIDTH,
        thresholds: MetricThresholds = MetricThresholds(),
) -> CollisionOutcome:
    """
    Count each agent's first overlap with the ego once and classify fault.

    An at-fault collision with a vehicle, pedestrian or bicycle scores 0; at-fault
    collisions with static objects score 0.5 for one and 0 for two or more.
    """
    if agents.count == 0:
        return CollisionOutcome(score=1.0)

    overlap = boxes_overlap(_ego_corners(trajectory, ego_length, ego_width)[None], agents.corners())
    overlap &= agents.present

    events: list[CollisionEvent] = []
    collided_at: dict[int, int] = {}
    for agent in range(agents.count):
        hits = np.flatnonzero(overlap[agent])
        if hits.size == 0:
            continue
        tick = int(hits[0])
        collided_at[agent] = tick
        events.append(CollisionEvent(
            tick=tick,
            agent_id=agents.ids[agent],
            agent_kind=agents.kinds[agent],
            at_fault=_ego_at_fault(trajectory, agents, agent, tick, route, thresholds),
        ))
    events.sort(key=lambda e: (e.tick, e.agent_id))

    fatal = [e for e in events if e.at_fault and e.agent_kind in AGENT_KINDS_FATAL]
    objects = [e for e in events if e.at_fault and e.agent_kind not in AGENT_KINDS_FATAL]
    if fatal or len(objects) >= 2:
        score = 0.0
    elif objects:
        score = 0.5
    else:
        score = 1.0

    violations = [
        Violation(metric="collisions", tick=e.tick, detail=f"{e.agent_kind} {e.agent_id} at_fault={e.at_fault}")
        for e in events
    ]
    return CollisionOutcome(score=score, violations=violations, events=events, collided_at=collided_at)


def metric_ttc(
        trajectory: Trajectory,
        agents: AgentTracks,
        ego_length: float = EGO_LENGTH,
        ego_width: float = EGO_WIDTH,
        thresholds: MetricThresholds = MetricThresholds(),
        collided_at: Optional[dict[int, int]] = None,
        horizon: Optional[float] = None,
) -> TtcOutcome:
    """
    Time-to-collision from constant-velocity projections of ego and agents.

    At every tick where the ego moves, boxes are projected in ``ttc_step`` sub-steps up to
    ``horizon`` (default ``ttc_horizon``); agents behind the ego and agents already collided
    with are ignored. Score is 0 if any TTC falls below ``ttc_threshold``.
    """
    if agents.count == 0 or len(trajectory) == 0:
        return TtcOutcome(score=1.0)

    horizon = thresholds.ttc_horizon if horizon is None else horizon
    steps = int(np.floor(horizon / thresholds.ttc_step + 1e-9))
    offsets = np.arange(1, steps + 1) * thresholds.ttc_step
    if offsets.size == 0:
        return TtcOutcome(score=1.0)

    cos_e, sin_e = np.cos(trajectory.heading), np.sin(trajectory.heading)
    ex = trajectory.x[:, None] + (trajectory.velocity * cos_e)[:, None] * offsets
    ey = trajectory.y[:, None] + (trajectory.velocity * sin_e)[:, None] * offsets
    ego = box_corners(ex, ey, trajectory.heading[:, None], ego_length, ego_width)

    ax = agents.x[..., None] + (agents.speed * np.cos(agents.heading))[..., None] * offsets
    ay = agents.y[..., None] + (agents.speed * np.sin(agents.heading))[..., None] * offsets
    projected = box_corners(
        ax, ay, agents.heading[..., None], agents.lengths[:, None, None], agents.widths[:, None, None]
    )

    lon = (agents.x - trajectory.x) * cos_e + (agents.y - trajectory.y) * sin_e
    eligible = agents.present & (lon >= -ego_length / 2.0)
    for agent, tick in (collided_at or {}).items():
        eligible[agent, tick:] = False

    hits = boxes_overlap(ego[None], projected) & eligible[..., None]
    any_hit = hits.any(axis=-1)
    first = np.where(any_hit, offsets[np.argmax(hits, axis=-1)], np.inf)
    ttc = first.min(axis=0)

    moving = trajectory.velocity > thresholds.ttc_moving_speed
    violating = np.flatnonzero(moving & (ttc < thresholds.ttc_threshold))
    violations = [
        Violation(metric="ttc", tick=int(t), detail=f"ttc={ttc[t]:.2f}s") for t in violating
    ]
    moving_ttc = ttc[moving]
    min_ttc = float(moving_ttc.min()) if moving_ttc.size and np.isfinite(moving_ttc.min()) else None
    return TtcOutcome(score=0.0 if violations else 1.0, violations=violations, min_ttc=min_ttc)


def metric_drivable(
        trajectory: Trajectory,
        drivable_area: Polygon,
        ego_length: float = EGO_LENGTH,
        ego_width: float = EGO_WIDTH,
        thresholds: MetricThresholds = MetricThresholds(),
) -> MetricOutcome:
    """0 iff any ego corner lies more than ``drivable_tolerance`` outside the polygon."""
    corners = _ego_corners(trajectory, ego_length, ego_width)
    distance = shapely.distance(drivable_area, shapely.points(corners.reshape(-1, 2)))
    worst = np.asarray(distance).reshape(-1, 4).max(axis=1)
    violating = np.flatnonzero(worst > thresholds.drivable_tolerance)
    violations = [
        Violation(metric="drivable", tick=int(t), detail=f"{worst[t]:.2f}m outside") for t in violating
    ]
    return MetricOutcome(score=0.0 if violations else 1.0, violations=violations)


def comfort_signals(trajectory: Trajectory, thresholds: MetricThresholds = MetricThresholds()) -> dict[str, np.ndarray]:
    """Savitzky-Golay derivatives of the trajectory; exact for quadratic signals."""
    n = len(trajectory)
    window = min(thresholds.comfort_window, n if n % 2 else n - 1)
    dt = trajectory.dt

    def derive(signal: np.ndarray, order: int) -> np.ndarray:
        return savgol_filter(signal, window, polyorder=2, deriv=order, delta=dt, mode="interp")

    heading = np.unwrap(trajectory.heading)
    lon_accel = derive(trajectory.velocity, 1)
    yaw_rate = derive(heading, 1)
    lat_accel = trajectory.velocity * yaw_rate
    lon_jerk = derive(trajectory.velocity, 2)
    lat_jerk = derive(lat_accel, 1)
    return {
        "lon_accel": lon_accel,
        "lat_accel": lat_accel,
        "yaw_rate": yaw_rate,
        "yaw_accel": derive(heading, 2),
        "lon_jerk": lon_jerk,
        "jerk_magnitude": np.hypot(lon_jerk, lat_jerk),
    }


def metric_comfort(trajectory: Trajectory, thresholds: MetricThresholds = MetricThresholds()) -> MetricOutcome:
    if len(trajectory) < 3:
        return MetricOutcome(score=1.0)
    signals = comfort_signals(trajectory, thresholds)
    tol = COMFORT_TOLERANCE
    bounds = {
        "lon_accel": (thresholds.min_lon_accel, thresholds.max_lon_accel),
        "lat_accel": (-thresholds.max_lat_accel, thresholds.max_lat_accel),
        "yaw_rate": (-thresholds.max_yaw_rate, thresholds.max_yaw_rate),
        "yaw_accel": (-thresholds.max_yaw_accel, thresholds.max_yaw_accel),
        "lon_jerk": (-thresholds.max_lon_jerk, thresholds.max_lon_jerk),
        "jerk_magnitude": (-np.inf, thresholds.max_jerk_magnitude),
    }
    violations = []
    for name, (low, high) in bounds.items():
        signal = signals[name]
        bad = np.flatnonzero((signal < low - tol) | (signal > high + tol))
        if bad.size:
            tick = int(bad[0])
            violations.append(Violation(metric="comfort", tick=tick, detail=f"{name}={signal[tick]:.2f}"))
    return MetricOutcome(score=0.0 if violations else 1.0, violations=violations)


def metric_progress(
        trajectory: Trajectory,
        expert_progress: Optional[float],
        route: ReferencePath,
        thresholds: MetricThresholds = MetricThresholds(),
) -> ProgressOutcome:
    """Ego arc-length progress along the route relative to the expert's."""
    s, _ = route.project(trajectory.xy)
    progress = float(np.sum(np.diff(np.atleast_1d(s))))
    if progress < thresholds.negative_progress:
        ratio = 0.0
    elif expert_progress is None or expert_progress <= 1e-6:
        ratio = 1.0
    else:
        ratio = float(np.clip(progress / expert_progress, 0.0, 1.0))
    making_progress = ratio >= thresholds.making_progress_ratio
    violations = [] if making_progress else [
        Violation(metric="progress", tick=len(trajectory) - 1, detail=f"ratio={ratio:.2f}")
    ]
    return ProgressOutcome(score=ratio, violations=violations, ego_progress=progress, making_progress=making_progress)


def metric_speed_limit(
        trajectory: Trajectory,
        lane_map: LaneMap,
        thresholds: MetricThresholds = MetricThresholds(),
) -> MetricOutcome:
    """1 minus the mean overspeed of the current lane, normalized by ``overspeed_cap``."""
    limits = lane_map.speed_limits(trajectory.xy)
    overspeed = np.maximum(0.0, trajectory.velocity - np.nan_to_num(limits, nan=np.inf))
    score = max(0.0, 1.0 - float(np.mean(overspeed)) / thresholds.overspeed_cap)
    violations = [
        Violation(metric="speed_limit", tick=int(t), detail=f"+{overspeed[t]:.2f}m/s")
        for t in np.flatnonzero(overspeed > 0.0)
    ]
    return MetricOutcome(score=score, violations=violations)


def metric_direction(
        trajectory: Trajectory,
        lane_map: LaneMap,
        thresholds: MetricThresholds = MetricThresholds(),
) -> MetricOutcome:
    """Largest against-flow displacement of the ego center within any sliding window."""
    if len(trajectory) < 2:
        return MetricOutcome(score=1.0)
    xy = trajectory.xy
    lane_heading = lane_map.headings(xy[1:])
    step = np.diff(xy, axis=0)
    along = step[:, 0] * np.cos(lane_heading) + step[:, 1] * np.sin(lane_heading)
    against = np.maximum(0.0, -along)
    width = max(1, int(round(thresholds.direction_window / trajectory.dt)))
    window_sums = np.convolve(against, np.ones(width), mode="full")[: len(against)]
    worst = float(window_sums.max())

    if worst <= thresholds.direction_compliance:
        return MetricOutcome(score=1.0)
    tick = int(np.argmax(window_sums)) + 1
    score = 0.5 if worst <= thresholds.direction_violation else 0.0
    return MetricOutcome(
        score=score,
        violations=[Violation(metric="direction", tick=tick, detail=f"{worst:.2f}m against traffic")],
    )


def aggregate_score(report: MetricReport, weights: ScoreWeights = ScoreWeights()) -> float:
    """Product of the multiplicative metrics times the weighted average of the rest."""
    multiplier = report.collisions * report.drivable * report.direction
    if not report.making_progress:
        multiplier = 0.0
    total = weights.ttc + weights.progress + weights.speed_limit + weights.comfort
    weighted = (
        weights.ttc * report.ttc
        + weights.progress * report.progress
        + weights.speed_limit * report.speed_limit
        + weights.comfort * report.comfort
    ) / total
    return float(np.clip(multiplier * weighted, 0.0, 1.0))


def compose_report(
        collisions: float,
        ttc: float,
        drivable: float,
        comfort: float,
        progress: float,
        speed_limit: float,
        direction: float,
        making_progress: bool = True,
        violations: Optional[list[Violation]] = None,
        collision_events: Optional[list[CollisionEvent]] = None,
        min_ttc: Optional[float] = None,
        weights: ScoreWeights = ScoreWeights(),
) -> MetricReport:
    """Build a report whose aggregate follows ``aggregate_score``."""
    partial = MetricReport(
        collisions=collisions, ttc=ttc, drivable=drivable, comfort=comfort, progress=progress,
        speed_limit=speed_limit, direction=direction, making_progress=making_progress, aggregate=0.0,
        violations=violations or [], collision_events=collision_events or [], min_ttc=min_ttc,
    )
    return partial.model_copy(update={"aggregate": aggregate_score(partial, weights)})


def evaluate_episode(
        trajectory: Trajectory,
        agents: AgentTracks,
        context: ScoringContext,
        ego_length: float = EGO_LENGTH,
        ego_width: float = EGO_WIDTH,
        thresholds: MetricThresholds = MetricThresholds(),
        weights: ScoreWeights = ScoreWeights(),
        ttc_horizon: Optional[float] = None,
) -> MetricReport:
    """Run every metric on one driven (or predicted) ego trajectory."""
    collisions = metric_collisions(trajectory, agents, context.route, ego_length, ego_width, thresholds)
    ttc = metric_ttc(
        trajectory, agents, ego_length, ego_width, thresholds,
        collided_at=collisions.collided_at, horizon=ttc_horizon,
    )
    drivable = metric_drivable(trajectory, context.drivable_area, ego_length, ego_width, thresholds)
    comfort = metric_comfort(trajectory, thresholds)
    progress = metric_progress(trajectory, context.expert_progress, context.route, thresholds)
    speed_limit = metric_speed_limit(trajectory, context.lane_map, thresholds)
    direction = metric_direction(trajectory, context.lane_map, thresholds)

    making_progress = progress.making_progress if context.apply_progress_gate else True
    violations = (
        collisions.violations + ttc.violations + drivable.violations + comfort.violations
        + progress.violations + speed_limit.violations + direction.violations
    )
    report = compose_report(
        collisions=collisions.score,
        ttc=ttc.score,
        drivable=drivable.score,
        comfort=comfort.score,
        progress=progress.score,
        speed_limit=speed_limit.score,
        direction=direction.score,
        making_progress=making_progress,
        violations=violations,
        collision_events=collisions.events,
        min_ttc=ttc.min_ttc,
        weights=weights,
    )
    logger.debug(f"Evaluated {len(trajectory)} ticks: aggregate={report.aggregate:.3f}")
    return report
