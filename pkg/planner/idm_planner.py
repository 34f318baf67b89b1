import logging
import math
from typing import Optional, Union

import numpy as np

from planner.dto import PROPOSAL_HORIZON, IdmCell, PlannerParams, Proposal, ProposalSweep
from scene.geometry import ReferencePath, box_corners
from scene.scene_types import EgoState, Trajectory, WorldState

logger = logging.getLogger(__name__)

LEADER_RANGE = 50.0
CORRIDOR_MARGIN = 1.0
LOOKAHEAD_DISTANCE = 5.0
LOOKAHEAD_TIME = 1.0
OFF_MAP_DISTANCE = 10.0
STOP_LINE_DEPTH = 0.5


def _idm(v, v0, gap, closing_speed, min_gap, headway, accel, decel, exponent):
    """Vectorised IDM with a clamp to [-decel, accel]; an infinite gap means no leader."""
    v0 = np.maximum(v0, 1e-3)
    desired = min_gap + np.maximum(0.0, v * headway + v * closing_speed / (2.0 * np.sqrt(accel * decel)))
    with np.errstate(divide="ignore", invalid="ignore"):
        interaction = np.where(np.isinf(gap), 0.0, (desired / gap) ** 2)
    acc = accel * (1.0 - (v / v0) ** exponent - interaction)
    acc = np.where(gap <= 0.0, -decel, acc)
    return np.clip(acc, -decel, accel)


def idm_acceleration(
        v: float,
        v0: float,
        gap: Optional[float],
        closing_speed: float,
        params: PlannerParams
) -> float:
    """
    Intelligent-driver-model acceleration.

    Args:
        v: current speed
        v0: target speed
        gap: bumper-to-bumper distance to the leader, None or inf without a leader
        closing_speed: v minus the leader speed
        params: supplies s0, T, a, b and the exponent

    Returns:
        Acceleration clamped to [-decel_max, accel_max]; -decel_max when gap <= 0
    """
    gap = math.inf if gap is None else gap
    return float(_idm(
        np.float64(v), np.float64(v0), np.float64(gap), np.float64(closing_speed),
        params.min_gap_to_lead_agent, params.headway_time, params.accel_max, params.decel_max,
        params.idm_exponent,
    ))


def _obstacle_spans(world: WorldState, route: ReferencePath) -> list[tuple[float, float, float, float, float]]:
    """(s_min, s_max, d_min, d_max, speed_along_route) of every agent and active red stop line."""
    spans = []
    agents = world.agents
    if agents:
        corners = box_corners(
            [a.pose.x for a in agents], [a.pose.y for a in agents], [a.pose.heading for a in agents],
            [a.length for a in agents], [a.width for a in agents],
        )
        s, d = route.project(corners.reshape(-1, 2))
        s, d = s.reshape(-1, 4), d.reshape(-1, 4)
        for i, agent in enumerate(agents):
            centre = float(np.mean(s[i]))
            along = agent.speed * math.cos(agent.pose.heading - float(route.heading_at(centre)))
            spans.append((float(s[i].min()), float(s[i].max()), float(d[i].min()), float(d[i].max()), along))

    for lane_id, state in world.light_states().items():
        if state != "red":
            continue
        light = next(l for l in world.scenario.traffic_lights if l.lane_id == lane_id)
        arc = world.scenario.route_arc_of(lane_id, light.stop_arc)
        if arc is not None:
            spans.append((arc, arc + STOP_LINE_DEPTH, -math.inf, math.inf, 0.0))
    return spans


def find_leader(
        world: WorldState,
        route: ReferencePath,
        ego_arc: float,
        offset: float,
        spans: Optional[list[tuple[float, float, float, float, float]]] = None,
) -> tuple[float, float]:
    """
    Nearest obstacle ahead inside the corridor around the offset path.

    Returns:
        (rear arc length of the leader, leader speed along the route); (inf, 0) without one
    """
    spans = _obstacle_spans(world, route) if spans is None else spans
    half = (world.ego.width + CORRIDOR_MARGIN) / 2.0
    front = ego_arc + world.ego.length / 2.0
    best_arc, best_speed = math.inf, 0.0
    for s_min, s_max, d_min, d_max, along in spans:
        if d_max < offset - half or d_min > offset + half:
            continue
        if s_max <= front or s_min - front > LEADER_RANGE:
            continue
        if s_min < best_arc:
            best_arc, best_speed = s_min, along
    return best_arc, best_speed


def emergency_brake(
        ego: EgoState,
        decel_max: float = 3.0,
        horizon: float = PROPOSAL_HORIZON,
        dt: float = 0.1,
) -> Trajectory:
    """Straight-line braking at ``decel_max`` until standstill, then stationary."""
    steps = int(round(horizon / dt))
    t = np.arange(steps + 1) * dt
    stop_time = ego.velocity / decel_max
    moving_time = np.minimum(t, stop_time)
    distance = ego.velocity * moving_time - 0.5 * decel_max * moving_time ** 2
    heading = ego.pose.heading
    return Trajectory(
        times=ego.timestamp + t,
        x=ego.pose.x + distance * math.cos(heading),
        y=ego.pose.y + distance * math.sin(heading),
        heading=np.full(steps + 1, heading),
        velocity=np.maximum(0.0, ego.velocity - decel_max * t),
    )


def generate_proposals(
        world: WorldState,
        params: Union[PlannerParams, ProposalSweep],
        horizon: float = PROPOSAL_HORIZON,
) -> list[Proposal]:
    """
    Roll out one IDM proposal per grid cell along the route shifted by the cell's offset.

    All cells are integrated together with explicit Euler steps; lateral motion follows a
    pure-pursuit law towards a lookahead point on the offset path.
    """
    ego = world.ego
    scenario = world.scenario
    dt = scenario.dt
    cells: list[IdmCell] = params.cells()
    route = scenario.route_path()

    ego_arc, ego_lateral = route.project(np.array([ego.pose.x, ego.pose.y]))
    ego_arc = float(ego_arc)
    if abs(ego_lateral) > OFF_MAP_DISTANCE:
        logger.warning(f"Ego is {ego_lateral:.1f} m off the route in {scenario.id}, proposing a stop")
        brake = emergency_brake(ego, cells[0].decel_max, horizon, dt)
        return [Proposal(trajectory=brake, source_offset=0.0, source_target_speed=0.0)]

    def column(name: str) -> np.ndarray:
        return np.array([getattr(cell, name) for cell in cells], dtype=float)

    offsets = column("lateral_offset")
    limit = float(route.speed_limit_at(ego_arc))
    fallback = column("fallback_target_velocity")
    target = fallback if math.isnan(limit) else column("speed_limit_fraction") * limit
    min_gap, headway = column("min_gap_to_lead_agent"), column("headway_time")
    accel, decel, exponent = column("accel_max"), column("decel_max"), column("idm_exponent")

    spans = _obstacle_spans(world, route)
    leaders = {o: find_leader(world, route, ego_arc, o, spans) for o in np.unique(offsets)}
    lead_arc = np.array([leaders[o][0] for o in offsets])
    lead_speed = np.array([leaders[o][1] for o in offsets])

    steps = int(round(horizon / dt))
    count = len(cells)
    xs, ys, hs, vs = (np.empty((count, steps + 1)) for _ in range(4))
    x = np.full(count, ego.pose.x)
    y = np.full(count, ego.pose.y)
    h = np.full(count, ego.pose.heading)
    v = np.full(count, ego.velocity)
    s = np.full(count, ego_arc)
    xs[:, 0], ys[:, 0], hs[:, 0], vs[:, 0] = x, y, h, v

    for k in range(steps):
        elapsed = k * dt
        with np.errstate(invalid="ignore"):
            gap = np.where(np.isinf(lead_arc), np.inf, lead_arc + lead_speed * elapsed - (s + ego.length / 2.0))
        acc = _idm(v, target, gap, v - lead_speed, min_gap, headway, accel, decel, exponent)
        v_next = np.clip(v + acc * dt, 0.0, np.maximum(target, v))

        lookahead = np.maximum(LOOKAHEAD_DISTANCE, LOOKAHEAD_TIME * v)
        tx, ty = route.position_at(s + lookahead, offsets)
        dx, dy = tx - x, ty - y
        curvature = 2.0 * np.sin(np.arctan2(dy, dx) - h) / np.maximum(np.hypot(dx, dy), 1e-6)

        x = x + v * np.cos(h) * dt
        y = y + v * np.sin(h) * dt
        s = s + v * np.cos(h - route.heading_at(s)) * dt
        h = h + v * curvature * dt
        v = v_next
        xs[:, k + 1], ys[:, k + 1], hs[:, k + 1], vs[:, k + 1] = x, y, h, v

    times = ego.timestamp + np.arange(steps + 1) * dt
    proposals = [
        Proposal(
            trajectory=Trajectory(times=times, x=xs[i], y=ys[i], heading=hs[i], velocity=vs[i]),
            source_offset=cell.lateral_offset,
            source_target_speed=float(target[i]),
            cell=cell,
        )
        for i, cell in enumerate(cells)
    ]
    logger.debug(f"Generated {len(proposals)} proposals at tick {world.tick} of {scenario.id}")
    return proposals
