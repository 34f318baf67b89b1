import json
import logging
import math
import re
from functools import lru_cache
from pathlib import Path
from string import Template
from typing import Any, Optional, Sequence

import numpy as np
from pydantic import ValidationError
from scipy.interpolate import PchipInterpolator

from llm.dto import (
    WAYPOINT_COUNT,
    WAYPOINT_SPACING,
    ChatRequest,
    InvocationPolicy,
    LlmParamResponse,
    LlmTrajectoryResponse,
    PlanDecision,
    PlannerMode,
    Provenance,
    ResponseFormat,
)
from llm.llm_backend import LlmBackend, scene_hash
from llm.llm_exceptions import BackendError, ParseError
from metrics.dto import METRIC_NAMES, MetricReport
from planner.dto import MAX_LATERAL_OFFSET, PlannerParams, Proposal
from planner.idm_planner import emergency_brake, generate_proposals
from planner.internal_sim import InternalSimulator
from scene.scene_types import EgoState, Trajectory, WorldState

logger = logging.getLogger(__name__)

PROMPT_DIR = Path(__file__).parent / "prompts"
SPEED_SANITY_FACTOR = 1.5
STATIONARY_SPEED = 1e-3

PARAM_NAMES = (
    "lateral_offsets",
    "speed_limit_fraction",
    "fallback_target_velocity",
    "min_gap_to_lead_agent",
    "headway_time",
    "accel_max",
    "decel_max",
)
LIST_PARAMS = ("lateral_offsets", "speed_limit_fraction")
PARAM_BOUNDS: dict[str, tuple[float, float]] = {
    "lateral_offsets": (-MAX_LATERAL_OFFSET, MAX_LATERAL_OFFSET),
    "speed_limit_fraction": (0.05, 1.0),
    "fallback_target_velocity": (0.5, 30.0),
    "min_gap_to_lead_agent": (0.5, 10.0),
    "headway_time": (0.1, 5.0),
    "accel_max": (0.1, 5.0),
    "decel_max": (0.5, 8.0),
}

_FENCED = re.compile(r"```(?:json)?\s*(\{.*?\})\s*```", re.DOTALL)
_TRAILING_COMMA = re.compile(r",(\s*[}\]])")


@lru_cache(maxsize=None)
def load_prompt(name: str) -> Template:
    """Prompt template from ``llm/prompts``; leading ``#`` header lines are dropped."""
    lines = (PROMPT_DIR / f"{name}.txt").read_text(encoding="utf-8").splitlines()
    while lines and lines[0].startswith("#"):
        lines.pop(0)
    return Template("\n".join(lines).strip() + "\n")


def should_invoke(
        best_predicted_aggregate: float,
        policy: InvocationPolicy,
        report: Optional[MetricReport] = None,
) -> bool:
    """True iff queries are allowed and the base score (or a gated metric) falls below its threshold."""
    if policy.max_queries_per_step == 0:
        return False
    if best_predicted_aggregate < policy.score_threshold:
        return True
    if report is not None:
        return any(getattr(report, name) < gate for name, gate in policy.metric_gates.items())
    return False


def _fmt(value: Optional[float]) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "none"
    text = f"{value:.2f}"
    return "0.00" if text == "-0.00" else text


def serialize_scene(world: WorldState, proposals: Sequence[Proposal] = ()) -> str:
    """
    Deterministic plain-text rendering of the scene and the scored proposals.

    Agents are listed in id order and every number carries two decimals.
    """
    scenario = world.scenario
    ego = world.ego
    lines = [
        f"SCENARIO {scenario.id}",
        f"TIME {_fmt(world.time)}",
        "EGO",
        f"  x={_fmt(ego.pose.x)} y={_fmt(ego.pose.y)} heading={_fmt(ego.pose.heading)} "
        f"speed={_fmt(ego.velocity)} accel={_fmt(ego.acceleration)} "
        f"length={_fmt(ego.length)} width={_fmt(ego.width)}",
        f"AGENTS {len(world.agents)}",
    ]
    for agent in sorted(world.agents, key=lambda a: a.id):
        lines.append(
            f"  id={agent.id} kind={agent.kind} x={_fmt(agent.pose.x)} y={_fmt(agent.pose.y)} "
            f"heading={_fmt(agent.pose.heading)} speed={_fmt(agent.speed)} "
            f"length={_fmt(agent.length)} width={_fmt(agent.width)} lane={agent.lane_id or '-'}"
        )

    route = scenario.resolved_route()
    lines.append(f"LANES {len(scenario.lanes)}")
    for lane in scenario.lanes:
        centerline = lane.centerline
        samples = centerline[::10]
        if (len(centerline) - 1) % 10:
            samples = samples + [centerline[-1]]
        points = " ".join(f"({_fmt(p.x)},{_fmt(p.y)})" for p in samples)
        lines.append(
            f"  id={lane.id} speed_limit={_fmt(lane.speed_limit)} width={_fmt(lane.width)} "
            f"route={'yes' if lane.id in route else 'no'} centerline={points}"
        )

    states = world.light_states()
    lines.append(f"TRAFFIC LIGHTS {len(scenario.traffic_lights)}")
    for light in scenario.traffic_lights:
        lines.append(f"  lane={light.lane_id} stop_arc={_fmt(light.stop_arc)} state={states[light.lane_id]}")

    lines.append(f"PROPOSALS {len(proposals)}")
    for proposal in proposals:
        report = proposal.predicted_scores
        scores = " ".join(
            f"{name}={_fmt(getattr(report, name)) if report is not None else 'none'}" for name in METRIC_NAMES
        )
        lines.append(
            f"  offset={_fmt(proposal.source_offset)} target_speed={_fmt(proposal.source_target_speed)} "
            f"{scores} aggregate={_fmt(proposal.predicted_aggregate)}"
        )
    return "\n".join(lines) + "\n"


def extract_json_object(text: str) -> dict[str, Any]:
    """First JSON object in a reply: fenced block first, then the first decodable ``{``."""
    if not text or not text.strip():
        raise ParseError("Empty reply")
    candidates = [match.group(1) for match in _FENCED.finditer(text)]
    decoder = json.JSONDecoder()
    for candidate in candidates:
        try:
            data = json.loads(_TRAILING_COMMA.sub(r"\1", candidate))
        except json.JSONDecodeError:
            continue
        if isinstance(data, dict):
            return data

    cleaned = _TRAILING_COMMA.sub(r"\1", text)
    for start in (i for i, char in enumerate(cleaned) if char == "{"):
        try:
            data, _ = decoder.raw_decode(cleaned, start)
        except json.JSONDecodeError:
            continue
        if isinstance(data, dict):
            return data
    raise ParseError(f"No JSON object found in reply: {text[:120]!r}")


def _as_number(name: str, value: Any) -> float:
    if isinstance(value, bool):
        raise ParseError(f"{name} must be numeric, got {value!r}")
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise ParseError(f"{name} must be numeric, got {value!r}")
    if not math.isfinite(number):
        raise ParseError(f"{name} must be finite, got {value!r}")
    return number


def _as_bool(value: Any) -> Optional[bool]:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.strip().lower() in ("true", "false"):
        return value.strip().lower() == "true"
    return None


def _clamp(name: str, value: float, warnings: list[str]) -> float:
    low, high = PARAM_BOUNDS[name]
    if value < low or value > high:
        clamped = min(max(value, low), high)
        warnings.append(f"{name}={value} clamped to {clamped}")
        return clamped
    return value


def parse_param_response(text: str) -> LlmParamResponse:
    """
    Read the seven planner parameters from a free-form reply.

    Out-of-range values are clamped to their bounds and reported as warnings.

    Raises:
        ParseError: no JSON object, a missing parameter or a non-numeric value
    """
    data = extract_json_object(text)
    payload = data["params"] if isinstance(data.get("params"), dict) else data
    missing = [name for name in PARAM_NAMES if name not in payload]
    if missing:
        raise ParseError(f"Missing parameters {missing}")

    warnings: list[str] = []
    values: dict[str, Any] = {}
    for name in PARAM_NAMES:
        raw = payload[name]
        if name in LIST_PARAMS:
            items = raw if isinstance(raw, list) else [raw]
            if not items:
                raise ParseError(f"{name} must not be empty")
            clamped = [_clamp(name, _as_number(name, item), warnings) for item in items]
            values[name] = list(dict.fromkeys(clamped))
        else:
            if isinstance(raw, list):
                if len(raw) != 1:
                    raise ParseError(f"{name} must be a single number")
                raw = raw[0]
            values[name] = _clamp(name, _as_number(name, raw), warnings)

    for warning in warnings:
        logger.warning(f"LLM parameter {warning}")
    try:
        params = PlannerParams.model_validate(values)
    except ValidationError as e:
        raise ParseError(f"Invalid planner parameters: {e}") from e

    brake = _as_bool(data.get("invoke_emergency_brake", payload.get("invoke_emergency_brake")))
    rationale = str(data.get("rationale") or data.get("explanation") or "").strip()
    return LlmParamResponse(params=params, invoke_emergency_brake=brake, rationale=rationale, warnings=warnings)


def _waypoint(index: int, item: Any) -> tuple[float, float]:
    if isinstance(item, dict) and "x" in item and "y" in item:
        item = [item["x"], item["y"]]
    if not isinstance(item, (list, tuple)) or len(item) != 2:
        raise ParseError(f"Waypoint {index} is not an [x, y] pair: {item!r}")
    return _as_number(f"waypoint {index} x", item[0]), _as_number(f"waypoint {index} y", item[1])


def densify_waypoints(
        ego: EgoState,
        waypoints: Sequence[tuple[float, float]],
        dt: float = 0.1,
        spacing: float = WAYPOINT_SPACING,
) -> Trajectory:
    """
    Monotone cubic interpolation of x(t) and y(t) through the ego position and the waypoints.

    Headings follow the path tangent and hold their last value while the ego is stationary.
    """
    knots = np.arange(len(waypoints) + 1) * spacing
    xs = np.array([ego.pose.x] + [w[0] for w in waypoints])
    ys = np.array([ego.pose.y] + [w[1] for w in waypoints])
    steps = int(round(knots[-1] / dt))
    t = np.arange(steps + 1) * dt
    x = PchipInterpolator(knots, xs)(t)
    y = PchipInterpolator(knots, ys)(t)

    vx, vy = np.gradient(x, dt), np.gradient(y, dt)
    speed = np.hypot(vx, vy)
    heading = np.empty_like(t)
    previous = ego.pose.heading
    for i in range(len(t)):
        if speed[i] > STATIONARY_SPEED:
            previous = math.atan2(vy[i], vx[i])
        heading[i] = previous
    return Trajectory(times=ego.timestamp + t, x=x, y=y, heading=np.unwrap(heading), velocity=speed)


def parse_trajectory_response(
        text: str,
        ego: EgoState,
        dt: float = 0.1,
        speed_limit: Optional[float] = None,
) -> LlmTrajectoryResponse:
    """
    Read four waypoints at two-second spacing and densify them onto the tick grid.

    Raises:
        ParseError: missing JSON, a waypoint count other than four, non-numeric values,
            or implied speed above 1.5x the speed limit
    """
    data = extract_json_object(text)
    raw = data.get("waypoints")
    if not isinstance(raw, list):
        raise ParseError("Reply has no waypoints list")
    if len(raw) != WAYPOINT_COUNT:
        raise ParseError(f"Expected {WAYPOINT_COUNT} waypoints, got {len(raw)}")
    waypoints = [_waypoint(i, item) for i, item in enumerate(raw)]

    trajectory = densify_waypoints(ego, waypoints, dt)
    if speed_limit is not None and not math.isnan(speed_limit):
        peak = float(trajectory.velocity.max())
        if peak > SPEED_SANITY_FACTOR * speed_limit + 1e-9:
            raise ParseError(f"Waypoints imply {peak:.1f} m/s, above {SPEED_SANITY_FACTOR}x the {speed_limit:.1f} m/s limit")

    return LlmTrajectoryResponse(
        waypoints=waypoints,
        rationale=str(data.get("rationale") or "").strip(),
        invoke_emergency_brake=_as_bool(data.get("invoke_emergency_brake")),
        trajectory=trajectory,
    )


def build_request(
        world: WorldState,
        scene: str,
        policy: InvocationPolicy,
        backend: LlmBackend,
        response_format: ResponseFormat,
        query_index: int,
        query_budget: int,
        history: Sequence[str] = (),
) -> ChatRequest:
    system = load_prompt("system_params" if response_format == "params" else "system_waypoints")
    user = load_prompt("user").substitute(
        tick=world.tick,
        query_number=query_index + 1,
        query_budget=query_budget,
        scene=scene.rstrip("\n"),
        history=("\nPrevious answers this step:\n" + "\n".join(history)) if history else "",
    )
    return ChatRequest(
        system_prompt=system.substitute(),
        user_prompt=user,
        temperature=policy.temperature,
        max_tokens=backend.max_tokens,
        model_name=backend.model_name,
        scenario_id=world.scenario.id,
        tick=world.tick,
        query_index=query_index,
        response_format=response_format,
        scene_hash=scene_hash(scene),
        world=world,
    )


def _route_speed_limit(world: WorldState) -> Optional[float]:
    route = world.scenario.route_path()
    s, _ = route.project(np.array([world.ego.pose.x, world.ego.pose.y]))
    limit = float(route.speed_limit_at(s))
    return None if math.isnan(limit) else limit


async def plan_step(
        world: WorldState,
        policy: InvocationPolicy,
        backend: Optional[LlmBackend] = None,
        params: PlannerParams = PlannerParams(),
        mode: PlannerMode = "assist-par",
        simulator: Optional[InternalSimulator] = None,
) -> PlanDecision:
    """
    One planning tick: base proposals, optional LLM queries, final selection, emergency check.

    The final pick is the best predicted aggregate over the base proposal and every LLM
    candidate, earlier candidates winning ties.
    """
    simulator = simulator or InternalSimulator()
    forecast = simulator.forecast(world)
    base_proposals = generate_proposals(world, params)
    base, base_score = simulator.select(world, base_proposals, forecast)

    response_format: ResponseFormat = "params" if mode == "assist-par" else "waypoints"
    llm_provenance: Provenance = "llm_par" if mode == "assist-par" else "llm_unc"
    candidates: list[tuple[Proposal, Provenance, str, bool]] = []
    queries = 0
    degraded = False

    budget = policy.max_queries_per_step
    if mode == "llm-only":
        budget = max(1, budget)
    invoke = mode == "llm-only" or (mode != "base" and should_invoke(base_score, policy, base.predicted_scores))
    if invoke and backend is None:
        logger.warning(f"Tick {world.tick}: no backend configured, keeping the base proposal")
        invoke = False

    if invoke:
        scene = serialize_scene(world, base_proposals)
        speed_limit = _route_speed_limit(world)
        history: list[str] = []
        for query_index in range(budget):
            request = build_request(world, scene, policy, backend, response_format, query_index, budget, history)
            queries += 1
            try:
                text = await backend.complete(request)
            except BackendError as e:
                logger.warning(f"Tick {world.tick}: backend unavailable, degraded to base planner: {e}")
                degraded = True
                break

            try:
                if response_format == "params":
                    parsed = parse_param_response(text)
                    proposals = generate_proposals(world, parsed.params)
                    candidate, score = simulator.select(world, proposals, forecast)
                    summary = parsed.params.model_dump_json(by_alias=True, exclude={"idm_exponent"})
                else:
                    parsed = parse_trajectory_response(text, world.ego, world.scenario.dt, speed_limit)
                    candidate = Proposal(
                        trajectory=parsed.trajectory,
                        source_offset=0.0,
                        source_target_speed=float(parsed.trajectory.velocity.max()),
                    )
                    score = simulator.score(world, [candidate], forecast)[0].aggregate
                    summary = json.dumps(parsed.waypoints)
            except ParseError as e:
                logger.warning(f"Tick {world.tick} query {query_index + 1}: unusable reply: {e}")
                history.append(f"- answer {query_index + 1} could not be used: {e}")
                continue

            candidates.append((candidate, llm_provenance, parsed.rationale, bool(parsed.invoke_emergency_brake)))
            history.append(f"- answer {query_index + 1} {summary} scored {score:.2f}")
            logger.debug(f"Tick {world.tick} query {query_index + 1}: candidate scored {score:.3f}")
            if score >= policy.score_threshold:
                break

    if mode != "llm-only" or not candidates:
        candidates.insert(0, (base, "base", "", False))
    chosen, provenance, rationale, brake_requested = candidates[0]
    for proposal, source, reason, brake in candidates[1:]:
        if proposal.predicted_aggregate > chosen.predicted_aggregate:
            chosen, provenance, rationale, brake_requested = proposal, source, reason, brake

    trajectory = chosen.trajectory
    if simulator.is_emergency(world, chosen, forecast):
        logger.info(f"Tick {world.tick}: collision predicted within the emergency window, braking")
        trajectory, provenance = emergency_brake(world.ego, params.decel_max, dt=world.scenario.dt), "emergency"
    elif brake_requested and policy.allow_llm_emergency_brake:
        logger.info(f"Tick {world.tick}: emergency brake requested by the LLM")
        trajectory, provenance = emergency_brake(world.ego, params.decel_max, dt=world.scenario.dt), "emergency"

    return PlanDecision(
        tick=world.tick,
        trajectory=trajectory,
        provenance=provenance,
        rationale=rationale,
        predicted_aggregate=base_score,
        selected_aggregate=chosen.predicted_aggregate,
        queries_used=queries,
        report=chosen.predicted_scores,
        degraded=degraded,
        llm_brake_requested=brake_requested,
        candidate_scores=[p.predicted_aggregate for p, _, _, _ in candidates],
    )


class Planner:
    """Closed-loop planner for one configuration; ``mode`` selects how the LLM takes part."""

    def __init__(
            self,
            mode: PlannerMode = "base",
            policy: InvocationPolicy = InvocationPolicy(),
            backend: Optional[LlmBackend] = None,
            params: PlannerParams = PlannerParams(),
            simulator: Optional[InternalSimulator] = None,
            name: Optional[str] = None,
    ):
        self.mode = mode
        self.policy = policy if mode != "base" else policy.model_copy(update={"max_queries_per_step": 0})
        self.backend = backend
        self.params = params
        self.simulator = simulator or InternalSimulator()
        self.name = name or mode

    async def plan(self, world: WorldState) -> PlanDecision:
        return await plan_step(world, self.policy, self.backend, self.params, self.mode, self.simulator)
